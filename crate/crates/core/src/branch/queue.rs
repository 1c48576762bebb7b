use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::roles::ServiceNeed;
use crate::protocol::{CustomerId, StationId};
use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub customer_id: CustomerId,
    pub need: ServiceNeed,
    pub enqueued_at: Millis,
    pub assigned_station: StationId,
}

impl QueueEntry {
    fn order_key(&self) -> (Millis, CustomerId) {
        (self.enqueued_at, self.customer_id)
    }
}

/// Per-station FIFO lines ordered by `(enqueued_at, customer_id)`.
#[derive(Debug, Clone, Default)]
pub struct StationQueues {
    lines: BTreeMap<StationId, Vec<QueueEntry>>,
}

impl StationQueues {
    pub fn ensure_station(&mut self, station: StationId) {
        self.lines.entry(station).or_default();
    }

    pub fn len(&self, station: StationId) -> usize {
        self.lines.get(&station).map_or(0, Vec::len)
    }

    pub fn line(&self, station: StationId) -> &[QueueEntry] {
        self.lines.get(&station).map_or(&[], Vec::as_slice)
    }

    pub fn stations(&self) -> impl Iterator<Item = (StationId, &[QueueEntry])> {
        self.lines.iter().map(|(id, l)| (*id, l.as_slice()))
    }

    /// Station whose line currently holds the customer.
    pub fn locate(&self, customer: CustomerId) -> Option<(StationId, usize)> {
        self.lines.iter().find_map(|(id, line)| {
            line.iter()
                .position(|e| e.customer_id == customer)
                .map(|pos| (*id, pos))
        })
    }

    /// Inserts in order; returns the 1-based position.
    pub(crate) fn push(&mut self, entry: QueueEntry) -> usize {
        debug_assert!(self.locate(entry.customer_id).is_none());
        let line = self.lines.entry(entry.assigned_station).or_default();
        let idx = line.partition_point(|e| e.order_key() <= entry.order_key());
        line.insert(idx, entry);
        idx + 1
    }

    pub(crate) fn pop_front(&mut self, station: StationId) -> Option<QueueEntry> {
        let line = self.lines.get_mut(&station)?;
        (!line.is_empty()).then(|| line.remove(0))
    }

    /// Removes the customer from whatever line holds them.
    pub(crate) fn remove(&mut self, customer: CustomerId) -> Option<(QueueEntry, usize)> {
        let (station, idx) = self.locate(customer)?;
        let line = self.lines.get_mut(&station)?;
        Some((line.remove(idx), idx))
    }

    pub fn total(&self) -> usize {
        self.lines.values().map(Vec::len).sum()
    }
}

/// One station as seen by the assignment rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationCandidate {
    pub station_id: StationId,
    pub capable: bool,
    pub queue_len: usize,
    pub distance_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub station_id: StationId,
    /// True when no capable station existed and the customer was routed to
    /// one that will have to hand them off.
    pub handoff: bool,
}

/// Lexicographic minimum of `(queue length, walking distance, station id)`
/// over capable stations, or over all stations when none is capable.
pub fn select_station(candidates: &[StationCandidate]) -> Option<Assignment> {
    let best = |pool: &mut dyn Iterator<Item = &StationCandidate>| {
        pool.min_by(|a, b| {
            a.queue_len
                .cmp(&b.queue_len)
                .then(a.distance_m.total_cmp(&b.distance_m))
                .then(a.station_id.cmp(&b.station_id))
        })
        .map(|c| c.station_id)
    };
    if let Some(station_id) = best(&mut candidates.iter().filter(|c| c.capable)) {
        return Some(Assignment {
            station_id,
            handoff: false,
        });
    }
    best(&mut candidates.iter()).map(|station_id| Assignment {
        station_id,
        handoff: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: u32, capable: bool, queue_len: usize, distance_m: f64) -> StationCandidate {
        StationCandidate {
            station_id: StationId(id),
            capable,
            queue_len,
            distance_m,
        }
    }

    #[test]
    fn single_station_takes_everyone() {
        let a = select_station(&[cand(4, false, 3, 9.0)]).unwrap();
        assert_eq!(
            a,
            Assignment {
                station_id: StationId(4),
                handoff: true
            }
        );
    }

    #[test]
    fn shorter_queue_wins() {
        let a = select_station(&[cand(1, true, 2, 1.0), cand(2, true, 0, 5.0)]).unwrap();
        assert_eq!(a.station_id, StationId(2));
        assert!(!a.handoff);
    }

    #[test]
    fn ties_break_on_distance_then_id() {
        let a = select_station(&[
            cand(3, true, 1, 2.0),
            cand(1, true, 1, 2.0),
            cand(2, true, 1, 1.0),
        ]);
        assert_eq!(a.unwrap().station_id, StationId(2));
        let a = select_station(&[cand(3, true, 1, 2.0), cand(1, true, 1, 2.0)]);
        assert_eq!(a.unwrap().station_id, StationId(1));
    }

    #[test]
    fn empty_has_no_assignment() {
        assert_eq!(select_station(&[]), None);
    }

    #[test]
    fn fifo_with_customer_tiebreak() {
        let mut q = StationQueues::default();
        let e = |c: u64, t: u64| QueueEntry {
            customer_id: CustomerId(c),
            need: ServiceNeed::GeneralInquiry,
            enqueued_at: t,
            assigned_station: StationId(1),
        };
        assert_eq!(q.push(e(9, 2)), 1);
        assert_eq!(q.push(e(5, 1)), 1);
        assert_eq!(q.push(e(3, 2)), 2);
        let order: Vec<u64> = std::iter::from_fn(|| q.pop_front(StationId(1)))
            .map(|e| e.customer_id.0)
            .collect();
        assert_eq!(order, vec![5, 3, 9]);
    }
}

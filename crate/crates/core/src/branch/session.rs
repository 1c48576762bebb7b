use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::roles::{AgentRole, Entitlement};
use crate::protocol::{CustomerId, SessionId, StationId};
use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SessionState {
    PreConnected,
    Authenticated,
    Queued,
    InService,
    Transferring,
    Closed,
}

impl SessionState {
    pub const ALL: [SessionState; 6] = [
        SessionState::PreConnected,
        SessionState::Authenticated,
        SessionState::Queued,
        SessionState::InService,
        SessionState::Transferring,
        SessionState::Closed,
    ];

    pub fn can_transition_to(self, to: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, to),
            (PreConnected, Authenticated | Closed)
                | (Authenticated, Queued | Closed)
                | (Queued, InService | Closed)
                | (InService, Transferring | Closed)
                | (Transferring, Queued | InService | Closed)
        )
    }

    /// Whether entitlements may be held in this state.
    pub fn is_authenticated(self) -> bool {
        !matches!(self, SessionState::PreConnected | SessionState::Closed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    pub customer_id: CustomerId,
    pub state: SessionState,
    pub bound_station: Option<StationId>,
    pub active_role: Option<AgentRole>,
    pub entitlements: BTreeSet<Entitlement>,
    pub created_at: Millis,
    pub state_entered_at: Millis,
    /// Set once the customer has first reached service.
    pub served: bool,
    /// Set once the customer has first joined a queue.
    pub enqueued: bool,
}

impl Session {
    pub(crate) fn new(
        session_id: SessionId,
        customer_id: CustomerId,
        station: StationId,
        at: Millis,
    ) -> Self {
        Self {
            session_id,
            customer_id,
            state: SessionState::PreConnected,
            bound_station: Some(station),
            active_role: None,
            entitlements: BTreeSet::new(),
            created_at: at,
            state_entered_at: at,
            served: false,
            enqueued: false,
        }
    }

    pub fn entitled_to(&self, resource: &str) -> bool {
        self.entitlements.iter().any(|e| e.resource == resource)
    }

    pub fn resources(&self) -> BTreeSet<String> {
        self.entitlements
            .iter()
            .map(|e| e.resource.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub session_id: SessionId,
    pub from: SessionState,
    pub to: SessionState,
    pub at: Millis,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_is_terminal() {
        for s in SessionState::ALL {
            assert!(!SessionState::Closed.can_transition_to(s));
        }
    }

    #[test]
    fn every_open_state_can_close() {
        for s in SessionState::ALL
            .into_iter()
            .filter(|s| *s != SessionState::Closed)
        {
            assert!(s.can_transition_to(SessionState::Closed));
        }
    }

    #[test]
    fn legal_table_size() {
        let legal = SessionState::ALL
            .iter()
            .flat_map(|a| SessionState::ALL.iter().map(move |b| (a, b)))
            .filter(|(a, b)| a.can_transition_to(**b))
            .count();
        assert_eq!(legal, 11);
        assert!(!SessionState::InService.can_transition_to(SessionState::Queued));
    }
}

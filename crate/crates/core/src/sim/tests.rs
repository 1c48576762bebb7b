use super::*;

fn quiet(mut cfg: SimConfig) -> SimConfig {
    cfg.ranging.noise_sigma_db = 0.0;
    cfg.ranging.ema_alpha = 1.0;
    cfg
}

fn one_station_floor() -> FloorPlan {
    let mut floor = FloorPlan::default();
    floor.stations.truncate(1);
    floor.stations[0].position = Point::new(10.0, 1.0);
    floor
}

fn single_customer(handshake_ms: u64) -> SimConfig {
    quiet(SimConfig {
        duration_s: 60.0,
        handshake_ms,
        walk_speed_mps: 0.5,
        floor: one_station_floor(),
        script: Some(Script {
            arrivals: vec![ScriptArrival {
                at_s: 0.0,
                need: ServiceNeed::GeneralInquiry,
                service_s: Some(10.0),
            }],
            actions: vec![],
        }),
        ..SimConfig::default()
    })
}

#[test]
fn zero_rate_gives_empty_report() {
    let cfg = SimConfig {
        arrival_rate_per_min: 0.0,
        duration_s: 120.0,
        ..SimConfig::default()
    };
    let r = run(&cfg).unwrap();
    assert_eq!(
        (r.arrivals_count, r.served_count, r.max_queue_len),
        (0, 0, 0)
    );
    assert_eq!(
        (r.mean_wait_s, r.p95_wait_s, r.preconnect_savings_ms),
        (0.0, 0.0, 0.0)
    );
}

#[test]
fn same_seed_same_digest() {
    let cfg = SimConfig {
        seed: 11,
        duration_s: 900.0,
        ..SimConfig::default()
    };
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(a, b);
    let c = run(&SimConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.determinism_digest, c.determinism_digest);
}

#[test]
fn handshake_is_hidden_for_a_slow_walker() {
    assert_eq!(compare_baseline(&single_customer(300)).unwrap(), 300.0);
    assert_eq!(compare_baseline(&single_customer(0)).unwrap(), 0.0);
}

#[test]
fn single_customer_never_waits() {
    let r = run(&single_customer(300)).unwrap();
    assert_eq!((r.arrivals_count, r.served_count), (1, 1));
    assert_eq!(r.mean_wait_s, 0.0);
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        SimConfig {
            arrival_rate_per_min: -1.0,
            ..SimConfig::default()
        },
        SimConfig {
            duration_s: 0.0,
            ..SimConfig::default()
        },
        SimConfig {
            walk_speed_mps: 0.0,
            ..SimConfig::default()
        },
        SimConfig {
            floor: FloorPlan {
                entry_point: Point::new(-1.0, 0.0),
                ..FloorPlan::default()
            },
            ..SimConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(run(&cfg), Err(SimError::InvalidConfig(_))));
    }
    let mut dup = FloorPlan::default();
    dup.stations[1].position = dup.stations[0].position;
    assert!(dup.validate().is_err());
}

#[test]
fn time_never_runs_backwards() {
    let mut w = World::new(SimConfig::default()).unwrap();
    w.step(500, &Event::Tick).unwrap();
    assert!(matches!(
        w.step(499, &Event::Tick),
        Err(SimError::TimeRegression {
            now: 500,
            event: 499
        })
    ));
}

#[test]
fn empty_tick_only_moves_the_clock() {
    let mut w = World::new(SimConfig::default()).unwrap();
    let log_before = w.log().lines().len();
    let next = w.step(1_000, &Event::Tick).unwrap();
    assert_eq!(w.now(), 1_000);
    assert!(w.actors().is_empty());
    assert_eq!(w.log().lines().len(), log_before);
    assert_eq!(next, vec![(1_100, Event::Tick)]);
}

#[test]
fn one_second_tick_covers_walk_speed() {
    let mut cfg = single_customer(300);
    cfg.walk_speed_mps = 1.2;
    cfg.ranging.sample_hz = 1.0;
    // Standing point is 0.2 m in front of the station at (10, 1).
    cfg.floor.entry_point = Point::new(10.0, 1.2 + 2.4);
    let mut w = World::new(cfg).unwrap();
    w.step(0, &Event::Arrival(Some(0))).unwrap();
    let d0 = w.actors()[&CustomerId(1)].distance_to_target();
    assert!((d0 - 2.4).abs() < 1e-12);
    w.step(1_000, &Event::Tick).unwrap();
    let d1 = w.actors()[&CustomerId(1)].distance_to_target();
    assert!((d1 - 1.2).abs() < 1e-12, "{d1}");
}

#[test]
fn straight_walk_passes_each_zone_once() {
    let (_, log) = simulate(&single_customer(300)).unwrap();
    let zones: Vec<String> = log
        .lines()
        .iter()
        .filter(|l| l.contains(r#""kind":"zone""#))
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            v["to"].as_str().unwrap().to_owned()
        })
        .collect();
    assert_eq!(zones, vec!["Far", "Near", "Immediate"]);
}

#[test]
fn metrics_roundtrip_and_digest_recomputes() {
    let dir = tempfile::tempdir().unwrap();
    let (report, log) = run_with_log(&SimConfig {
        seed: 3,
        duration_s: 300.0,
        ..SimConfig::default()
    })
    .unwrap();
    let path = dir.path().join("m.json");
    emit_metrics(&report, &path).unwrap();
    assert_eq!(read_metrics(&path).unwrap(), report);
    let text = std::fs::read_to_string(&path).unwrap();
    let keys: Vec<&str> = text
        .split('"')
        .skip(1)
        .step_by(2)
        .filter(|k| k.ends_with(|c: char| c.is_alphabetic()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(log_digest(&log.to_text()), report.determinism_digest);
}

#[test]
fn percentile_is_nearest_rank() {
    let v: Vec<Millis> = (1..=20).collect();
    assert_eq!(percentile_nearest_rank(&v, 0.95), 19);
    assert_eq!(percentile_nearest_rank(&[5], 0.95), 5);
    assert_eq!(percentile_nearest_rank(&[], 0.95), 0);
}

#[test]
fn light_load_waits_stay_below_service_mean() {
    // rho = 0.5 * 60 / 3 / 60 = 0.17
    for seed in [1, 2, 3] {
        let cfg = SimConfig {
            seed,
            duration_s: 4.0 * 3600.0,
            arrival_rate_per_min: 0.5,
            service_time_mean_s: 60.0,
            ..SimConfig::default()
        };
        let (outcome, _) = simulate(&cfg).unwrap();
        let mean_s = outcome.waits_ms.iter().sum::<u64>() as f64
            / outcome.waits_ms.len().max(1) as f64
            / 1000.0;
        assert!(outcome.served > 50, "seed {seed}: {}", outcome.served);
        assert!(mean_s < cfg.service_time_mean_s, "seed {seed}: {mean_s}");
    }
}

#[test]
fn config_parses_from_toml() {
    let text = r#"
seed = 9
duration_s = 60
arrival_rate_per_min = 1.5

[ranging]
noise_sigma_db = 0.0

[script]
[[script.arrivals]]
at_s = 1.0
need = "TransactionRequest"
[[script.actions]]
at_s = 20.0
customer = 1
action = { kind = "opt_out", category = "Visual" }
"#;
    let cfg: SimConfig = toml::from_str(text).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.ranging.noise_sigma_db, 0.0);
    assert_eq!(cfg.ranging.sample_hz, RangingConfig::default().sample_hz);
    let script = cfg.script.unwrap();
    assert_eq!(
        script.actions[0].action,
        Directive::OptOut {
            category: DataCategory::Visual
        }
    );
}

#[test]
fn throughput_sweep_adds_stations_one_at_a_time() {
    // Six customers at once, a minute each: one desk cannot finish them all.
    let arrivals = (0..6)
        .map(|i| ScriptArrival {
            at_s: f64::from(i),
            need: ServiceNeed::GeneralInquiry,
            service_s: Some(60.0),
        })
        .collect();
    let cfg = quiet(SimConfig {
        duration_s: 200.0,
        script: Some(Script {
            arrivals,
            actions: vec![],
        }),
        ..SimConfig::default()
    });
    let points = throughput_by_station_count(&cfg).unwrap();
    assert_eq!(points.len(), cfg.floor.stations.len());
    for (i, p) in points.iter().enumerate() {
        assert_eq!(p.stations, i + 1);
        assert_eq!(p.arrivals_count, 6);
        assert!((p.served_per_hour - p.served_count as f64 * 3600.0 / 200.0).abs() < 1e-9);
    }
    assert!(points[0].served_count < 6);
    assert!(points[1].served_count > points[0].served_count);
    assert!(points[1].mean_wait_s < points[0].mean_wait_s);
}

#[test]
fn throughput_sweep_without_arrivals_is_zero() {
    let cfg = SimConfig {
        arrival_rate_per_min: 0.0,
        duration_s: 60.0,
        ..SimConfig::default()
    };
    for p in throughput_by_station_count(&cfg).unwrap() {
        assert_eq!(
            (p.served_count, p.served_per_hour, p.mean_wait_s),
            (0, 0.0, 0.0)
        );
    }
}

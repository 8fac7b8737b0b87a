use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use lanekg::corpus::rule_label;
use lanekg::features::{FeatureVector, Intention, ScenarioPreset};
use lanekg::protocol::{serve, ActuationCommand, LinkError, PerceptionClient, PredictionServer, RetryPolicy};
use lanekg::sim::{
    run_scenario, InProcessLink, Lane, LinkReply, PredictionLink, RunOptions, ScenarioConfig, ScenarioMetrics,
    ScenarioTrace, SimError, TcpLink, TvMode,
};
use lanekg::table::{header, PredictionTable, Scope};
use proptest::prelude::*;

fn rule_table() -> PredictionTable {
    let scope = Scope::Scenario(ScenarioPreset::default());
    let mut text = format!("# lanekg-table model=rule scope={scope}\n{}\n", header().join(","));
    for i in 0..scope.size() {
        let v = scope.vector(i);
        let h = rule_label(&v);
        let mut p = ["1.00000000e-1"; 3];
        p[h.index()] = "8.00000000e-1";
        text += &format!("{},{h},{}\n", v.to_tokens(), p.join(","));
    }
    PredictionTable::read_csv(text.as_bytes()).unwrap()
}

fn link() -> InProcessLink {
    InProcessLink::new(PredictionServer::new(rule_table()))
}

fn run(c: &ScenarioConfig) -> lanekg::sim::ScenarioRun {
    run_scenario(c, Some(&mut link()), RunOptions::default()).unwrap()
}

fn on() -> ScenarioConfig {
    ScenarioConfig::default()
}

fn off() -> ScenarioConfig {
    ScenarioConfig {
        prediction_enabled: false,
        ..Default::default()
    }
}

#[test]
fn prediction_on_anticipates_the_cut_in() {
    let r = run(&on());
    let m = &r.metrics;
    let horizon = m.anticipation_horizon.unwrap();
    assert!((3.0..=5.0).contains(&horizon), "horizon {horizon}");
    assert!(m.ev_brake_onset.unwrap() < m.crossing_time.unwrap());
    assert!(m.ev_brake_lead.unwrap() > 0.0);
    assert!(!m.collision);
    assert!(m.tv_emergency_time.is_none());
    assert!(m.tv_min_speed >= 9.0 && m.tv_max_speed <= 11.0);
    assert!(m.min_gap_tv_ev > 0.0);
    // The EV brakes at most at its configured deceleration and comes to rest.
    assert!(m.ev_max_abs_accel <= 3.0 + 1e-12);
    assert_eq!(r.trace.rows.last().unwrap().ev().v, 0.0);
    assert_eq!(r.trace.rows.last().unwrap().tv().lane, Lane::Left);
}

#[test]
fn prediction_off_forces_an_emergency_brake() {
    let r = run(&off());
    let m = &r.metrics;
    assert!(m.crossing_time.is_none());
    assert!(m.ev_max_abs_accel <= 0.05);
    assert!(m.tv_emergency_time.is_some());
    assert!(m.tv_min_accel <= -5.0);
    assert!(!m.collision);
    assert_eq!(m.min_gap_tv_ev, f64::INFINITY);
    // Predictions are still logged; the EV just ignores them.
    assert!(m.first_llc_time.is_some());
    assert!(r.trace.rows.iter().all(|row| row.tv().lane == Lane::Right));
}

#[test]
fn prediction_requires_a_link() {
    assert!(matches!(
        run_scenario(&on(), None, RunOptions::default()),
        Err(SimError::LinkRequired)
    ));
    let r = run_scenario(&off(), None, RunOptions::default()).unwrap();
    assert!(r.trace.rows.iter().all(|row| row.intention.is_none()));
    assert_eq!(r.metrics.tv_min_accel, run(&off()).metrics.tv_min_accel);
}

#[test]
fn runs_are_deterministic_and_traces_round_trip() {
    let noisy = ScenarioConfig {
        perception_noise: 0.5,
        rng_seed: 3,
        ..on()
    };
    for c in [on(), off(), noisy] {
        let a = run(&c);
        let b = run(&c);
        let text = a.trace.to_csv_string();
        assert_eq!(text, b.trace.to_csv_string());
        assert_eq!(a.metrics, b.metrics);
        let back = ScenarioTrace::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, a.trace);
        assert_eq!(ScenarioMetrics::from_trace(&back, c.vehicle_length), a.metrics);
    }
    let dir = tempfile::tempdir().unwrap();
    let t = run(&on()).trace;
    t.save(dir.path().join("trace.csv")).unwrap();
    assert_eq!(ScenarioTrace::load(dir.path().join("trace.csv")).unwrap(), t);
}

#[test]
fn trace_load_reports_bad_rows() {
    let text = run(&on()).trace.to_csv_string();
    let broken = text.replacen("right", "middle", 1);
    assert!(matches!(
        ScenarioTrace::read_csv(broken.as_bytes()),
        Err(SimError::Trace { line: 2, .. })
    ));
    let bad_header = text.replacen("ev_s", "ev_x", 1);
    assert!(matches!(
        ScenarioTrace::read_csv(bad_header.as_bytes()),
        Err(SimError::Trace { line: 1, .. })
    ));
}

#[test]
fn integration_is_consistent_between_ticks() {
    let c = on();
    let dt = c.tick_dt;
    for trace in [run(&on()).trace, run(&off()).trace] {
        for w in trace.rows.windows(2) {
            for (a, b) in w[0].vehicles.iter().zip(&w[1].vehicles) {
                assert!(b.v >= 0.0);
                assert!(a.a.abs() <= c.a_max);
                let expect_v = (a.v + a.a * dt).max(0.0);
                assert!((b.v - expect_v).abs() <= 1e-9, "{a:?} -> {b:?}");
                let fd = (b.s - a.s) / dt;
                assert!((fd - 0.5 * (a.v + b.v)).abs() <= 1e-6 * dt.max(1.0), "{a:?} -> {b:?}");
            }
            assert!((w[1].t - w[0].t - dt).abs() < 1e-9);
        }
    }
}

/// Sends BRAKE for the first LLC and CRUISE for everything after it.
struct Flaky {
    inner: InProcessLink,
    braked: bool,
}

impl PredictionLink for Flaky {
    fn exchange(&mut self, ts: u64, f: FeatureVector) -> Result<LinkReply, LinkError> {
        let mut r = self.inner.exchange(ts, f)?;
        if r.actuation == ActuationCommand::Brake && !self.braked {
            self.braked = true;
        } else {
            r.actuation = ActuationCommand::Cruise;
        }
        Ok(r)
    }
}

#[test]
fn brake_latch_survives_later_cruise_commands() {
    let mut flaky = Flaky {
        inner: link(),
        braked: false,
    };
    let r = run_scenario(&on(), Some(&mut flaky), RunOptions::default()).unwrap();
    assert!(flaky.braked);
    let reference = run(&on());
    let ev = |t: &ScenarioTrace| t.rows.iter().map(|r| *r.ev()).collect::<Vec<_>>();
    assert_eq!(ev(&r.trace), ev(&reference.trace));
    assert_eq!(r.trace.rows.last().unwrap().ev().v, 0.0);
}

#[test]
fn without_pv_braking_the_tv_keeps_its_lane() {
    let c = ScenarioConfig {
        pv_brake_trigger_s: 1e9,
        ..on()
    };
    let r = run(&c);
    assert!(r.metrics.crossing_time.is_none());
    assert!(r.metrics.first_llc_time.is_none());
    assert!(r
        .trace
        .rows
        .iter()
        .all(|row| row.tv_mode == TvMode::Cruise && row.ev().a == 0.0));
}

#[test]
fn slower_perception_updates_less_often() {
    let c = ScenarioConfig {
        perception_rate_hz: 5.0,
        ..on()
    };
    let r = run(&c);
    let perceived = r.trace.rows.iter().filter(|row| row.features.is_some()).count();
    assert_eq!(perceived, r.trace.rows.len().div_ceil(3));
    assert_eq!(r.timing.exchanges, perceived);
    assert!(r.metrics.anticipation_horizon.unwrap() > 0.0);
}

#[test]
fn tcp_link_matches_in_process_run() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = listener.local_addr().unwrap().to_string();
    let act_listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let act_addr = act_listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let mut act = std::net::TcpStream::connect(act_addr).unwrap();
        serve(&PredictionServer::new(rule_table()), &listener, &mut act, Some(1)).unwrap()
    });
    let (act_stream, _) = act_listener.accept().unwrap();
    let client = PerceptionClient::connect(
        &endpoint,
        RetryPolicy {
            retries: 5,
            delay: Duration::from_millis(50),
        },
    )
    .unwrap();
    let mut tcp = TcpLink::new(client, Some(act_stream));
    let r = run_scenario(&on(), Some(&mut tcp), RunOptions::default()).unwrap();
    drop(tcp);
    let stats = server.join().unwrap();
    assert_eq!(stats.predictions as usize, r.trace.rows.len());
    assert_eq!(r.trace, run(&on()).trace);
    assert!(r.timing.percentile(99.0) < Duration::from_millis(100));
}

#[test]
fn first_llc_precedes_the_lane_change() {
    let r = run(&on());
    let m = &r.metrics;
    assert!(m.first_llc_time.unwrap() < m.lane_change_start.unwrap());
    assert!(m.lane_change_start.unwrap() < m.crossing_time.unwrap());
    let first = r
        .trace
        .rows
        .iter()
        .find(|row| row.intention == Some(Intention::Llc))
        .unwrap();
    assert_eq!(first.actuation, Some(ActuationCommand::Brake));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn invariants_hold_across_configs(
        v0 in 5.0f64..15.0,
        pv_v0 in 5.0f64..15.0,
        gap in 10.0f64..60.0,
        trigger in 0.0f64..80.0,
        enabled in any::<bool>(),
        noise in 0.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let c = ScenarioConfig {
            ev_v0: v0,
            tv_v0: v0,
            pv_v0,
            pv_s0: gap + 4.0,
            pv_brake_trigger_s: gap + 4.0 + trigger,
            prediction_enabled: enabled,
            perception_noise: noise,
            rng_seed: seed,
            ..Default::default()
        };
        let r = run(&c);
        let mut crossed = false;
        for row in &r.trace.rows {
            for v in &row.vehicles {
                prop_assert!(v.v >= 0.0 && v.a.abs() <= c.a_max && v.s.is_finite());
            }
            prop_assert_eq!(row.ev().lane, Lane::Left);
            prop_assert_eq!(row.pv().lane, Lane::Right);
            if crossed {
                prop_assert_eq!(row.tv().lane, Lane::Left);
            }
            crossed |= row.tv().lane == Lane::Left;
            if !enabled {
                prop_assert_eq!(row.ev().a, 0.0);
            }
        }
        if let (Some(h), Some(_)) = (r.metrics.anticipation_horizon, r.metrics.crossing_time) {
            prop_assert!(h >= 0.0);
        }
        prop_assert_eq!(run(&c).trace, r.trace);
    }
}

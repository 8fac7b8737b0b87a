use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use lanekg::corpus::rule_label;
use lanekg::features::{
    assemble_features, FeatureVector, Intention, KinematicSnapshot, ScenarioPreset, ThwRisk, TtcRisk,
};
use lanekg::protocol::{
    micro_units, open_actuation, perceive, run_perception_client, serve, ActuationCommand, FeatureMessage, LinkError,
    Message, PerceptionClient, PredictionMessage, PredictionServer, RetryPolicy, ServeStats, Session, MAX_LINE,
};
use lanekg::table::{header, PredictionTable, Scope};
use proptest::prelude::*;

/// Scenario-scope table labeled by the rule oracle.
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

fn preset_vector(ttc: TtcRisk, thw: ThwRisk) -> FeatureVector {
    assemble_features(ttc, thw, &ScenarioPreset::default())
}

fn all_clear() -> FeatureVector {
    preset_vector(TtcRisk::Low, ThwRisk::Safe)
}

/// Starts a server thread on an ephemeral port; returns the endpoint and a
/// handle yielding stats and everything written to the actuation channel.
fn spawn_server(max_clients: usize) -> (String, thread::JoinHandle<(ServeStats, Vec<u8>)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || {
        let server = PredictionServer::new(rule_table());
        let mut act = Vec::new();
        let stats = serve(&server, &listener, &mut act, Some(max_clients)).unwrap();
        (stats, act)
    });
    (addr, handle)
}

fn connect(addr: &str) -> PerceptionClient {
    PerceptionClient::connect(addr, RetryPolicy::default()).unwrap()
}

#[test]
fn feature_line_shape() {
    let m = Message::Feature(FeatureMessage {
        seq: 7,
        timestamp_ms: 1200,
        features: all_clear(),
    });
    let line = m.encode();
    assert_eq!(line.split(',').count(), 15);
    assert!(line.starts_with("FEAT,7,1200,movingStraight,"));
    assert_eq!(Message::decode(&line).unwrap(), m);

    let fourteen = line.rsplit_once(',').unwrap().0;
    assert!(Message::decode(fourteen).is_err());
}

#[test]
fn prediction_line_shape() {
    let m = Message::Prediction(PredictionMessage {
        seq: 7,
        intention: Intention::Llc,
        probabilities: [0.8, 0.15, 0.05],
    });
    assert_eq!(m.encode(), "PRED,7,LLC,0.800000,0.150000,0.050000");
    assert!(Message::decode("PRED,7,XX,0.800000,0.150000,0.050000").is_err());
    assert!(Message::decode("PRED,7,LLC,0.800000,0.150000,0.050001").is_err());
    assert_eq!(Message::Actuation(ActuationCommand::Brake).encode(), "ACT,BRAKE");
    assert_eq!(
        Message::decode("ACT,CRUISE").unwrap(),
        Message::Actuation(ActuationCommand::Cruise)
    );
    assert_eq!(Message::decode("PING").unwrap(), Message::Ping);
    assert!(Message::decode("PING,").is_err());
}

#[test]
fn actuation_mapping() {
    assert_eq!(
        ActuationCommand::from_intention(Intention::Llc),
        ActuationCommand::Brake
    );
    assert_eq!(
        ActuationCommand::from_intention(Intention::Lk),
        ActuationCommand::Cruise
    );
    assert_eq!(
        ActuationCommand::from_intention(Intention::Rlc),
        ActuationCommand::Cruise
    );
}

fn arb_vector() -> impl Strategy<Value = FeatureVector> {
    (0..FeatureVector::SPACE_SIZE).prop_map(FeatureVector::from_rank)
}

fn arb_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (any::<u64>(), any::<u64>(), arb_vector()).prop_map(|(seq, timestamp_ms, features)| Message::Feature(
            FeatureMessage {
                seq,
                timestamp_ms,
                features
            }
        )),
        (any::<u64>(), 0..3usize, prop::array::uniform3(0.0..1.0f64)).prop_map(|(seq, h, p)| {
            let total: f64 = p.iter().sum::<f64>().max(1e-9);
            Message::Prediction(PredictionMessage {
                seq,
                intention: Intention::ALL[h],
                probabilities: p.map(|x| x / total),
            })
        }),
        (prop::option::of(any::<u64>()), "[ -+--~]{1,40}").prop_map(|(seq, reason)| Message::Error { seq, reason }),
        Just(Message::Ping),
        Just(Message::Pong),
        prop_oneof![Just(ActuationCommand::Brake), Just(ActuationCommand::Cruise)].prop_map(Message::Actuation),
    ]
}

fn fuzz_line() -> impl Strategy<Value = Vec<u8>> {
    let valid = Message::Feature(FeatureMessage {
        seq: 5,
        timestamp_ms: 100,
        features: preset_vector(TtcRisk::High, ThwRisk::Risky),
    })
    .encode()
    .into_bytes();
    prop_oneof![
        prop::collection::vec(any::<u8>(), 0..200),
        prop::collection::vec(prop::sample::select(b"FEATPREDLKC,0123456789.?\n-".to_vec()), 0..80),
        prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..4).prop_map(move |edits| {
            let mut v = valid.clone();
            for (i, b) in edits {
                let i = i.index(v.len());
                v[i] = b;
            }
            v
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn messages_round_trip(m in arb_message()) {
        let line = m.encode();
        let back = Message::decode(&line).unwrap();
        match (&m, &back) {
            (Message::Prediction(a), Message::Prediction(b)) => {
                prop_assert_eq!(a.seq, b.seq);
                prop_assert_eq!(a.intention, b.intention);
                let sum: f64 = b.probabilities.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                for (x, y) in a.probabilities.iter().zip(b.probabilities) {
                    prop_assert!((x - y).abs() <= 1e-6, "{} vs {}", x, y);
                }
            }
            _ => prop_assert_eq!(&back, &m),
        }
        prop_assert_eq!(back.encode(), line);
    }

    #[test]
    fn accepted_lines_are_canonical(bytes in fuzz_line()) {
        if let Ok(s) = std::str::from_utf8(&bytes) {
            if let Ok(m) = Message::decode(s) {
                prop_assert_eq!(m.encode(), s);
            }
        }
    }

    #[test]
    fn server_answers_every_line(bytes in fuzz_line()) {
        let server = PredictionServer::new(rule_table());
        let mut session = Session::default();
        let h = server.handle_line(&mut session, &bytes);
        match &h.reply {
            Message::Error { .. } => prop_assert!(h.actuation.is_none()),
            Message::Prediction(p) => {
                let line = std::str::from_utf8(&bytes).unwrap().trim_end_matches('\n');
                let Message::Feature(f) = Message::decode(line).unwrap() else { panic!() };
                prop_assert_eq!(p.seq, f.seq);
                prop_assert_eq!(p.intention, server.table().lookup(&f.features).unwrap().intention);
                prop_assert_eq!(h.actuation, Some(ActuationCommand::from_intention(p.intention)));
            }
            Message::Pong => prop_assert_eq!(bytes.strip_suffix(b"\n").unwrap_or(&bytes), b"PING"),
            other => prop_assert!(false, "unexpected reply {:?}", other),
        }
        // The reply itself is always a valid line.
        prop_assert!(Message::decode(&h.reply.encode()).is_ok());
    }
}

#[test]
fn server_predicts_and_actuates() {
    let (addr, handle) = spawn_server(1);
    let mut c = connect(&addr);
    let (p, _) = c.request(0, preset_vector(TtcRisk::High, ThwRisk::Safe)).unwrap();
    assert_eq!(p.intention, Intention::Llc);
    let (p, _) = c.request(66, all_clear()).unwrap();
    assert_eq!(p.intention, Intention::Lk);
    c.ping().unwrap();
    drop(c);
    let (stats, act) = handle.join().unwrap();
    assert_eq!(String::from_utf8(act).unwrap(), "ACT,BRAKE\nACT,CRUISE\n");
    assert_eq!(stats.predictions, 2);
}

#[test]
fn malformed_lines_get_errors_and_the_connection_survives() {
    let (addr, handle) = spawn_server(1);
    let mut s = TcpStream::connect(&addr).unwrap();
    let mut r = BufReader::new(s.try_clone().unwrap());
    let valid = Message::Feature(FeatureMessage {
        seq: 3,
        timestamp_ms: 0,
        features: all_clear(),
    })
    .encode();
    let long = "x".repeat(MAX_LINE * 5);
    let out_of_scope = Message::Feature(FeatureMessage {
        seq: 4,
        timestamp_ms: 0,
        features: FeatureVector::from_rank(0),
    })
    .encode();
    let input = format!(
        "garbage\n\u{00ff}\n{long}\n{valid}\n{valid}\n{out_of_scope}\nPRED,1,LK,1.000000,0.000000,0.000000\nPING\n"
    );
    let mut bytes = input.into_bytes();
    bytes.extend_from_slice(b"\xff\xfe\n");
    s.write_all(&bytes).unwrap();
    s.shutdown(std::net::Shutdown::Write).unwrap();
    let replies: Vec<String> = (&mut r).lines().map(|l| l.unwrap()).collect();
    let kinds: Vec<&str> = replies.iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        kinds,
        ["ERR", "ERR", "ERR", "PRED", "ERR", "ERR", "ERR", "PONG", "ERR"],
        "{replies:?}"
    );
    assert!(replies[2].contains("too long"));
    assert!(replies[3].starts_with("PRED,3,LK,"));
    assert!(replies[4].starts_with("ERR,3,"), "repeated seq is rejected");
    assert!(replies[5].starts_with("ERR,4,"));
    let (stats, act) = handle.join().unwrap();
    assert_eq!(stats.errors, 7);
    assert_eq!(act, b"ACT,CRUISE\n");
}

#[test]
fn server_accepts_next_client_after_disconnect() {
    let (addr, handle) = spawn_server(2);
    {
        let mut s = TcpStream::connect(&addr).unwrap();
        s.write_all(b"PING\n").unwrap();
    }
    let mut c = connect(&addr);
    assert_eq!(c.request(1, all_clear()).unwrap().0.intention, Intention::Lk);
    drop(c);
    assert_eq!(handle.join().unwrap().0.clients, 2);
}

#[test]
fn ten_thousand_messages_stay_paired() {
    let (addr, handle) = spawn_server(1);
    let mut c = connect(&addr);
    let vectors: Vec<FeatureVector> = (0..9)
        .map(|i| Scope::Scenario(ScenarioPreset::default()).vector(i))
        .collect();
    let table = rule_table();
    for i in 0..10_000u64 {
        let v = vectors[(i * 7 % 9) as usize];
        let (p, _) = c.request(i, v).unwrap();
        assert_eq!(p.seq, i + 1);
        assert_eq!(p.intention, table.lookup(&v).unwrap().intention);
    }
    drop(c);
    let (stats, act) = handle.join().unwrap();
    assert_eq!(stats.predictions, 10_000);
    assert_eq!(act.iter().filter(|&&b| b == b'\n').count(), 10_000);
}

#[test]
fn client_detects_seq_mismatch() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let fake = thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        let mut r = BufReader::new(s.try_clone().unwrap());
        let mut line = String::new();
        r.read_line(&mut line).unwrap();
        let mut w = s;
        w.write_all(b"PRED,99,LK,0.000000,1.000000,0.000000\n").unwrap();
    });
    let mut c = connect(&addr);
    match c.request(0, all_clear()) {
        Err(LinkError::SeqMismatch { expected: 1, got: 99 }) => {}
        other => panic!("unexpected {other:?}"),
    }
    fake.join().unwrap();
}

#[test]
fn client_gives_up_after_three_retries() {
    let addr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let retry = RetryPolicy {
        retries: 3,
        delay: Duration::from_millis(5),
    };
    match PerceptionClient::connect(&addr, retry) {
        Err(LinkError::Connect { attempts: 4, .. }) => {}
        Err(other) => panic!("unexpected {other:?}"),
        Ok(_) => panic!("connected to a closed port"),
    }
}

#[test]
fn perception_session_matches_local_lookup() {
    let (addr, handle) = spawn_server(1);
    let mut c = connect(&addr);
    let preset = ScenarioPreset::default();
    let snapshots: Vec<KinematicSnapshot> = (0..60)
        .map(|i| {
            let t = i as f64 / 15.0;
            KinematicSnapshot::new(40.0 - 0.6 * i as f64, 10.0, 10.0 - 0.1 * i as f64, t).unwrap()
        })
        .collect();
    let ticks = run_perception_client(&mut c, &snapshots, &preset, None).unwrap();
    assert_eq!(ticks.len(), 60);
    let table = rule_table();
    let mut seen = std::collections::BTreeSet::new();
    for (tick, snap) in ticks.iter().zip(&snapshots) {
        assert_eq!(tick.features, perceive(snap, &preset).unwrap());
        assert_eq!(
            tick.prediction.intention,
            table.lookup(&tick.features).unwrap().intention
        );
        seen.insert(tick.prediction.intention);
    }
    assert!(seen.contains(&Intention::Llc) && seen.contains(&Intention::Lk));
    drop(c);
    handle.join().unwrap();
}

#[test]
fn actuation_file_sink() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("act.log");
    {
        let mut w = open_actuation(path.to_str().unwrap()).unwrap();
        writeln!(w, "{}", Message::Actuation(ActuationCommand::Brake).encode()).unwrap();
    }
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "ACT,BRAKE\n");
}

#[test]
fn rounding_preserves_sum() {
    for p in [
        [0.1, 0.2, 0.7],
        [0.3333333, 0.3333333, 0.3333334],
        [1e-9, 0.5, 0.5 - 1e-9],
    ] {
        assert_eq!(micro_units(p).iter().sum::<u32>(), 1_000_000);
    }
}

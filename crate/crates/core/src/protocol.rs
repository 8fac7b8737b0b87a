//! Line protocol between perception, prediction and actuation.
//!
//! ```text
//! FEAT,<seq>,<ts_ms>,<12 labels>      perception -> prediction
//! PRED,<seq>,<LLC|LK|RLC>,<p>,<p>,<p> prediction -> perception
//! ERR,<seq|?>,<reason>                prediction -> perception
//! PING / PONG                         liveness
//! ACT,<BRAKE|CRUISE>                  prediction -> actuation channel
//! ```
//!
//! Decoding accepts only the canonical encoding, so every accepted line
//! re-encodes to the same bytes.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::features::{
    assemble_features, compute_thw, compute_ttc, thw_to_category, ttc_to_category, FeatureError, FeatureVector,
    Intention, KinematicSnapshot, ScenarioPreset, SLOT_COUNT,
};
use crate::table::PredictionTable;

/// Longest accepted line, excluding the terminator.
pub const MAX_LINE: usize = 1024;
const MICRO: u32 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason}")]
pub struct FrameError {
    /// Sequence number, when the line got far enough to carry one.
    pub seq: Option<u64>,
    pub reason: String,
}

impl FrameError {
    fn new(seq: Option<u64>, reason: impl Into<String>) -> Self {
        Self {
            seq,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMessage {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionMessage {
    pub seq: u64,
    pub intention: Intention,
    pub probabilities: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActuationCommand {
    Brake,
    Cruise,
}

impl ActuationCommand {
    /// Only a left change cuts into the ego lane.
    pub fn from_intention(h: Intention) -> Self {
        match h {
            Intention::Llc => ActuationCommand::Brake,
            Intention::Lk | Intention::Rlc => ActuationCommand::Cruise,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActuationCommand::Brake => "BRAKE",
            ActuationCommand::Cruise => "CRUISE",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Feature(FeatureMessage),
    Prediction(PredictionMessage),
    Error { seq: Option<u64>, reason: String },
    Ping,
    Pong,
    Actuation(ActuationCommand),
}

/// Rounds a distribution to millionths that sum to exactly one (largest remainder).
pub fn micro_units(p: [f64; 3]) -> [u32; 3] {
    let clean = p.map(|x| if x.is_finite() { x.max(0.0) } else { 0.0 });
    let total: f64 = clean.iter().sum();
    let norm = if total > 0.0 {
        clean.map(|x| x / total)
    } else {
        [1.0 / 3.0; 3]
    };
    let scaled = norm.map(|x| x * MICRO as f64);
    let mut units = scaled.map(|x| (x.floor() as u32).min(MICRO));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = MICRO.saturating_sub(units.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        units[i] += 1;
        left -= 1;
    }
    units
}

fn format_micro(u: u32) -> String {
    format!("{}.{:06}", u / MICRO, u % MICRO)
}

fn sanitize_reason(reason: &str) -> String {
    let s: String = reason
        .chars()
        .map(|c| match c {
            ',' => ';',
            ' '..='~' => c,
            _ => '?',
        })
        .collect();
    if s.is_empty() {
        "error".into()
    } else {
        s
    }
}

impl Message {
    /// Canonical line, without the terminating LF.
    pub fn encode(&self) -> String {
        match self {
            Message::Feature(m) => format!("FEAT,{},{},{}", m.seq, m.timestamp_ms, m.features.to_tokens()),
            Message::Prediction(m) => {
                let [a, b, c] = micro_units(m.probabilities).map(format_micro);
                format!("PRED,{},{},{a},{b},{c}", m.seq, m.intention)
            }
            Message::Error { seq, reason } => {
                let seq = seq.map_or_else(|| "?".to_string(), |s| s.to_string());
                format!("ERR,{seq},{}", sanitize_reason(reason))
            }
            Message::Ping => "PING".into(),
            Message::Pong => "PONG".into(),
            Message::Actuation(c) => format!("ACT,{}", c.as_str()),
        }
    }

    pub fn decode(line: &str) -> Result<Self, FrameError> {
        if line.len() > MAX_LINE {
            return Err(FrameError::new(None, "line too long"));
        }
        if !line.bytes().all(|b| (b' '..=b'~').contains(&b)) {
            return Err(FrameError::new(None, "non-printable byte"));
        }
        let fields: Vec<&str> = line.split(',').collect();
        let arity = |n: usize, seq: Option<u64>| {
            if fields.len() == n {
                Ok(())
            } else {
                Err(FrameError::new(
                    seq,
                    format!("{} expects {n} fields; found {}", fields[0], fields.len()),
                ))
            }
        };
        match fields[0] {
            "FEAT" => {
                let seq = fields.get(1).and_then(|s| parse_u64(s));
                arity(3 + SLOT_COUNT, seq)?;
                let seq = seq.ok_or_else(|| FrameError::new(None, "invalid seq"))?;
                let timestamp_ms =
                    parse_u64(fields[2]).ok_or_else(|| FrameError::new(Some(seq), "invalid timestamp"))?;
                let features = FeatureVector::from_labels(&fields[3..])
                    .map_err(|e: FeatureError| FrameError::new(Some(seq), e.to_string()))?;
                Ok(Message::Feature(FeatureMessage {
                    seq,
                    timestamp_ms,
                    features,
                }))
            }
            "PRED" => {
                let seq = fields.get(1).and_then(|s| parse_u64(s));
                arity(6, seq)?;
                let seq = seq.ok_or_else(|| FrameError::new(None, "invalid seq"))?;
                let intention: Intention = fields[2].parse().map_err(|e: String| FrameError::new(Some(seq), e))?;
                let mut units = [0u32; 3];
                for (u, s) in units.iter_mut().zip(&fields[3..]) {
                    *u = parse_micro(s)
                        .ok_or_else(|| FrameError::new(Some(seq), format!("invalid probability `{s}`")))?;
                }
                if units.iter().sum::<u32>() != MICRO {
                    return Err(FrameError::new(Some(seq), "probabilities do not sum to one"));
                }
                Ok(Message::Prediction(PredictionMessage {
                    seq,
                    intention,
                    probabilities: units.map(|u| u as f64 / MICRO as f64),
                }))
            }
            "ERR" => {
                arity(3, None)?;
                let seq = match fields[1] {
                    "?" => None,
                    s => Some(parse_u64(s).ok_or_else(|| FrameError::new(None, "invalid seq"))?),
                };
                if fields[2].is_empty() {
                    return Err(FrameError::new(seq, "empty reason"));
                }
                Ok(Message::Error {
                    seq,
                    reason: fields[2].to_string(),
                })
            }
            "PING" => arity(1, None).map(|_| Message::Ping),
            "PONG" => arity(1, None).map(|_| Message::Pong),
            "ACT" => {
                arity(2, None)?;
                match fields[1] {
                    "BRAKE" => Ok(Message::Actuation(ActuationCommand::Brake)),
                    "CRUISE" => Ok(Message::Actuation(ActuationCommand::Cruise)),
                    other => Err(FrameError::new(None, format!("unknown command `{other}`"))),
                }
            }
            "" => Err(FrameError::new(None, "empty line")),
            _ => Err(FrameError::new(None, "unknown message type")),
        }
    }
}

/// Canonical unsigned decimal: no sign, no leading zeros.
fn parse_u64(s: &str) -> Option<u64> {
    let canonical = !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'));
    if canonical {
        s.parse().ok()
    } else {
        None
    }
}

/// `d.dddddd` in `[0, 1]`, as millionths.
fn parse_micro(s: &str) -> Option<u32> {
    let b = s.as_bytes();
    if b.len() != 8 || b[1] != b'.' || !b[0].is_ascii_digit() || !b[2..].iter().all(u8::is_ascii_digit) {
        return None;
    }
    let whole = (b[0] - b'0') as u32;
    let frac: u32 = s[2..].parse().ok()?;
    let v = whole * MICRO + frac;
    (v <= MICRO).then_some(v)
}

/// Per-connection state: the last accepted FEAT sequence number.
#[derive(Debug, Default, Clone)]
pub struct Session {
    last_seq: Option<u64>,
}

/// Result of handling one inbound line.
#[derive(Debug, Clone, PartialEq)]
pub struct Handled {
    pub reply: Message,
    pub actuation: Option<ActuationCommand>,
}

pub struct PredictionServer {
    table: PredictionTable,
}

impl PredictionServer {
    pub fn new(table: PredictionTable) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &PredictionTable {
        &self.table
    }

    /// Handles one raw line (terminator optional). Never panics on any input.
    pub fn handle_line(&self, session: &mut Session, raw: &[u8]) -> Handled {
        let raw = raw.strip_suffix(b"\n").unwrap_or(raw);
        let error = |seq, reason: String| Handled {
            reply: Message::Error { seq, reason },
            actuation: None,
        };
        let Ok(line) = std::str::from_utf8(raw) else {
            return error(None, "invalid utf-8".into());
        };
        let msg = match Message::decode(line) {
            Ok(m) => m,
            Err(e) => return error(e.seq, e.reason),
        };
        match msg {
            Message::Ping => Handled {
                reply: Message::Pong,
                actuation: None,
            },
            Message::Feature(f) => {
                if session.last_seq.is_some_and(|last| f.seq <= last) {
                    return error(Some(f.seq), "non-increasing seq".into());
                }
                session.last_seq = Some(f.seq);
                match self.table.lookup(&f.features) {
                    Ok(row) => Handled {
                        reply: Message::Prediction(PredictionMessage {
                            seq: f.seq,
                            intention: row.intention,
                            probabilities: row.probabilities,
                        }),
                        actuation: Some(ActuationCommand::from_intention(row.intention)),
                    },
                    Err(_) => error(Some(f.seq), "no table entry".into()),
                }
            }
            _ => error(None, "unexpected message type".into()),
        }
    }
}

enum Frame {
    Line,
    TooLong,
    Eof,
}

/// Reads one LF-terminated frame into `buf`, discarding the rest of overlong lines.
fn read_frame<R: BufRead>(r: &mut R, buf: &mut Vec<u8>) -> io::Result<Frame> {
    buf.clear();
    let n = io::Read::take(&mut *r, MAX_LINE as u64 + 2).read_until(b'\n', buf)?;
    if n == 0 {
        return Ok(Frame::Eof);
    }
    if buf.last() == Some(&b'\n') || buf.len() <= MAX_LINE + 1 {
        return Ok(Frame::Line);
    }
    let mut sink = Vec::new();
    loop {
        sink.clear();
        let n = io::Read::take(&mut *r, 64 * 1024).read_until(b'\n', &mut sink)?;
        if n == 0 || sink.last() == Some(&b'\n') {
            return Ok(Frame::TooLong);
        }
    }
}

fn write_line<W: Write + ?Sized>(w: &mut W, m: &Message) -> io::Result<()> {
    let mut s = m.encode();
    s.push('\n');
    w.write_all(s.as_bytes())?;
    w.flush()
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ServeStats {
    pub clients: usize,
    pub lines: usize,
    pub predictions: usize,
    pub errors: usize,
}

/// Serves one connection to completion.
pub fn serve_connection<W: Write + ?Sized>(
    server: &PredictionServer,
    stream: TcpStream,
    actuation: &mut W,
    stats: &mut ServeStats,
) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut session = Session::default();
    let mut buf = Vec::with_capacity(MAX_LINE + 2);
    loop {
        let handled = match read_frame(&mut reader, &mut buf)? {
            Frame::Eof => return Ok(()),
            Frame::TooLong => Handled {
                reply: Message::Error {
                    seq: None,
                    reason: "line too long".into(),
                },
                actuation: None,
            },
            Frame::Line => server.handle_line(&mut session, &buf),
        };
        stats.lines += 1;
        match handled.reply {
            Message::Prediction(_) => stats.predictions += 1,
            Message::Error { .. } => stats.errors += 1,
            _ => {}
        }
        write_line(&mut writer, &handled.reply)?;
        if let Some(cmd) = handled.actuation {
            write_line(actuation, &Message::Actuation(cmd))?;
        }
    }
}

/// Accepts clients one at a time; stops after `max_clients` if given.
///
/// A connection that fails mid-stream is dropped and the loop keeps accepting.
pub fn serve<W: Write + ?Sized>(
    server: &PredictionServer,
    listener: &TcpListener,
    actuation: &mut W,
    max_clients: Option<usize>,
) -> io::Result<ServeStats> {
    let mut stats = ServeStats::default();
    while max_clients.is_none_or(|m| stats.clients < m) {
        let (stream, _) = listener.accept()?;
        stats.clients += 1;
        match serve_connection(server, stream, actuation, &mut stats) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe || e.kind() == io::ErrorKind::ConnectionReset => {}
            Err(e) => return Err(e),
        }
    }
    Ok(stats)
}

/// True for `host:port` specs; anything else names a file.
fn is_socket_spec(spec: &str) -> bool {
    match spec.rsplit_once(':') {
        Some((host, port)) => !host.is_empty() && !spec.contains('/') && port.parse::<u16>().is_ok(),
        None => false,
    }
}

/// Opens the actuation channel: `-` for stdout, `host:port` for TCP, otherwise a file.
pub fn open_actuation(spec: &str) -> io::Result<Box<dyn Write + Send>> {
    if spec == "-" {
        return Ok(Box::new(io::stdout()));
    }
    if is_socket_spec(spec) {
        let s = TcpStream::connect(spec)?;
        s.set_nodelay(true)?;
        return Ok(Box::new(s));
    }
    Ok(Box::new(File::create(spec)?))
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("could not connect to {endpoint} after {attempts} attempts: {source}")]
    Connect {
        endpoint: String,
        attempts: usize,
        source: io::Error,
    },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("framing: {0}")]
    Frame(#[from] FrameError),
    #[error("reply seq {got} does not match request seq {expected}")]
    SeqMismatch { expected: u64, got: u64 },
    #[error("server error for seq {seq:?}: {reason}")]
    Server { seq: Option<u64>, reason: String },
    #[error("unexpected reply `{0}`")]
    Unexpected(String),
    #[error("connection closed by peer")]
    Closed,
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Connection attempts: one initial try plus `retries`.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: usize,
    pub delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            delay: Duration::from_millis(200),
        }
    }
}

pub struct PerceptionClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_seq: u64,
    buf: Vec<u8>,
}

impl PerceptionClient {
    pub fn connect(endpoint: &str, retry: RetryPolicy) -> Result<Self, LinkError> {
        let attempts = retry.retries + 1;
        let mut last = None;
        for i in 0..attempts {
            if i > 0 {
                std::thread::sleep(retry.delay);
            }
            let res = endpoint.to_socket_addrs().and_then(|mut a| {
                let addr = a
                    .next()
                    .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
                TcpStream::connect(addr)
            });
            match res {
                Ok(s) => return Self::from_stream(s).map_err(LinkError::Io),
                Err(e) => last = Some(e),
            }
        }
        Err(LinkError::Connect {
            endpoint: endpoint.to_string(),
            attempts,
            source: last.expect("at least one attempt"),
        })
    }

    pub fn from_stream(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            next_seq: 1,
            buf: Vec::new(),
        })
    }

    fn read_reply(&mut self) -> Result<Message, LinkError> {
        match read_frame(&mut self.reader, &mut self.buf)? {
            Frame::Eof => Err(LinkError::Closed),
            Frame::TooLong => Err(LinkError::Unexpected("overlong line".into())),
            Frame::Line => {
                let raw = self.buf.strip_suffix(b"\n").unwrap_or(&self.buf);
                let line = std::str::from_utf8(raw).map_err(|_| LinkError::Unexpected("invalid utf-8".into()))?;
                Ok(Message::decode(line)?)
            }
        }
    }

    pub fn ping(&mut self) -> Result<Duration, LinkError> {
        let start = Instant::now();
        write_line(&mut self.writer, &Message::Ping)?;
        match self.read_reply()? {
            Message::Pong => Ok(start.elapsed()),
            other => Err(LinkError::Unexpected(other.encode())),
        }
    }

    /// Sends one FEAT and waits for its PRED.
    pub fn request(
        &mut self,
        timestamp_ms: u64,
        features: FeatureVector,
    ) -> Result<(PredictionMessage, Duration), LinkError> {
        let seq = self.next_seq;
        self.next_seq += 1;
        let start = Instant::now();
        write_line(
            &mut self.writer,
            &Message::Feature(FeatureMessage {
                seq,
                timestamp_ms,
                features,
            }),
        )?;
        let reply = self.read_reply()?;
        let latency = start.elapsed();
        match reply {
            Message::Prediction(p) if p.seq == seq => Ok((p, latency)),
            Message::Prediction(p) => Err(LinkError::SeqMismatch {
                expected: seq,
                got: p.seq,
            }),
            Message::Error { seq, reason } => Err(LinkError::Server { seq, reason }),
            other => Err(LinkError::Unexpected(other.encode())),
        }
    }
}

/// One perception tick as seen by the client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientTick {
    pub features: FeatureVector,
    pub prediction: PredictionMessage,
    pub latency: Duration,
}

/// Discretizes a snapshot into the preset's feature vector.
pub fn perceive(snapshot: &KinematicSnapshot, preset: &ScenarioPreset) -> Result<FeatureVector, FeatureError> {
    let ttc = ttc_to_category(compute_ttc(snapshot))?;
    let thw = thw_to_category(compute_thw(snapshot))?;
    Ok(assemble_features(ttc, thw, preset))
}

/// Runs the perception loop over `snapshots`, paced at `rate_hz` when given.
pub fn run_perception_client(
    client: &mut PerceptionClient,
    snapshots: &[KinematicSnapshot],
    preset: &ScenarioPreset,
    rate_hz: Option<f64>,
) -> Result<Vec<ClientTick>, LinkError> {
    let period = rate_hz.filter(|r| *r > 0.0).map(|r| Duration::from_secs_f64(1.0 / r));
    let start = Instant::now();
    let mut out = Vec::with_capacity(snapshots.len());
    for (i, snap) in snapshots.iter().enumerate() {
        if let Some(p) = period {
            let due = start + p * i as u32;
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        let features = perceive(snap, preset)?;
        let ts = (snap.timestamp * 1000.0).round().max(0.0) as u64;
        let (prediction, latency) = client.request(ts, features)?;
        out.push(ClientTick {
            features,
            prediction,
            latency,
        });
    }
    Ok(out)
}

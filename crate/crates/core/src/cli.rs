//! Command-line pipeline: gen, train, compile, serve, simulate, report.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::corpus::{generate_synthetic_corpus, instances_to_triples, load_corpus, save_corpus, CorpusError};
use crate::exec::Execution;
use crate::graph::{load_triples_csv, GraphError, KnowledgeGraph};
use crate::kge::{rank_eval, split_holdout, train, EmbeddingModel, KgeError, RankMetrics, TrainConfig};
use crate::protocol::{open_actuation, serve, LinkError, PerceptionClient, PredictionServer, RetryPolicy};
use crate::sim::{
    parse_key_values, run_scenario, InProcessLink, PredictionLink, RunOptions, ScenarioConfig, ScenarioMetrics,
    ScenarioTrace, SimError, TcpLink,
};
use crate::table::{compile, PredictionTable, Scope, TableError};

#[derive(Debug, Parser)]
#[command(name = "lanekg", version, about = "Lane-change intention prediction pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic labeled corpus.
    Gen(GenArgs),
    /// Train an embedding model on a corpus or triples file.
    Train(TrainArgs),
    /// Compile a prediction table from a model.
    Compile(CompileArgs),
    /// Serve table lookups over TCP.
    Serve(ServeArgs),
    /// Run the three-vehicle scenario.
    Simulate(SimulateArgs),
    /// Compare metrics recomputed from scenario traces.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus CSV produced by `gen`.
    #[arg(long, conflicts_with = "triples", required_unless_present = "triples")]
    pub corpus: Option<PathBuf>,
    /// Triples CSV (subject,predicate,object).
    #[arg(long)]
    pub triples: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().dimension)]
    pub dim: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().negatives_per_positive)]
    pub negatives: usize,
    #[arg(long, default_value_t = TrainConfig::default().margin)]
    pub margin: f64,
    #[arg(long, default_value_t = TrainConfig::default().relation_l2)]
    pub relation_l2: f64,
    /// Fraction of triples held out for ranking evaluation; 0 skips it.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `full`, `scenario`, or `scenario:<pattern>`.
    #[arg(long, default_value = "scenario")]
    pub scope: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub endpoint: String,
    /// `-` for stdout, `host:port`, or a file path.
    #[arg(long, default_value = "-")]
    pub actuation: String,
    /// Exit after this many clients.
    #[arg(long)]
    pub max_clients: Option<usize>,
    /// Warn when the table was compiled from a different model.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkMode {
    /// Call the server's line handler in this process.
    Inproc,
    /// Connect to a running `serve` at `--endpoint`.
    Tcp,
    /// Start a `serve` child process and talk to it over sockets.
    Spawn,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario config file of `key=value` lines; defaults apply otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "on")]
    pub prediction: OnOff,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "inproc")]
    pub link: LinkMode,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub endpoint: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pace ticks at wall-clock rate.
    #[arg(long)]
    pub realtime: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Contract(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Contract(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Contract(m) => m,
        }
    }
}

fn ctx(path: &Path) -> impl Fn(String) -> String + '_ {
    move |m| format!("{}: {m}", path.display())
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Io(ctx(path)(e.to_string()))
}

macro_rules! classify {
    ($name:ident, $ty:ty, $($io:pat),+) => {
        fn $name(path: &Path, e: $ty) -> CliError {
            match e {
                $($io)|+ => CliError::Io(ctx(path)(e.to_string())),
                _ => CliError::Contract(ctx(path)(e.to_string())),
            }
        }
    };
}

classify!(corpus_err, CorpusError, CorpusError::Io(_));
classify!(graph_err, GraphError, GraphError::Io(_));
classify!(kge_err, KgeError, KgeError::Io(_));
classify!(table_err, TableError, TableError::Io(_));
classify!(
    sim_err,
    SimError,
    SimError::Io(_),
    SimError::Link(LinkError::Io(_) | LinkError::Connect { .. } | LinkError::Closed)
);

/// Provenance record written next to every artifact.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub model_checksum: Option<String>,
    pub timings: Vec<(String, Duration)>,
}

impl RunManifest {
    fn new(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.into(),
            ..Default::default()
        }
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.into(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "subcommand={}\nversion={}\n",
            self.subcommand,
            env!("CARGO_PKG_VERSION")
        );
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for (i, p) in self.inputs.iter().enumerate() {
            let _ = writeln!(s, "input.{i}={}", p.display());
        }
        for (i, p) in self.outputs.iter().enumerate() {
            let _ = writeln!(s, "output.{i}={}", p.display());
        }
        if let Some(c) = &self.model_checksum {
            let _ = writeln!(s, "model_checksum={c}");
        }
        for (k, d) in &self.timings {
            let _ = writeln!(s, "time.{k}_ms={:.3}", d.as_secs_f64() * 1e3);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_text()).map_err(|e| io_err(path, e))
    }
}

/// `<artifact>.manifest` next to a file artifact.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let start = Instant::now();
    let records = generate_synthetic_corpus(a.n, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    save_corpus(&records, &a.out).map_err(|e| corpus_err(&a.out, e))?;
    let mut m = RunManifest::new("gen");
    m.set("n", a.n);
    m.set("seed", a.seed);
    m.outputs.push(a.out.clone());
    m.timings.push(("total".into(), start.elapsed()));
    m.write(&manifest_path(&a.out))?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn load_graph(a: &TrainArgs) -> Result<(KnowledgeGraph, PathBuf), CliError> {
    match (&a.corpus, &a.triples) {
        (Some(p), None) => Ok((
            instances_to_triples(&load_corpus(p).map_err(|e| corpus_err(p, e))?),
            p.clone(),
        )),
        (None, Some(p)) => Ok((load_triples_csv(p).map_err(|e| graph_err(p, e))?, p.clone())),
        _ => Err(CliError::Usage("give exactly one of --corpus or --triples".into())),
    }
}

fn metrics_line(label: &str, m: &RankMetrics) -> String {
    format!(
        "{label:<9} mrr={:.4} hits@1={:.4} hits@3={:.4}",
        m.mrr, m.hits_at_1, m.hits_at_3
    )
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = TrainConfig {
        dimension: a.dim,
        epochs: a.epochs,
        learning_rate: a.lr,
        negatives_per_positive: a.negatives,
        margin: a.margin,
        relation_l2: a.relation_l2,
        rng_seed: a.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !(0.0..1.0).contains(&a.holdout) {
        return Err(CliError::Usage("--holdout must be in [0, 1)".into()));
    }
    let (graph, input) = load_graph(a)?;
    let mut manifest = RunManifest::new("train");
    let train_err = |e| kge_err(&input, e);

    if a.holdout > 0.0 {
        let eval_start = Instant::now();
        let (train_graph, held) = split_holdout(&graph, a.holdout, a.seed);
        if held.is_empty() {
            println!("holdout: graph too small to hold out triples, skipping evaluation");
        } else {
            let trained = train(&train_graph, &cfg).map_err(train_err)?;
            let untrained = EmbeddingModel::initialize(&train_graph, &cfg).map_err(train_err)?;
            let t = rank_eval(&trained, &held, &graph, exec(a.sequential)).map_err(train_err)?;
            let u = rank_eval(&untrained, &held, &graph, exec(a.sequential)).map_err(train_err)?;
            println!("holdout triples={} queries={}", held.len(), t.queries);
            println!("{}", metrics_line("trained", &t));
            println!("{}", metrics_line("untrained", &u));
            manifest.set("eval.mrr", t.mrr);
            manifest.set("eval.baseline_mrr", u.mrr);
        }
        manifest.timings.push(("evaluation".into(), eval_start.elapsed()));
    }

    let fit_start = Instant::now();
    let model = train(&graph, &cfg).map_err(train_err)?;
    manifest.timings.push(("training".into(), fit_start.elapsed()));
    model.save(&a.out).map_err(|e| kge_err(&a.out, e))?;
    let checksum = model.checksum();
    for (k, v) in [
        ("seed", a.seed.to_string()),
        ("dim", a.dim.to_string()),
        ("epochs", a.epochs.to_string()),
        ("lr", a.lr.to_string()),
        ("negatives", a.negatives.to_string()),
        ("margin", a.margin.to_string()),
        ("relation_l2", a.relation_l2.to_string()),
        ("holdout", a.holdout.to_string()),
        ("triples", graph.len().to_string()),
    ] {
        manifest.set(k, v);
    }
    manifest.inputs.push(input);
    manifest.outputs.push(a.out.clone());
    manifest.model_checksum = Some(checksum.clone());
    manifest.timings.push(("total".into(), start.elapsed()));
    manifest.write(&manifest_path(&a.out))?;
    println!("model {} checksum={checksum}", a.out.display());
    Ok(())
}

pub fn cmd_compile(a: &CompileArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let scope = Scope::parse(&a.scope).map_err(CliError::Usage)?;
    let model = EmbeddingModel::load(&a.model).map_err(|e| kge_err(&a.model, e))?;
    let table = compile(&model, scope, exec(a.sequential)).map_err(|e| table_err(&a.model, e))?;
    let compiled = start.elapsed();
    table.save_csv(&a.out).map_err(|e| table_err(&a.out, e))?;
    let mut m = RunManifest::new("compile");
    m.set("scope", table.scope());
    m.set("rows", table.len());
    m.set("execution", format!("{:?}", exec(a.sequential)).to_lowercase());
    m.inputs.push(a.model.clone());
    m.outputs.push(a.out.clone());
    m.model_checksum = Some(model.checksum());
    m.timings.push(("compile".into(), compiled));
    m.timings.push(("total".into(), start.elapsed()));
    m.write(&manifest_path(&a.out))?;
    println!("table {} rows={} scope={}", a.out.display(), table.len(), table.scope());
    Ok(())
}

/// Loads a table and warns if `model` has a different checksum.
fn load_table(path: &Path, model: Option<&Path>) -> Result<PredictionTable, CliError> {
    let table = PredictionTable::load_csv(path).map_err(|e| table_err(path, e))?;
    if let Some(mp) = model {
        let m = EmbeddingModel::load(mp).map_err(|e| kge_err(mp, e))?;
        if m.checksum() != table.model_id() {
            eprintln!(
                "warning: table {} was compiled from model {} but {} has checksum {}",
                path.display(),
                table.model_id(),
                mp.display(),
                m.checksum()
            );
        }
    }
    Ok(table)
}

pub fn cmd_serve(a: &ServeArgs) -> Result<(), CliError> {
    let table = load_table(&a.table, a.model.as_deref())?;
    let server = PredictionServer::new(table);
    let mut actuation =
        open_actuation(&a.actuation).map_err(|e| CliError::Io(format!("actuation {}: {e}", a.actuation)))?;
    let listener = TcpListener::bind(&a.endpoint).map_err(|e| CliError::Io(format!("bind {}: {e}", a.endpoint)))?;
    let addr = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
    eprintln!("listening {addr}");
    let stats = serve(&server, &listener, &mut actuation, a.max_clients).map_err(|e| CliError::Io(e.to_string()))?;
    eprintln!(
        "served clients={} lines={} predictions={} errors={}",
        stats.clients, stats.lines, stats.predictions, stats.errors
    );
    Ok(())
}

/// A `serve` child process bound to an ephemeral port.
struct SpawnedServer {
    child: std::process::Child,
    endpoint: String,
    actuation: std::net::TcpStream,
}

fn spawn_server(table: &Path) -> Result<SpawnedServer, CliError> {
    let io = |what: &str, e: io::Error| CliError::Io(format!("{what}: {e}"));
    let act_listener = TcpListener::bind("127.0.0.1:0").map_err(|e| io("actuation listener", e))?;
    let act_addr = act_listener.local_addr().map_err(|e| io("actuation listener", e))?;
    let exe = std::env::current_exe().map_err(|e| io("current executable", e))?;
    let mut child = Command::new(exe)
        .args([
            "serve",
            "--endpoint",
            "127.0.0.1:0",
            "--max-clients",
            "1",
            "--actuation",
        ])
        .arg(act_addr.to_string())
        .arg("--table")
        .arg(table)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| io("spawn server", e))?;
    let mut stderr = BufReader::new(child.stderr.take().expect("piped stderr"));
    let mut endpoint = None;
    let mut line = String::new();
    while stderr.read_line(&mut line).map_err(|e| io("server stderr", e))? > 0 {
        if let Some(addr) = line.trim().strip_prefix("listening ") {
            endpoint = Some(addr.to_string());
            break;
        }
        eprint!("server: {line}");
        line.clear();
    }
    let Some(endpoint) = endpoint else {
        let status = child.wait().map_err(|e| io("server", e))?;
        return Err(CliError::Io(format!("server exited before listening ({status})")));
    };
    std::thread::spawn(move || {
        for l in stderr.lines().map_while(Result::ok) {
            eprintln!("server: {l}");
        }
    });
    let (actuation, _) = act_listener.accept().map_err(|e| io("actuation accept", e))?;
    Ok(SpawnedServer {
        child,
        endpoint,
        actuation,
    })
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cfg = match &a.config {
        Some(p) => ScenarioConfig::load(p).map_err(|e| sim_err(p, e))?,
        None => ScenarioConfig::default(),
    };
    cfg.prediction_enabled = a.prediction == OnOff::On;
    if let Some(seed) = a.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if cfg.prediction_enabled && a.table.is_none() && a.link != LinkMode::Tcp {
        return Err(CliError::Usage("--prediction on needs --table (or --link tcp)".into()));
    }
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;

    let table = match &a.table {
        Some(p) if a.link == LinkMode::Inproc => Some(load_table(p, None)?),
        _ => None,
    };
    let model_checksum = table.as_ref().map(|t| t.model_id().to_string());
    let retry = RetryPolicy::default();
    let mut spawned = None;
    let mut link: Option<Box<dyn PredictionLink>> = match a.link {
        LinkMode::Inproc => {
            table.map(|t| Box::new(InProcessLink::new(PredictionServer::new(t))) as Box<dyn PredictionLink>)
        }
        LinkMode::Tcp => {
            let client = PerceptionClient::connect(&a.endpoint, retry).map_err(|e| CliError::Io(e.to_string()))?;
            Some(Box::new(TcpLink::new(client, None)))
        }
        LinkMode::Spawn => match &a.table {
            Some(p) => {
                let s = spawn_server(p)?;
                let client = PerceptionClient::connect(&s.endpoint, retry).map_err(|e| CliError::Io(e.to_string()))?;
                let act = s.actuation.try_clone().map_err(|e| CliError::Io(e.to_string()))?;
                spawned = Some(s);
                Some(Box::new(TcpLink::new(client, Some(act))))
            }
            None => None,
        },
    };

    let run = run_scenario(&cfg, link.as_deref_mut(), RunOptions { realtime: a.realtime });
    drop(link);
    if let Some(mut s) = spawned {
        drop(s.actuation);
        let _ = s.child.wait();
    }
    let run = run.map_err(|e| sim_err(Path::new(&a.endpoint), e))?;

    let trace_path = a.out.join("trace.csv");
    let metrics_path = a.out.join("metrics.txt");
    let config_path = a.out.join("config.txt");
    run.trace.save(&trace_path).map_err(|e| sim_err(&trace_path, e))?;
    fs::write(&metrics_path, run.metrics.to_text()).map_err(|e| io_err(&metrics_path, e))?;
    fs::write(&config_path, cfg.to_text()).map_err(|e| io_err(&config_path, e))?;

    let t = &run.timing;
    let mut m = RunManifest::new("simulate");
    for (k, v) in cfg.entries() {
        m.set(k, v);
    }
    m.set("link", format!("{:?}", a.link).to_lowercase());
    m.set("realtime", a.realtime);
    m.inputs.extend(a.config.iter().chain(&a.table).cloned());
    m.outputs.extend([trace_path, metrics_path, config_path]);
    m.model_checksum = model_checksum;
    m.set("exchanges", t.exchanges);
    m.set("latency_mean_us", t.mean_latency().as_micros());
    m.set("latency_p99_us", t.percentile(99.0).as_micros());
    m.set("loop_rate_hz", format!("{:.1}", t.rate_hz()));
    m.timings.push(("loop".into(), t.wall));
    m.timings.push(("total".into(), start.elapsed()));
    m.write(&a.out.join("manifest.txt"))?;

    print!("{}", run.metrics.to_text());
    if t.exchanges > 0 {
        println!(
            "exchanges={} latency_mean_us={} latency_p99_us={} loop_rate_hz={:.1}",
            t.exchanges,
            t.mean_latency().as_micros(),
            t.percentile(99.0).as_micros(),
            t.rate_hz()
        );
    }
    Ok(())
}

/// Metric rows shown by `report`.
const REPORT_KEYS: [&str; 9] = [
    "anticipation_horizon",
    "ev_brake_lead",
    "tv_min_accel",
    "first_llc_time",
    "crossing_time",
    "tv_emergency_brake",
    "ev_max_abs_accel",
    "min_gap_tv_ev",
    "collision",
];

pub fn report_text(a: &ReportArgs) -> Result<String, CliError> {
    let mut columns = Vec::new();
    let mut configs: Vec<(PathBuf, ScenarioConfig)> = Vec::new();
    for path in &a.traces {
        let trace = ScenarioTrace::load(path).map_err(|e| sim_err(path, e))?;
        let cfg_path = path.with_file_name("config.txt");
        let cfg = if cfg_path.exists() {
            Some(ScenarioConfig::load(&cfg_path).map_err(|e| sim_err(&cfg_path, e))?)
        } else {
            None
        };
        let length = cfg
            .as_ref()
            .map_or(ScenarioConfig::default().vehicle_length, |c| c.vehicle_length);
        let metrics = ScenarioMetrics::from_trace(&trace, length);
        let label = match &cfg {
            Some(c) if c.prediction_enabled => "on".to_string(),
            Some(_) => "off".to_string(),
            None => path.display().to_string(),
        };
        if let Some(c) = cfg {
            configs.push((cfg_path, c));
        }
        columns.push((label, parse_key_values(&metrics.to_text())));
    }
    let mut out = String::new();
    if let Some((first_path, first)) = configs.first() {
        for (p, c) in &configs[1..] {
            let normalize = |c: &ScenarioConfig| ScenarioConfig {
                prediction_enabled: true,
                ..c.clone()
            };
            if normalize(c) != normalize(first) {
                let _ = writeln!(
                    out,
                    "warning: {} differs from {} beyond the prediction flag",
                    p.display(),
                    first_path.display()
                );
            }
        }
    }
    let width = columns.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(12);
    let _ = write!(out, "{:<22}", "metric");
    for (label, _) in &columns {
        let _ = write!(out, " {label:>width$}");
    }
    out.push('\n');
    for key in REPORT_KEYS {
        let _ = write!(out, "{key:<22}");
        for (_, m) in &columns {
            let v = m.get(key).map(String::as_str).unwrap_or("none");
            let shown = v
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .map_or(v.to_string(), |x| format!("{x:.3}"));
            let _ = write!(out, " {shown:>width$}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let text = report_text(a)?;
    let (warnings, table): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| l.starts_with("warning:"));
    for w in warnings {
        eprintln!("{w}");
    }
    let mut stdout = io::stdout().lock();
    for l in table {
        let _ = writeln!(stdout, "{l}");
    }
    Ok(())
}

pub fn dispatch(cmd: &Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Compile(a) => cmd_compile(a),
        Cmd::Serve(a) => cmd_serve(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

/// Parses arguments, runs the subcommand and maps failures to exit codes.
pub fn main_exit() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

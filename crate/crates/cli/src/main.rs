use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use cfl_core::bench::{load_idx, synthetic_digits, Dataset, SynthOptions};
use cfl_core::fl::{build_federated_data, build_fleet, summarize, DataOptions, FederatedData, RunConfig, RunOutput, Simulation};
use cfl_core::report::write_reports;
use cfl_core::search::{DeviceProfile, LatencyTable};
use cfl_core::supernet::SupernetConfig;
use cfl_core::CflError;

const FLEET_FILE: &str = "fleet.json";
const TABLE_FILE: &str = "latency.txt";
const MANIFEST_FILE: &str = "manifest.txt";

/// Customized federated learning simulator.
#[derive(Parser, Debug)]
#[command(name = "cfl", version)]
struct Cli {
    /// Base seed for every random choice
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// key=value run config file; flags given on the command line win
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (data, run parent or report directory, per command)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Data directory read by build-latency-table and run
    #[arg(long, global = true, env = "CFL_DATA_DIR", default_value = "data")]
    data: PathBuf,

    #[command(subcommand)]
    command: Command,

    /// Whether `--seed` was given explicitly, so it can beat the config file.
    #[arg(skip)]
    seed_given: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build quality-processed, label-skewed worker caches
    GenData(GenData),
    /// Simulate the device fleet and write its per-layer latency table
    BuildLatencyTable(BuildTable),
    /// Run one experiment into a new timestamped directory
    Run(RunArgs),
    /// Turn run directories into CSV tables
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 8)]
    workers: usize,
    /// Share of each worker's data drawn from its dominant class
    #[arg(long, default_value_t = 0.8)]
    imbalance: f64,
    /// Synthetic training samples (ignored with --idx)
    #[arg(long, default_value_t = 20000)]
    train_samples: usize,
    /// Synthetic test samples (ignored with --idx)
    #[arg(long, default_value_t = 1000)]
    test_samples: usize,
    #[arg(long, default_value_t = 0.02)]
    public_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    holdout_fraction: f64,
    /// round-robin or random
    #[arg(long, default_value = "round-robin")]
    quality_assignment: String,
    /// Directory with MNIST-style IDX files instead of synthetic digits
    #[arg(long)]
    idx: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildTable {
    #[arg(long, default_value_t = 8)]
    workers: usize,
    /// toy or default
    #[arg(long, default_value = "toy")]
    model: String,
    /// Ratio between the fastest and slowest device
    #[arg(long, default_value_t = 4.0)]
    speed_spread: f64,
    /// Latency bound as a fraction of each device's full-parent latency
    #[arg(long, default_value_t = 0.6)]
    bound_factor: f64,
    #[arg(long, default_value_t = 2e5)]
    base_flops_per_ms: f64,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// cfl, uniform-fl or independent
    #[arg(long, default_value = "cfl")]
    mode: String,
    #[arg(long, default_value_t = 30)]
    rounds: usize,
    #[arg(long, default_value_t = 8)]
    workers: usize,
    #[arg(long, default_value_t = 2)]
    local_epochs: usize,
    #[arg(long, default_value_t = 0.2)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Generations of the submodel search
    #[arg(long, default_value_t = 20)]
    search_iterations: usize,
    /// prefix or random parent channels for a chosen width
    #[arg(long, default_value = "prefix")]
    channel_policy: String,
    /// Gate reward weight on skipped computation
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// weighted or coverage
    #[arg(long, default_value = "weighted")]
    aggregation: String,
    /// toy or default
    #[arg(long, default_value = "toy")]
    model: String,
    #[arg(long, default_value_t = 5)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 3)]
    warmup_epochs: usize,
    /// Use the gates during local training and evaluation (cfl mode)
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    gated: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories with the same number of rounds
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

/// Flags a subcommand may override; their ids are config keys.
const RUN_KEYS: &[&str] = &[
    "mode",
    "rounds",
    "workers",
    "local_epochs",
    "lr",
    "batch_size",
    "search_iterations",
    "channel_policy",
    "alpha",
    "aggregation",
    "model",
    "pretrain_epochs",
    "warmup_epochs",
    "gated",
];
const DATA_KEYS: &[&str] =
    &["workers", "imbalance", "train_samples", "test_samples", "public_fraction", "holdout_fraction", "quality_assignment"];
const TABLE_KEYS: &[&str] = &["workers", "model", "speed_spread", "bound_factor", "base_flops_per_ms"];

#[derive(Debug)]
enum Failure {
    Config(String),
    Io(String),
    Runtime(String),
}

impl From<CflError> for Failure {
    fn from(e: CflError) -> Self {
        match e {
            CflError::Config(_) | CflError::Argument(_) => Failure::Config(e.to_string()),
            CflError::Io(_) => Failure::Io(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {}", path.display(), e))
}

/// Defaults, then the config file, then flags actually given on the command line.
fn resolve_config(cli: &Cli, sub: &ArgMatches, keys: &[&str]) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for key in keys {
        if sub.value_source(key) == Some(ValueSource::CommandLine) {
            let raw = sub.get_raw(key).and_then(|mut v| v.next()).expect("flag has a value");
            cfg.set(key, &raw.to_string_lossy())?;
        }
    }
    if cli.config.is_none() || cli.seed_given {
        cfg.seed = cli.seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Io(format!("missing input file {}", path.display())))
    }
}

fn load_inputs(dir: &Path) -> Result<(FederatedData, Vec<DeviceProfile>, LatencyTable), Failure> {
    for f in [MANIFEST_FILE, FLEET_FILE, TABLE_FILE] {
        require(&dir.join(f))?;
    }
    let data = FederatedData::load(dir)?;
    let fleet_path = dir.join(FLEET_FILE);
    let text = fs::read_to_string(&fleet_path).map_err(|e| io_err(&fleet_path, e))?;
    let fleet: Vec<DeviceProfile> =
        serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {}", fleet_path.display(), e)))?;
    let table_path = dir.join(TABLE_FILE);
    let table = LatencyTable::from_text(&fs::read_to_string(&table_path).map_err(|e| io_err(&table_path, e))?)?;
    Ok((data, fleet, table))
}

fn gen_data(cli: &Cli, args: &GenData, sub: &ArgMatches) -> Result<(), Failure> {
    let cfg = resolve_config(cli, sub, DATA_KEYS)?;
    let out = cli.out.clone().unwrap_or_else(|| cli.data.clone());
    let (train, test) = match &args.idx {
        Some(dir) => {
            let names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
            for n in names {
                require(&dir.join(n))?;
            }
            (
                load_idx(&dir.join(names[0]), &dir.join(names[1]), 10)?,
                load_idx(&dir.join(names[2]), &dir.join(names[3]), 10)?,
            )
        }
        None => (
            synthetic_digits(cfg.train_samples, cfg.seed, &SynthOptions::default())?,
            synthetic_digits(cfg.test_samples, cfg.seed ^ 0x7E57, &SynthOptions::default())?,
        ),
    };
    let data = build_federated_data(&train, &test, &DataOptions::from_config(&cfg), cfg.seed)?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    data.save(&out).map_err(|e| io_err(&out, e))?;
    print!("{}", data.summary());
    println!("total={} dir={}", train.len(), out.display());
    Ok(())
}

fn build_table(cli: &Cli, sub: &ArgMatches) -> Result<(), Failure> {
    let cfg = resolve_config(cli, sub, TABLE_KEYS)?;
    let out = cli.out.clone().unwrap_or_else(|| cli.data.clone());
    let mut net: SupernetConfig = cfg.supernet()?;
    // adapt to the cached data's sample shape when there is one
    let public = cli.data.join("public.cfld");
    if public.exists() {
        let d = Dataset::load(&public)?;
        net.input_shape = d.shape();
        net.num_classes = d.num_classes();
    }
    let (fleet, table) = build_fleet(&cfg, &net)?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let fleet_json = serde_json::to_string_pretty(&fleet).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(out.join(FLEET_FILE), fleet_json + "\n").map_err(|e| io_err(&out.join(FLEET_FILE), e))?;
    fs::write(out.join(TABLE_FILE), table.to_text()).map_err(|e| io_err(&out.join(TABLE_FILE), e))?;
    for p in &fleet {
        println!("device={} flops_per_ms={:.1} bound_ms={:.6}", p.device_model, p.flops_per_ms, p.latency_bound_ms);
    }
    println!("entries={} dir={}", table.len(), out.display());
    Ok(())
}

/// Creates `<parent>/<mode>-s<seed>-<unix time>`, adding a suffix rather than
/// reusing an existing directory.
fn fresh_run_dir(parent: &Path, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = format!("{}-s{}-{}", cfg.mode, cfg.seed, stamp);
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{}-{}", base, n) };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

fn run(cli: &Cli, sub: &ArgMatches) -> Result<(), Failure> {
    let cfg = resolve_config(cli, sub, RUN_KEYS)?;
    let (data, fleet, table) = load_inputs(&cli.data)?;
    let mut sim = Simulation::with_fleet(&cfg, &data, fleet, table)?;
    let parent = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let dir = fresh_run_dir(&parent, &cfg)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let r = sim.run_round()?;
        let mean_acc = r.global_accuracy.iter().sum::<f64>() / r.global_accuracy.len() as f64;
        println!("round={} time_ms={:.4} accuracy={:.4} events={}", r.round, r.round_time_ms, mean_acc, r.events.len());
        records.push(r);
    }
    let summary = summarize(&cfg, &records, sim.aggregate_calls(), sim.predictor_frozen_round())?;
    let output = RunOutput { config: cfg, records, summary };
    output.write(&dir).map_err(|e| io_err(&dir, e))?;
    println!(
        "final_mean_accuracy={:.4} mean_round_time_ms={:.4} aggregate_calls={} dir={}",
        output.summary.final_mean_accuracy,
        output.summary.mean_round_time_ms,
        output.summary.aggregate_calls,
        dir.display()
    );
    Ok(())
}

fn report(cli: &Cli, args: &ReportArgs) -> Result<(), Failure> {
    for dir in &args.runs {
        for f in ["config.txt", "rounds.jsonl", "summary.json"] {
            require(&dir.join(f))?;
        }
    }
    let runs = args.runs.iter().map(|d| RunOutput::read(d)).collect::<Result<Vec<_>, _>>()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("report"));
    for name in write_reports(&out, &runs)? {
        println!("{}", out.join(name).display());
    }
    Ok(())
}

fn dispatch(cli: &Cli, matches: &ArgMatches) -> Result<(), Failure> {
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a, sub),
        Command::BuildLatencyTable(_) => build_table(cli, sub),
        Command::Run(_) => run(cli, sub),
        Command::Report(a) => report(cli, a),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let mut cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    cli.seed_given = matches.value_source("seed") == Some(ValueSource::CommandLine)
        || matches.subcommand().is_some_and(|(_, s)| s.value_source("seed") == Some(ValueSource::CommandLine));
    match dispatch(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Config(m) => (2, m),
                Failure::Io(m) => (3, m),
                Failure::Runtime(m) => (4, m),
            };
            eprintln!("error: {}", msg);
            ExitCode::from(code)
        }
    }
}

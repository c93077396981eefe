use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use riskid_core::causal::{assess_risk, identify_risk_object, CausalConfig, EvalOrder, RiskReport};
use riskid_core::eval::{benchmark, BenchmarkMode};
use riskid_core::graphs::EDGE_THRESHOLD;
use riskid_core::model::{export_graph, Checkpoint, ModelConfig};
use riskid_core::simulator::{generate_dataset, Scenario, SimConfig, SplitCounts, SCENARIO_SCHEMA_VERSION};
use riskid_core::training::{log_csv, train_two_stage, TrainConfig};
use riskid_core::{Error, Result};

const SPLITS: [&str; 3] = ["train", "test1", "test2"];

#[derive(Parser, Debug)]
#[command(name = "riskid", version, about = "Driver-centric risk object identification on synthetic driving clips")]
struct Cli {
    /// Default directory for datasets, checkpoints and reports.
    #[arg(long, global = true, env = "RISKID_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/test1/test2 JSON-lines datasets.
    Gen(GenArgs),
    /// Train stage 1 then stage 2 and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Response and risk object metrics on test1/test2.
    Eval(EvalArgs),
    /// Name the risk object of one scenario.
    Identify(ScenarioArgs),
    /// Risk reports for every scenario in a dataset file.
    Assess(AssessArgs),
    /// Ego-Thing graph edges at one frame.
    ExportGraph(ExportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    test1: usize,
    #[arg(long, default_value_t = 200)]
    test2: usize,
    /// Output directory; defaults to the data directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with simulator overrides.
    #[arg(long)]
    sim_config: Option<PathBuf>,
    #[arg(long)]
    confound_prob: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    /// Training split; defaults to train.jsonl in the data directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss log CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    log: Option<PathBuf>,
    /// JSON file with training overrides.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// JSON file with model overrides.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Causation,
    Correlation,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    test1: Option<PathBuf>,
    #[arg(long)]
    test2: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Causation)]
    mode: Mode,
    /// Writes metrics_<mode>.json and metrics_<mode>.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Order {
    Forward,
    Reverse,
    Parallel,
}

#[derive(Args, Debug)]
struct CausalArgs {
    #[arg(long, value_enum, default_value_t = Order::Forward)]
    order: Order,
    /// Only vehicles and pedestrians are candidates.
    #[arg(long)]
    vehicles_and_pedestrians_only: bool,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Scenario JSON, or JSON-lines with --index.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    causal: CausalArgs,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AssessArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset file; defaults to test2.jsonl in the data directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    causal: CausalArgs,
    /// JSON-lines output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Frame index; the last frame when absent.
    #[arg(long)]
    frame: Option<usize>,
    #[arg(long, default_value_t = EDGE_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: ErrorBody<'a>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = ErrorJson { error: ErrorBody { kind: e.kind(), message: e.to_string() } };
            eprintln!("{}", serde_json::to_string(&body).expect("error body serializes"));
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let dir = cli.data_dir;
    let ckpt_path = |p: Option<PathBuf>| p.unwrap_or_else(|| dir.join("model.bin"));
    match cli.command {
        Command::Gen(a) => gen(&dir, a),
        Command::Train(a) => train(&dir, a),
        Command::Eval(a) => {
            let ckpt = load_ckpt(&ckpt_path(a.ckpt))?;
            let test1 = read_dataset(&a.test1.unwrap_or_else(|| dir.join("test1.jsonl")))?;
            let test2 = read_dataset(&a.test2.unwrap_or_else(|| dir.join("test2.jsonl")))?;
            let (mode, name) = match a.mode {
                Mode::Causation => (BenchmarkMode::Causation, "causation"),
                Mode::Correlation => (BenchmarkMode::Correlation, "correlation"),
            };
            let report = benchmark(&ckpt, &test1, &test2, mode)?;
            let out = a.out.unwrap_or_else(|| dir.clone());
            fs::create_dir_all(&out)?;
            write_json(&out.join(format!("metrics_{name}.json")), &report)?;
            fs::write(out.join(format!("metrics_{name}.csv")), report.to_csv())?;
            Ok(())
        }
        Command::Identify(a) => {
            let ckpt = load_ckpt(&ckpt_path(a.ckpt))?;
            let scenario = read_one(&a.scenario, a.index)?;
            let (_, report) = identify_risk_object(&scenario.clip, &ckpt, &causal_config(&a.causal))?;
            emit(a.out.as_deref(), &format!("{}\n", to_json(&report)?))
        }
        Command::Assess(a) => {
            let ckpt = load_ckpt(&ckpt_path(a.ckpt))?;
            let data = read_dataset(&a.data.unwrap_or_else(|| dir.join("test2.jsonl")))?;
            let config = causal_config(&a.causal);
            let reports: Vec<RiskReport> = data.iter().map(|s| assess_risk(&s.clip, &ckpt, &config)).collect::<Result<_>>()?;
            let mut text = String::new();
            for r in &reports {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            emit(a.out.as_deref(), &text)
        }
        Command::ExportGraph(a) => {
            let ckpt = load_ckpt(&ckpt_path(a.ckpt))?;
            let scenario = read_one(&a.scenario, a.index)?;
            let frame = a.frame.unwrap_or(scenario.clip.frames.saturating_sub(1));
            let graph = export_graph(&ckpt, &scenario.clip, frame, a.threshold)?;
            emit(a.out.as_deref(), &format!("{}\n", to_json(&graph)?))
        }
    }
}

fn gen(dir: &Path, a: GenArgs) -> Result<()> {
    let mut config: SimConfig = read_config(a.sim_config.as_deref())?;
    config.seed = a.seed;
    if let Some(p) = a.confound_prob {
        config.confound_prob = p;
    }
    let data = generate_dataset(&config, SplitCounts { train: a.train, test1: a.test1, test2: a.test2 })?;
    let out = a.out.unwrap_or_else(|| dir.to_path_buf());
    fs::create_dir_all(&out)?;
    for (name, split) in SPLITS.iter().zip([&data.train, &data.test1, &data.test2]) {
        write_dataset(&out.join(format!("{name}.jsonl")), split)?;
    }
    Ok(())
}

fn train(dir: &Path, a: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = read_config(a.train_config.as_deref())?;
    config.seed = a.seed;
    if let Some(n) = a.stage1_steps {
        config.stage1_steps = n;
    }
    if let Some(n) = a.stage2_steps {
        config.stage2_steps = n;
    }
    if let Some(n) = a.batch_size {
        config.batch_size = n;
    }
    if a.no_augment {
        config.augment = false;
    }
    let mut model: ModelConfig = read_config(a.model_config.as_deref())?;
    if let Some(h) = a.hidden {
        model.hidden = h;
    }
    if let Some(d) = a.dim {
        model.dim = d;
    }
    let data = read_dataset(&a.data.unwrap_or_else(|| dir.join("train.jsonl")))?;
    let outcome = train_two_stage(&data, &config, &model)?;
    let out = a.out.unwrap_or_else(|| dir.join("model.bin"));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    outcome.checkpoint.save(&out)?;
    fs::write(a.log.unwrap_or_else(|| out.with_extension("csv")), log_csv(&outcome.log))?;
    Ok(())
}

fn causal_config(a: &CausalArgs) -> CausalConfig {
    let order = match a.order {
        Order::Forward => EvalOrder::Forward,
        Order::Reverse => EvalOrder::Reverse,
        Order::Parallel => EvalOrder::Parallel,
    };
    CausalConfig { order, vehicles_and_pedestrians_only: a.vehicles_and_pedestrians_only }
}

/// Names the file in I/O errors.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        e => e,
    })
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    at(path, Checkpoint::load(path))
}

fn read_config<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&at(p, fs::read_to_string(p).map_err(Error::from))?)?),
        None => Ok(T::default()),
    }
}

/// Accepts one JSON object, pretty or not, or one object per line.
fn read_dataset(path: &Path) -> Result<Vec<Scenario>> {
    let text = at(path, fs::read_to_string(path).map_err(Error::from))?;
    let mut out = Vec::new();
    for s in serde_json::Deserializer::from_str(&text).into_iter::<Scenario>() {
        let s = s?;
        if s.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::invalid(
                "scenario",
                format!("schema version {} (expected {SCENARIO_SCHEMA_VERSION})", s.schema_version),
            ));
        }
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("dataset file"));
    }
    Ok(out)
}

fn read_one(path: &Path, index: usize) -> Result<Scenario> {
    let mut all = read_dataset(path)?;
    if index >= all.len() {
        return Err(Error::invalid("index", format!("{index} but the file holds {} scenarios", all.len())));
    }
    Ok(all.swap_remove(index))
}

fn write_dataset(path: &Path, split: &[Scenario]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in split {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, format!("{}\n", to_json(value)?))?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

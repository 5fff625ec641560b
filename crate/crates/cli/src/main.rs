use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simfair::data::{
    generate_world, load_csv, load_features_csv, save_csv, save_features_csv, split, SplitKind,
    SplitSpec, WorldConfig, Zone,
};
use simfair::error::Error;
use simfair::experiment::{run_experiment, write_outputs, Agg, ExperimentConfig};
use simfair::flow::{swap_study, train_inverse_surrogate, ChainTrainConfig, TrainedChain};
use simfair::pipelines::{train, ModelKind, Strategy, StrategySpec, TrainConfig, TrainedModel};
use simfair::sim::SimKind;

#[derive(Parser)]
#[command(
    name = "simfair",
    version,
    about = "Location-fair, simulator-guided regression on synthetic worlds"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic world generation.
    #[command(subcommand)]
    World(WorldCmd),
    /// Split a dataset into train and test CSVs.
    Split(SplitArgs),
    /// Inverse surrogate of a simulator.
    #[command(subcommand)]
    Flow(FlowCmd),
    /// Train one strategy.
    Train(TrainArgs),
    /// Evaluate a trained model on a labelled CSV.
    Eval(EvalArgs),
    /// Run a split x strategy x seed matrix.
    Experiment(ExperimentArgs),
}

#[derive(Subcommand)]
enum WorldCmd {
    Gen {
        /// World config JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    kind: SplitKind,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_test: PathBuf,
    /// Also write the test rows without labels.
    #[arg(long)]
    out_test_features: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    threshold_lon: Option<f64>,
    #[arg(long)]
    train_zone: Option<Zone>,
    #[arg(long)]
    test_zone: Option<Zone>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    block_deg: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    cut_time: Option<u32>,
}

#[derive(Args)]
struct ChainArgs {
    #[arg(long)]
    sim: SimKind,
    #[arg(long = "in")]
    input: PathBuf,
    /// Chain training config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    prior_samples: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum FlowCmd {
    Train {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    StudySwap {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    strategy: Strategy,
    #[arg(long, default_value = "fnn")]
    model: ModelKind,
    #[arg(long)]
    train: PathBuf,
    /// Test rows; only features (and energy inputs) are read.
    #[arg(long)]
    test_features: PathBuf,
    #[arg(long)]
    chain: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history as JSON lines.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the run matrix and exit.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    agg: Option<Agg>,
}

/// Failure classes mapped to exit codes 1 (usage) and 2 (runtime).
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Res<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Res<T> {
    let bytes = std::fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Res {
    let bytes = serde_json::to_vec_pretty(v).map_err(Error::from)?;
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> Res {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{}: no such file", path.display())))
    }
}

fn world_gen(config: Option<PathBuf>, seed: u64, out: &Path) -> Res {
    let cfg: WorldConfig = match config {
        Some(p) => read_json(&p)?,
        None => WorldConfig::default(),
    };
    let data = generate_world(&cfg, seed)?;
    save_csv(&data, out)?;
    eprintln!(
        "wrote {} rows from {} stations to {}",
        data.len(),
        data.stations.len(),
        out.display()
    );
    Ok(())
}

fn split_spec(a: &SplitArgs) -> SplitSpec {
    let mut spec = a.kind.default_spec();
    match &mut spec {
        SplitSpec::GeoRegion { threshold_lon } => {
            if let Some(t) = a.threshold_lon {
                *threshold_lon = t;
            }
        }
        SplitSpec::TemperatureZone { train, test } => {
            if let Some(z) = a.train_zone {
                *train = z;
            }
            if let Some(z) = a.test_zone {
                *test = z;
            }
        }
        SplitSpec::RandomGroups {
            seed,
            block_deg,
            test_fraction,
        } => {
            if let Some(s) = a.seed {
                *seed = s;
            }
            if let Some(b) = a.block_deg {
                *block_deg = b;
            }
            if let Some(f) = a.test_fraction {
                *test_fraction = f;
            }
        }
        SplitSpec::Temporal { cut_time } => {
            if a.cut_time.is_some() {
                *cut_time = a.cut_time;
            }
        }
    }
    spec
}

fn split_cmd(a: &SplitArgs) -> Res {
    require_file(&a.input)?;
    let data = load_csv(&a.input)?;
    let (tr, te) = split(&data, &split_spec(a))?;
    save_csv(&tr, &a.out_train)?;
    save_csv(&te, &a.out_test)?;
    if let Some(p) = &a.out_test_features {
        save_features_csv(&te.test_features(), p)?;
    }
    eprintln!("train {} rows, test {} rows", tr.len(), te.len());
    Ok(())
}

fn chain_config(a: &ChainArgs) -> Res<ChainTrainConfig> {
    let mut cfg: ChainTrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ChainTrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.prior_samples {
        cfg.prior_samples = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr0 = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

fn chain_inputs(
    a: &ChainArgs,
) -> Res<(
    Box<dyn simfair::sim::MechanisticModel>,
    Vec<Vec<f64>>,
    ChainTrainConfig,
)> {
    require_file(&a.input)?;
    let data = load_csv(&a.input)?;
    let model = a.sim.model();
    let states = data.sim_states(&model.state_names())?;
    Ok((model, states, chain_config(a)?))
}

fn flow_cmd(cmd: FlowCmd) -> Res {
    match cmd {
        FlowCmd::Train { chain, out } => {
            let (model, states, cfg) = chain_inputs(&chain)?;
            let trained = train_inverse_surrogate(model.as_ref(), &states, &cfg)?;
            trained.save(&out)?;
            eprintln!(
                "chain trained on {} pairs; held-out forward RMSE {:?}",
                trained.report.train_pairs, trained.report.forward_rmse
            );
        }
        FlowCmd::StudySwap { chain, report } => {
            let (model, states, cfg) = chain_inputs(&chain)?;
            let r = swap_study(model.as_ref(), &states, &cfg)?;
            write_json(&report, &r)?;
            eprintln!(
                "held-out temperature RMSE: swap {:.4} K, inverse {:.4} K",
                r.swap_rmse, r.inverse_rmse
            );
        }
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Res {
    require_file(&a.train)?;
    require_file(&a.test_features)?;
    let spec = StrategySpec::new(a.strategy);
    let chain = match &a.chain {
        Some(p) => {
            require_file(p)?;
            Some(TrainedChain::load(p)?)
        }
        None if spec.needs_chain() => {
            return Err(usage(format!(
                "strategy {} needs an inverse chain: pass --chain (train one with `simfair flow train`)",
                a.strategy.as_str()
            )))
        }
        None => None,
    };
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.model = a.model;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr0 = v;
    }
    let tr = load_csv(&a.train)?;
    let te = load_features_csv(&a.test_features)?;
    let (model, history) = train(&spec, &tr, &te, chain.as_ref(), &cfg, a.seed)?;
    model.save(&a.out)?;
    if let Some(h) = &a.history {
        history.write_jsonl(h)?;
    }
    if let Some(last) = history.records.last() {
        eprintln!(
            "epoch {}: loss {:.5}, train RMSE {:.4} K",
            last.epoch, last.losses.total, last.train_rmse
        );
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Res {
    require_file(&a.model)?;
    require_file(&a.test)?;
    let model = TrainedModel::load(&a.model)?;
    let te = load_csv(&a.test)?;
    let m = model.evaluate(&te)?;
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    let out = serde_json::json!({
        "schema_version": 1,
        "strategy": model.spec.strategy,
        "metrics": m,
    });
    write_json(&a.out, &out)?;
    eprintln!(
        "RMSE {:.4}  Corr {:.4}  Fairness {:.4}",
        m.rmse, m.pearson, m.fairness
    );
    Ok(())
}

fn experiment_cmd(a: &ExperimentArgs) -> Res {
    let mut cfg: ExperimentConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(agg) = a.agg {
        cfg.agg = agg;
    }
    cfg.validate()?;
    if a.dry_run {
        let plan = cfg.plan();
        for c in &plan {
            println!("{c}");
        }
        println!("{} runs", plan.len());
        return Ok(());
    }
    let out = a
        .out
        .as_ref()
        .ok_or_else(|| usage("--out is required unless --dry-run is given"))?;
    let res = run_experiment(&cfg, a.jobs)?;
    write_outputs(&cfg, &res, out)?;
    for r in &res.summary {
        let cell = |s: &Option<simfair::experiment::Spread>| {
            s.as_ref().map_or("-".to_string(), |s| s.table())
        };
        println!(
            "{:<18} {:<10} RMSE {:<16} Corr {:<16} Fairness {}",
            r.split,
            r.strategy.display_name(),
            cell(&r.rmse),
            cell(&r.pearson),
            cell(&r.fairness)
        );
    }
    if res.failed() > 0 {
        return Err(Failure::Runtime(format!(
            "{} of {} runs failed; see runs.csv",
            res.failed(),
            res.cells.len()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Res {
    match cli.cmd {
        Cmd::World(WorldCmd::Gen { config, seed, out }) => world_gen(config, seed, &out),
        Cmd::Split(a) => split_cmd(&a),
        Cmd::Flow(f) => flow_cmd(f),
        Cmd::Train(a) => train_cmd(&a),
        Cmd::Eval(a) => eval_cmd(&a),
        Cmd::Experiment(a) => experiment_cmd(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

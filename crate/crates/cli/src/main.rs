//! Command-line front end for training, protecting, attacking and repairing
//! INT8 GIN models, and for running the experiment studies.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use crossfire_core::attack::AttackTrace;
use crossfire_core::harness::{
    attack_model, defend_model, overhead_study, prepare, protect_model, records_to_csv,
    records_to_json, reliability_study, run_experiment, same_weights, sweep, test_quality,
    ExperimentConfig, OverheadConfig, OverheadRow, Prepared, ReliabilityConfig, SealedState,
    SweepGrid, SweepRow,
};
use crossfire_core::{io, Error};
use serde::de::DeserializeOwned;

const THREADS_ENV: &str = "CROSSFIRE_THREADS";

#[derive(Parser)]
#[command(
    name = "crossfire",
    version,
    about = "Bit-flip attacks and defenses for INT8 graph networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Step {
    #[command(flatten)]
    common: Common,
    /// Input model; defaults to the previous step's file in `--out`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the dataset and train the INT8 model.
    Train(Common),
    /// Apply the configured defense and seal its state.
    Protect(Step),
    /// Run the configured attack against the deployed model.
    Attack(Step),
    /// Detect and repair with the sealed state.
    Defend(Step),
    /// Run every repetition of one experiment config.
    Experiment(Common),
    /// Digest miss rates over random flip sets.
    Reliability(Common),
    /// Storage ratios and hashing time against an INT8 layer.
    Overhead(Common),
    /// Cross product of attack and defense settings, averaged per cell.
    Sweep(Common),
}

/// Failure classes with their process exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Io(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
            Some(Error::Config { .. }) => Failure::Config(e),
            Some(Error::Io(_)) | Some(Error::Format(_)) | Some(Error::Json(_)) => Failure::Io(e),
            _ if e.chain().any(|c| c.is::<std::io::Error>()) => Failure::Io(e),
            _ => Failure::Other(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type Outcome<T> = Result<T, Failure>;

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Outcome<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Config(anyhow::anyhow!("{}: {e}", path.display())))
}

fn experiment_config(c: &Common) -> Outcome<ExperimentConfig> {
    let mut cfg: ExperimentConfig = load_json(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Outcome<&Path> {
    fs::create_dir_all(&c.out)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Outcome<()> {
    fs::write(path, text)
        .map_err(Error::from)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_model(path: &Path) -> Outcome<crossfire_core::gnn::GinModel> {
    Ok(io::read_model(path).with_context(|| format!("reading {}", path.display()))?)
}

fn write_model(path: &Path, model: &crossfire_core::gnn::GinModel) -> Outcome<()> {
    io::write_model(path, model).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// The data of the config's first repetition around the model at `path`.
fn prepared(cfg: &ExperimentConfig, path: &Path) -> Outcome<Prepared> {
    Ok(Prepared::with_model(cfg, cfg.seed, read_model(path)?)?)
}

fn model_path(m: &Option<PathBuf>, out: &Path, default: &str) -> PathBuf {
    m.clone().unwrap_or_else(|| out.join(default))
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = experiment_config(&c)?;
            let out = out_dir(&c)?;
            let prep = prepare(&cfg, cfg.seed)?;
            let q = test_quality(&cfg, &prep, &prep.model)?;
            write_model(&out.join("model.cfgn"), &prep.model)?;
            println!("trained model: test {:?} {q:.6}", cfg.metric);
        }
        Command::Protect(Step {
            common: c,
            model: m,
        }) => {
            let cfg = experiment_config(&c)?;
            let out = out_dir(&c)?;
            let prep = prepared(&cfg, &model_path(&m, out, "model.cfgn"))?;
            let (deployed, state) = protect_model(&cfg, &prep)?;
            write_model(&out.join("deployed.cfgn"), &deployed)?;
            state.save(out).context("writing sealed state")?;
            let q = test_quality(&cfg, &prep, &deployed)?;
            println!(
                "protected with {}: test {:?} {q:.6}",
                cfg.defense.name(),
                cfg.metric
            );
        }
        Command::Attack(Step {
            common: c,
            model: m,
        }) => {
            let cfg = experiment_config(&c)?;
            let out = out_dir(&c)?;
            let mut prep = prepared(&cfg, &model_path(&m, out, "deployed.cfgn"))?;
            let mut model = prep.model.clone();
            let trace = attack_model(&cfg, &prep, &mut model)?;
            write_model(&out.join("attacked.cfgn"), &model)?;
            write(&out.join("trace.jsonl"), trace.to_jsonl()?)?;
            prep.model = model;
            let q = test_quality(&cfg, &prep, &prep.model)?;
            println!(
                "{} committed {} flips: test {:?} {q:.6}",
                cfg.attack.name(),
                trace.len(),
                cfg.metric
            );
        }
        Command::Defend(Step {
            common: c,
            model: m,
        }) => {
            let cfg = experiment_config(&c)?;
            let out = out_dir(&c)?;
            let prep = prepared(&cfg, &model_path(&m, out, "attacked.cfgn"))?;
            let state = SealedState::load(out, &cfg).context("reading sealed state")?;
            let trace_path = out.join("trace.jsonl");
            let trace = match fs::read_to_string(&trace_path) {
                Ok(text) => AttackTrace::from_jsonl(&text)?,
                Err(_) => AttackTrace::default(),
            };
            let mut model = prep.model.clone();
            let outcome = defend_model(&state, &mut model, &trace)?;
            write_model(&out.join("repaired.cfgn"), &model)?;
            write(
                &out.join("defense.json"),
                serde_json::to_string_pretty(&outcome).map_err(Error::from)?,
            )?;
            let q = test_quality(&cfg, &prep, &model)?;
            let pristine = out.join("deployed.cfgn");
            let restored = match pristine.exists() {
                true => format!(
                    ", reconstructed {}",
                    same_weights(&model, &read_model(&pristine)?)
                ),
                false => String::new(),
            };
            println!(
                "{}: detected {}, {}/{} flips flagged, test {:?} {q:.6}{restored}",
                state.kind().name(),
                outcome.attack_detected,
                outcome.detected_flips,
                trace.len(),
                cfg.metric
            );
        }
        Command::Experiment(c) => {
            let cfg = experiment_config(&c)?;
            let out = out_dir(&c)?;
            let records = run_experiment(&cfg)?;
            write(&out.join("records.csv"), records_to_csv(&records)?)?;
            write(&out.join("records.json"), records_to_json(&records)?)?;
            let rebuilt = records.iter().filter(|r| r.reconstructed).count();
            println!("{} runs, {rebuilt} reconstructed", records.len());
        }
        Command::Reliability(c) => {
            let mut cfg: ReliabilityConfig = load_json(c.config.as_deref())?;
            if let Some(seed) = c.seed {
                cfg.seed = seed;
            }
            let out = out_dir(&c)?;
            let table = reliability_study(&cfg)?;
            write(&out.join("reliability.csv"), table.to_csv()?)?;
            for &d in &cfg.digests {
                let (misses, trials) = table.totals(d);
                println!("digest {d}: {misses}/{trials} flip sets missed");
            }
        }
        Command::Overhead(c) => {
            let mut cfg: OverheadConfig = load_json(c.config.as_deref())?;
            if let Some(seed) = c.seed {
                cfg.seed = seed;
            }
            let out = out_dir(&c)?;
            let rows = overhead_study(&cfg)?;
            write(&out.join("overhead.csv"), OverheadRow::to_csv(&rows)?)?;
            println!("{} rows", rows.len());
        }
        Command::Sweep(c) => {
            let mut grid: SweepGrid = load_json(c.config.as_deref())?;
            if let Some(seed) = c.seed {
                grid.base.seed = seed;
            }
            let out = out_dir(&c)?;
            let (records, rows) = sweep(&grid)?;
            write(&out.join("records.csv"), records_to_csv(&records)?)?;
            write(&out.join("sweep.csv"), SweepRow::to_csv(&rows)?)?;
            println!("{} cells, {} runs", rows.len(), records.len());
        }
    }
    Ok(())
}

fn init_threads() -> Outcome<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Config(anyhow::anyhow!(
            "{THREADS_ENV} must be a positive integer, got {value:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Other(e.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Config(e) | Failure::Io(e) | Failure::Other(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

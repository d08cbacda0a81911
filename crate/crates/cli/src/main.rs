use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graspformer::adam::AdamConfig;
use graspformer::bench::bench;
use graspformer::config::{ModelConfig, RunConfig};
use graspformer::detect::{detect, ExtractionConfig};
use graspformer::error::at_path;
use graspformer::eval::{eval_repeats, EvalConfig, ModelAgent};
use graspformer::gradcheck::{model_check, op_suite};
use graspformer::scene::{gen_scene, Scenario, SceneConfig};
use graspformer::train::{train, write_dataset, Dataset};
use graspformer::{Checkpoint, Error, GraspNet, TsdfVolume};
use log::info;

#[derive(Parser)]
#[command(name = "graspformer", version, about = "Voxel grasp detection with a vision-transformer encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of scenes, TSDF volumes and grasp labels.
    Gen {
        #[arg(long, default_value = "pile")]
        scenario: Scenario,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Model config whose grid the scenes are rendered on (toy preset if omitted).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model; writes loss.csv and checkpoints into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Detect grasps in a TSDF file and print them as JSON.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tsdf: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Declutter evaluation over generated scenes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rounds: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value = "pile")]
        scenario: Scenario,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
    },
    /// Finite-difference gradient checks of all ops and the configured model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Time TSDF → grasp list end to end.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        repeat: usize,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if e.is_data_error() {
        2
    } else {
        1
    }
}

fn load_net(path: &Path) -> Result<GraspNet, Error> {
    let ck = Checkpoint::load(path)?;
    Ok(GraspNet::from_checkpoint(&ck, AdamConfig::default())?.0)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serialises")
}

/// Prints to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<(), Error> {
    match writeln!(std::io::stdout().lock(), "{}", text) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(at_path(dir))?;
    }
    fs::write(path, contents).map_err(at_path(path))
}

fn run_gen(scenario: Scenario, count: usize, seed: u64, out: &Path, config: Option<&Path>) -> Outcome {
    let model = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig::toy(),
    };
    let files = write_dataset(out, scenario, count, seed, &SceneConfig::for_model(&model))?;
    info!("wrote {} files", files.len());
    emit(&format!("{} scenes written to {}", count, out.display()))?;
    Ok(())
}

fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("step_{:06}.gfck", step))
}

fn run_train(data: &Path, config: &Path, out: &Path, resume: Option<&Path>) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let dataset = Dataset::load(data, cfg.model.n())?;
    if !dataset.skipped.is_empty() {
        eprintln!("warning: skipped {} corrupt record(s)", dataset.skipped.len());
    }
    let resume = match resume {
        Some(p) => {
            let (net, adam) = GraspNet::from_checkpoint(&Checkpoint::load(p)?, cfg.train.adam)?;
            let adam = adam.ok_or_else(|| Error::FormatMismatch(format!("{} has no optimiser state", p.display())))?;
            Some((net, adam))
        }
        None => None,
    };
    fs::create_dir_all(out).map_err(at_path(out))?;
    let log_path = out.join("loss.csv");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(at_path(&log_path))?;
    if resume.is_none() {
        writeln!(log, "step,epoch,loss").map_err(Error::from)?;
    }
    let every = cfg.train.checkpoint_every as u64;
    let outcome = train(&dataset, &cfg.model, &cfg.train, resume, |rec, net, adam| {
        writeln!(log, "{},{},{:.9}", rec.step, rec.epoch, rec.loss)?;
        if every > 0 && rec.step % every == 0 {
            net.to_checkpoint(Some(adam)).save(checkpoint_path(out, rec.step))?;
        }
        Ok(())
    })?;
    outcome.net.to_checkpoint(Some(&outcome.adam)).save(out.join("final.gfck"))?;
    match outcome.log.last() {
        Some(r) => emit(&format!("trained to step {} (loss {:.6})", r.step, r.loss))?,
        None => emit(&format!("nothing to do: already at step {}", outcome.adam.step))?,
    }
    Ok(())
}

fn run_predict(ckpt: &Path, tsdf: &Path, threshold: f64, out: Option<&Path>) -> Outcome {
    let net = load_net(ckpt)?;
    let vol = TsdfVolume::load(tsdf)?;
    if vol.n != net.config.n() {
        return Err(Error::SizeMismatch(format!("{} has N = {}, the model expects {}", tsdf.display(), vol.n, net.config.n())).into());
    }
    let poses =
        detect(&net.predict(&vol)?, &ExtractionConfig::with_threshold(threshold), &SceneConfig::for_model(&net.config).transform())?;
    let text = json(&poses);
    match out {
        Some(p) => write_file(p, &text)?,
        None => emit(&text)?,
    }
    Ok(())
}

fn run_eval(ckpt: &Path, rounds: usize, seed: u64, repeats: usize, scenario: Scenario, threshold: f64) -> Outcome {
    if rounds == 0 || repeats == 0 {
        return Err(Failure::Usage("--rounds and --repeats must be at least 1".into()));
    }
    let net = load_net(ckpt)?;
    let cfg = EvalConfig { scenario, ..EvalConfig::new(SceneConfig::for_model(&net.config), rounds, seed) };
    let mut agent = ModelAgent { net, extraction: ExtractionConfig::with_threshold(threshold) };
    let report = eval_repeats(&mut agent, &cfg, repeats)?;
    emit(&json(&report))?;
    Ok(())
}

fn run_gradcheck(config: &Path) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let mut reports = op_suite(&cfg.gradcheck, cfg.train.seed)?;
    reports.push(model_check(&cfg.model, &cfg.gradcheck, cfg.train.seed)?);
    let mut failed = Vec::new();
    for r in &reports {
        emit(&serde_json::to_string(r).expect("plain data serialises"))?;
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

fn run_bench(ckpt: &Path, repeat: usize) -> Outcome {
    if repeat == 0 {
        return Err(Failure::Usage("--repeat must be at least 1".into()));
    }
    let net = load_net(ckpt)?;
    let vol = gen_scene(0, Scenario::Pile, &SceneConfig::for_model(&net.config))?.volume;
    emit(&json(&bench(&net, &vol, &ExtractionConfig::default(), repeat)?))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Gen { scenario, count, seed, out, config } => run_gen(*scenario, *count, *seed, out, config.as_deref()),
        Command::Train { data, config, out, resume } => run_train(data, config, out, resume.as_deref()),
        Command::Predict { ckpt, tsdf, threshold, out } => run_predict(ckpt, tsdf, *threshold, out.as_deref()),
        Command::Eval { ckpt, rounds, seed, repeats, scenario, threshold } => {
            run_eval(ckpt, *rounds, *seed, *repeats, *scenario, *threshold)
        }
        Command::Gradcheck { config } => run_gradcheck(config),
        Command::Bench { ckpt, repeat } => run_bench(ckpt, *repeat),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

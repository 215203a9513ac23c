//! `allweather`: synthesize data, train, evaluate and restore from the shell.

use std::fs::{self, File, OpenOptions};
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use allweather_core::io::checkpoint::Checkpoint;
use allweather_core::io::config::RunConfig;
use allweather_core::io::image::{read_dataset, read_png, write_dataset, write_png};
use allweather_core::synth::synth_dataset;
use allweather_core::train::{evaluate, train, TrainEvent, TrainState};
use allweather_core::{Error, Network};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "allweather", version, about = "All-in-one adverse weather image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write N synthetic clean/degraded PNG pairs plus a manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset directory; writes final.ckpt and log.txt into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint; log lines are appended.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop once this many optimizer steps have completed.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Dataset scored every train.eval_every steps.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Print `psnr=<p> ssim=<s> n=<k>` for a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Restore one PNG of any size.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Image { .. } => 2,
        Error::Checkpoint(_) => 3,
        _ => 1,
    }
}

/// Worker count for evaluation, from `TOOL_THREADS` or the machine.
fn threads() -> usize {
    std::env::var("TOOL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn load_model(ckpt: &Path) -> Result<(Network, Checkpoint), Error> {
    let ck = Checkpoint::load(ckpt)?;
    let net = Network::new(ck.model.clone())?;
    ck.validate(&net)?;
    Ok((net, ck))
}

fn cmd_synth(config: Option<&Path>, out: &Path, n: usize, seed: u64) -> Result<(), Error> {
    if n == 0 {
        return Err(Error::Config("n must be ≥ 1".into()));
    }
    let cfg = load_config(config)?;
    let samples = synth_dataset(n, &cfg.data.synth_config(), seed)?;
    write_dataset(out, &samples)?;
    println!("wrote {n} pairs to {}", out.display());
    Ok(())
}

struct TrainArgs<'a> {
    config: Option<&'a Path>,
    data: &'a Path,
    out: &'a Path,
    resume: Option<&'a Path>,
    seed: Option<u64>,
    stop_after: Option<usize>,
    eval_data: Option<&'a Path>,
}

fn cmd_train(a: TrainArgs<'_>) -> Result<(), Error> {
    let mut cfg = load_config(a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate()?;
    let net = Network::new(cfg.model.clone())?;
    let data = read_dataset(a.data)?;
    let eval_data = a.eval_data.map(read_dataset).transpose()?.unwrap_or_default();
    let state = match a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.validate(&net)?;
            if ck.seed != cfg.train.seed {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained with seed {}, config asks for {}",
                    ck.seed, cfg.train.seed
                )));
            }
            if ck.state.adam.m.is_empty() {
                return Err(Error::Checkpoint("checkpoint carries no optimizer state to resume".into()));
            }
            ck.state
        }
        None => TrainState::fresh(&net, cfg.train.seed)?,
    };
    fs::create_dir_all(a.out).map_err(|e| io_err(a.out, e))?;
    let log_path = a.out.join("log.txt");
    let log_file = if a.resume.is_some() {
        OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| io_err(&log_path, e))?;
    let mut log = LineWriter::new(log_file);
    let seed = cfg.train.seed;
    let model = cfg.model.clone();
    let state = train(&net, &cfg.train, &data, &eval_data, state, a.stop_after, |event| {
        match event {
            TrainEvent::Log(line) => writeln!(log, "{line}").map_err(|e| io_err(&log_path, e))?,
            TrainEvent::Checkpoint(state) => {
                let path = a.out.join(format!("step_{:06}.ckpt", state.step));
                Checkpoint::new(model.clone(), seed, state.clone()).save(&path)?;
            }
        }
        Ok(())
    })?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    let step = state.step;
    Checkpoint::new(cfg.model, seed, state).save(&a.out.join("final.ckpt"))?;
    println!("wrote {} at step {step}", a.out.join("final.ckpt").display());
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn cmd_eval(ckpt: &Path, data: &Path) -> Result<(), Error> {
    let (net, ck) = load_model(ckpt)?;
    let data = read_dataset(data)?;
    let report = evaluate(&net, &ck.state.params, &data, threads())?;
    println!("{report}");
    Ok(())
}

fn cmd_restore(ckpt: &Path, input: &Path, output: &Path) -> Result<(), Error> {
    let (net, ck) = load_model(ckpt)?;
    let image = read_png(input)?;
    let restored = net.restore(&image, &ck.state.params)?;
    write_png(output, &restored)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { config, out, n, seed } => cmd_synth(config.as_deref(), &out, n, seed),
        Command::Train {
            config,
            data,
            out,
            resume,
            seed,
            stop_after,
            eval_data,
        } => cmd_train(TrainArgs {
            config: config.as_deref(),
            data: &data,
            out: &out,
            resume: resume.as_deref(),
            seed,
            stop_after,
            eval_data: eval_data.as_deref(),
        }),
        Command::Eval { ckpt, data } => cmd_eval(&ckpt, &data),
        Command::Restore { ckpt, input, output } => cmd_restore(&ckpt, &input, &output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

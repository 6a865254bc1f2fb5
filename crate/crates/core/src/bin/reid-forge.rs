use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reid_forge::data::SynthConfig;
use reid_forge::error::{Error, Result};
use reid_forge::runner::{cmd_eval, cmd_heatmap, cmd_synth, cmd_train, load_config};

#[derive(Parser)]
#[command(name = "reid-forge", version, about = "Train and evaluate re-identification embeddings")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints plus a per-step loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` override applied after the config file (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank probe images against the gallery and write metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split seed; defaults to the one stored in the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate on the training identities (sanity check).
        #[arg(long)]
        on_train: bool,
    },
    /// Write a synthetic identity corpus with its manifest.
    Synth {
        #[arg(long, default_value_t = 16)]
        ids: usize,
        #[arg(long, default_value_t = 12)]
        images: usize,
        /// Square side length or `HxW`.
        #[arg(long, default_value = "64")]
        res: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Write a `<stem>.heat.pgm` activation map per image.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn parse_res(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config("--res", format!("expected N or HxW, got `{s}`"));
    let one = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
    match s.split_once('x') {
        Some((h, w)) => Ok((one(h)?, one(w)?)),
        None => one(s).map(|n| (n, n)),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, data, out, set, resume } => {
            let cfg = load_config(&config, &set)?;
            let ckpt = cmd_train(&cfg, &data, &out, resume.as_deref())?;
            println!("{}", ckpt.display());
        }
        Cmd::Eval { ckpt, data, seed, out, on_train } => {
            let res = cmd_eval(&ckpt, &data, seed, &out, on_train)?;
            print!("{}", res.report);
        }
        Cmd::Synth { ids, images, res, seed, out } => {
            let cfg = SynthConfig { n_ids: ids, imgs_per_id: images, resolution: parse_res(&res)?, seed };
            let m = cmd_synth(&cfg, &out)?;
            println!("{} images of {} identities in {}", m.len(), m.num_identities(), out.display());
        }
        Cmd::Heatmap { ckpt, files, out } => {
            for p in cmd_heatmap(&ckpt, &files, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("REID_FORGE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

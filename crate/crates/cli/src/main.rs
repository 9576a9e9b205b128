//! `doalab` command line: simulate, annotate, features, train, eval, report.
//!
//! Each command prints a JSON summary on stdout. Failures print
//! `{"kind": ..., "message": ...}` on stderr and exit with status 1
//! (2 for usage errors).

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use doalab::annotate::AnnotateOptions;
use doalab::experiment::{
    cmd_annotate, cmd_eval, cmd_features, cmd_report, cmd_simulate, cmd_train, AnnotateArgs, EvalArgs, ExperimentConfig,
    Split, TrainArgs,
};
use doalab::labels::LABEL_HOP_S;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "doalab", version, about = "Multi-speaker direction-of-arrival experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the simulated train/val/test sets and their manifests.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Turn a face-track file into 100 ms azimuth labels.
    Annotate {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
        /// Longest dropout in seconds bridged by interpolation.
        #[arg(long, default_value_t = 0.5)]
        gap_limit: f64,
        /// Seconds added to video timestamps.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        time_offset: f64,
        /// Pad or truncate to this many label frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Accept only these track ids (repeatable).
        #[arg(long = "track")]
        known_tracks: Vec<u32>,
    },
    /// Cache normalized log-mel features of one split.
    Features {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Defaults to `<data_dir>/features/<split>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured model variant.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint (or the references themselves) on one split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<run_dir>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Feed the reference labels through the metric path.
        #[arg(long)]
        passthrough: bool,
    },
    /// Summary table and timeline plots over evaluation directories.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Utterance id to plot; the first one otherwise.
        #[arg(long)]
        sample: Option<String>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn to_json<T: serde::Serialize>(v: &T) -> doalab::Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn run(command: Command) -> doalab::Result<Value> {
    let load = |p: &Path| ExperimentConfig::load(p);
    match command {
        Command::Simulate { config } => to_json(&cmd_simulate(&load(&config)?)?),
        Command::Annotate { tracks, intrinsics, out, fps, gap_limit, time_offset, frames, known_tracks } => {
            let options = AnnotateOptions {
                fps,
                gap_limit_s: gap_limit,
                time_offset_s: time_offset,
                known_tracks: (!known_tracks.is_empty()).then(|| known_tracks.into_iter().collect::<BTreeSet<_>>()),
            };
            let args = AnnotateArgs { tracks, intrinsics, out: out.clone(), options, hop_s: LABEL_HOP_S, n_frames: frames };
            let n = cmd_annotate(&args)?;
            Ok(json!({ "labels": out, "frames": n }))
        }
        Command::Features { config, split, out } => {
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| cfg.data_dir.join("features").join(split.name()));
            to_json(&cmd_features(&cfg.manifest_path(split), &out, &cfg.features)?)
        }
        Command::Train { config, resume } => to_json(&cmd_train(&load(&config)?, &TrainArgs { resume })?),
        Command::Eval { config, checkpoint, split, out, passthrough } => {
            let cfg = load(&config)?;
            let checkpoint = match (checkpoint, passthrough) {
                (Some(c), _) => Some(c),
                (None, false) => Some(cfg.run_dir.join("best.ckpt")),
                (None, true) => None,
            };
            to_json(&cmd_eval(&cfg, &EvalArgs { checkpoint, split, out_dir: out, passthrough })?)
        }
        Command::Report { out, sample, inputs } => to_json(&cmd_report(&inputs, &out, sample.as_deref())?),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "kind": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end(), 2),
    };
    match run(cli.command) {
        Ok(v) => {
            let text = serde_json::to_string_pretty(&v).expect("summaries serialize");
            // A closed stdout (e.g. `| head`) is not a failure of the command.
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}

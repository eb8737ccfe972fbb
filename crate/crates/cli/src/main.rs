//! `boundnet`: synthetic data, training, exit-scheduled inference and evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use boundnet_core::pipeline::{self, RunConfig};
use boundnet_core::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "boundnet",
    version,
    about = "Multi-exit temporal boundary detection on per-frame features",
    after_help = "Any configuration field can be set with its dotted name, e.g.\n  \
                  boundnet train --train.epochs 5 --model.detectors.0.exit_radius=2\n\
                  `--epochs N` is shorthand for `--train.epochs N`."
)]
struct Cli {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for data, initialization and batch order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-video inference.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory that relative paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write synthetic train and test feature files with annotations.
    GenData,
    /// Fit a model on the training split and save a checkpoint.
    Train,
    /// Run exit-scheduled inference over the test split.
    Infer,
    /// Score predictions against test annotations.
    Eval,
    /// Sweep the exit radius and record compute against accuracy.
    Sweep,
    /// Finite-difference gradient check on a miniature model.
    Gradcheck,
}

/// Splits `--dotted.name value` and `--dotted.name=value` pairs out of argv.
fn split_overrides(args: Vec<String>) -> std::result::Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let name = if name == "epochs" { "train.epochs".to_string() } else { name };
        if !name.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .filter(|v| !v.starts_with("--"))
                .ok_or_else(|| format!("--{name} needs a value"))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn load_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.with_overrides(overrides)
}

fn run(cli: &Cli, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(cli, overrides)?;
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::GenData => {
            pipeline::cmd_gen(&cfg, out)?;
            println!(
                "wrote {} train and {} test videos under {}",
                cfg.data.train_videos,
                cfg.data.test_videos,
                out.display()
            );
        }
        Command::Train => {
            let curve = pipeline::cmd_train(&cfg, out)?;
            boundnet_core::io::write_json(&out.join("config.json"), &cfg)?;
            match curve.last() {
                Some(last) => println!("trained {} epochs, final loss {:.6}", curve.len(), last.total),
                None => println!("saved initial weights (0 epochs)"),
            }
        }
        Command::Infer => {
            let s = pipeline::cmd_infer(&cfg, out)?;
            println!(
                "{} videos, {:.0} MACs/frame ({:.1}% of static)",
                s.videos,
                s.mean_macs_per_frame,
                100.0 * s.mean_macs_per_frame / s.static_macs_per_frame as f64
            );
        }
        Command::Eval => {
            let r = pipeline::cmd_eval(&cfg, out)?;
            println!("F1@0.05 {:.4}  avg F1 {:.4}", r.f1_at(0.05), r.avg_f1);
        }
        Command::Sweep => {
            let (rows, reference) = pipeline::cmd_sweep(&cfg, out)?;
            println!(
                "static: {} MACs/frame, F1@0.05 {:.4}",
                reference.static_macs_per_frame, reference.static_f1[0]
            );
            for r in rows {
                println!(
                    "t_mu {:>2}: {:.0} MACs/frame, F1@0.05 {:.4}",
                    r.radius, r.mean_macs_per_frame, r.f1[0]
                );
            }
        }
        Command::Gradcheck => {
            let report = pipeline::cmd_gradcheck(&cfg, Some(out))?;
            println!("{} blocks passed", report.blocks.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (argv, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}

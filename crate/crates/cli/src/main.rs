use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use autolabel_core::eval::EvalConfig;
use autolabel_core::pipeline::{autolabel, evaluate, PipelineConfig};
use autolabel_core::synth::{generate_scene, write_bundle, SceneSpec};
use autolabel_core::Registry;
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "autolabel", version, about = "Monocular 3D vehicle auto-labelling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label every frame of a sequence directory.
    Autolabel {
        sequence_dir: PathBuf,
        /// Pipeline config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Label output directory; overrides `run.output`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Worker threads (0 = all cores).
        #[arg(long)]
        parallelism: Option<usize>,
        /// Emit labels in canonical object space.
        #[arg(long)]
        canonical: bool,
        /// Canonical focal length in pixels.
        #[arg(long)]
        canonical_focal: Option<f64>,
        /// Motion classifier by registered name.
        #[arg(long)]
        classifier: Option<String>,
        /// Yaw criterion by registered name.
        #[arg(long)]
        criterion: Option<String>,
        /// Timing report path; defaults to `timing.json` beside the labels.
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Score predicted labels against ground truth.
    Evaluate {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Pipeline config (TOML); only the `eval` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON report path; defaults to `eval.json` in the prediction directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render a synthetic scene from a JSON spec.
    Synth { spec: PathBuf, out_dir: PathBuf },
    /// Print the default config.
    Config,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PipelineConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Autolabel {
            sequence_dir,
            config,
            output,
            parallelism,
            canonical,
            canonical_focal,
            classifier,
            criterion,
            timing,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(n) = parallelism {
                cfg.run.parallelism = n;
            }
            cfg.run.canonical |= canonical;
            if let Some(f) = canonical_focal {
                cfg.cos.canonical_focal = f;
            }
            if let Some(c) = classifier {
                cfg.run.classifier = c;
            }
            if let Some(c) = criterion {
                cfg.boxfit.criterion = c;
            }
            let Some(out_dir) = output.or_else(|| cfg.run.output.clone()) else {
                bail!("no output directory: pass --output or set run.output");
            };
            let result = autolabel(&sequence_dir, &out_dir, &cfg, &Registry::default())
                .with_context(|| format!("labelling {}", sequence_dir.display()))?;
            let timing_path = timing.unwrap_or_else(|| out_dir.join("timing.json"));
            write(&timing_path, &result.timing.to_json())?;
            let labels: usize = result.frames.iter().map(|(_, l)| l.len()).sum();
            info!("{} labels over {} frames", labels, result.frames.len());
            println!("{}", result.timing);
        }
        Command::Evaluate {
            pred_dir,
            gt_dir,
            config,
            report,
        } => {
            let cfg: EvalConfig = load_config(config.as_deref())?.eval;
            let rep = evaluate(&pred_dir, &gt_dir, &cfg)?;
            print!("{rep}");
            write(&report.unwrap_or_else(|| pred_dir.join("eval.json")), &rep.to_json())?;
        }
        Command::Synth { spec, out_dir } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec = SceneSpec::from_json(&text)?;
            let bundle = generate_scene(&spec)?;
            write_bundle(&bundle, &out_dir)?;
            info!("wrote {} frames to {}", bundle.sequence.len(), out_dir.display());
        }
        Command::Config => print!("{}", PipelineConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}

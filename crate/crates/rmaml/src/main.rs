use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rmaml::config::{self, ExperimentConfig};
use rmaml::{commands, RunError};
use rmaml_core::metalearn::{FineTuneMode, Scope};

#[derive(Parser)]
#[command(name = "rmaml", version, about = "Robust meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML). Preset defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset to start from when no config file is given.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FtMode {
    Standard,
    Adversarial,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Full,
    #[value(name = "head_only")]
    HeadOnly,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meta-train and write checkpoint, log and config echo.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune on meta-test tasks and write an accuracy-vs-ε report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated ε grid in pixel levels, e.g. 0,2,4,6,8,10.
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long, value_enum)]
        ft_mode: Option<FtMode>,
        #[arg(long, value_enum)]
        scope: Option<ScopeArg>,
        /// Number of test tasks.
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Maximize one encoder output over the pixel box.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file holding the seed image.
        #[arg(long)]
        image: PathBuf,
        /// Image number within the file (class-major).
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        neuron: usize,
    },
    /// Pack a directory of per-class `.raw` files into a dataset file.
    ConvertDataset {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Image size as HxWxC, e.g. 16x16x1.
        #[arg(long, value_parser = parse_dims)]
        dims: (usize, usize, usize),
        #[arg(long)]
        samples_per_class: Option<usize>,
    },
    /// Write the synthetic dataset described by a configuration.
    SynthDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<_> = s.split('x').map(|p| p.trim().parse::<usize>()).collect();
    match parts.as_slice() {
        [Ok(h), Ok(w), Ok(c)] => Ok((*h, *w, *c)),
        _ => Err(format!("expected HxWxC, got `{s}`")),
    }
}

fn resolve(c: &Common) -> rmaml::Result<ExperimentConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(_), Some(_)) => {
            return Err(RunError::Config("--preset: give either --config or --preset, not both".into()))
        }
        (Some(p), None) => config::load(p)?,
        (None, Some(name)) => config::preset(name)?,
        (None, None) => config::preset("maml")?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.output {
        cfg.output_dir = o.clone();
    }
    if c.threads.is_some() {
        cfg.threads = c.threads;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> rmaml::Result<()> {
    match cli.cmd {
        Cmd::Train { common } => {
            let cfg = resolve(&common)?;
            let t = commands::train(&cfg)?;
            commands::print_epochs(&t, cfg.meta.batches_per_epoch);
            println!("wrote {}", cfg.output_dir.join(commands::CHECKPOINT_FILE).display());
        }
        Cmd::Eval { common, checkpoint, eps, ft_mode, scope, tasks } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = eps {
                cfg.eval.epsilons = e;
            }
            if let Some(m) = ft_mode {
                cfg.eval.ft_mode = match m {
                    FtMode::Standard => FineTuneMode::Standard,
                    FtMode::Adversarial => FineTuneMode::Adversarial,
                };
            }
            if let Some(s) = scope {
                cfg.eval.scope = Some(match s {
                    ScopeArg::Full => Scope::Full,
                    ScopeArg::HeadOnly => Scope::HeadOnly,
                });
            }
            if let Some(n) = tasks {
                cfg.eval.tasks = n;
            }
            let (rep, path) = commands::eval(&cfg, &checkpoint)?;
            print!("{}", rmaml::report::to_csv(&rep));
            println!("wrote {}", path.display());
        }
        Cmd::Invert { common, checkpoint, image, index, neuron } => {
            let cfg = resolve(&common)?;
            let r = commands::invert(&cfg, &checkpoint, &image, index, neuron)?;
            let first = r.objective_trace.first().copied().unwrap_or(f64::NAN);
            let last = r.objective_trace.last().copied().unwrap_or(f64::NAN);
            println!("neuron {neuron}: activation {first:.4} -> {last:.4}");
            println!("wrote {}", cfg.output_dir.display());
        }
        Cmd::ConvertDataset { input, output, dims, samples_per_class } => {
            let d = commands::convert_dataset(&input, dims, samples_per_class, &output)?;
            println!("wrote {} ({} classes x {} samples)", output.display(), d.classes(), d.samples_per_class());
        }
        Cmd::SynthDataset { common, out } => {
            let cfg = resolve(&common)?;
            let d = commands::synth_dataset(&cfg, &out)?;
            println!("wrote {} ({} classes x {} samples)", out.display(), d.classes(), d.samples_per_class());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use bridgekit::vqvae::Stage;
use bridgekit_cli::pipeline::{self, Context, InferenceOverrides, TrainOptions};
use bridgekit_cli::{CliError, CliResult, RunConfig, RunDir};
use clap::{Args, Parser, Subcommand};

/// Latent diffusion-bridge shape completion on voxel grids.
#[derive(Parser)]
#[command(name = "bridgekit", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run directory holding config, corpus, checkpoints, logs and reports.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Configuration file; defaults to <run-dir>/config.json.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set bridge.steps=200 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Accept artifacts written under a different configuration.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Args)]
struct Inference {
    /// Inference seed (defaults to the configured seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress sampler noise.
    #[arg(long, conflicts_with = "stochastic")]
    deterministic: bool,
    /// Keep sampler noise.
    #[arg(long)]
    stochastic: bool,
}

impl Inference {
    fn overrides(&self) -> InferenceOverrides {
        InferenceOverrides {
            seed: self.seed,
            deterministic: match (self.deterministic, self.stochastic) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the effective configuration into the run directory.
    Init,
    /// Generate the synthetic corpus and its view features.
    Gen,
    /// Train the VQ-VAE: stage 1 without, stage 2 with depth fusion.
    TrainVqvae {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: u32,
        /// Stop after this many steps; rerun to resume.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Train the partial encoder and bridge denoiser.
    TrainBridge {
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Complete one partial scan, or every corpus scan.
    Complete {
        #[arg(long, requires = "output")]
        input: Option<PathBuf>,
        #[arg(long, requires = "input")]
        output: Option<PathBuf>,
        #[command(flatten)]
        inference: Inference,
    },
    /// Score completions against the copy-partial baseline.
    Eval {
        /// Report path (defaults to <run-dir>/eval/report.json).
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        inference: Inference,
    },
    /// Export OBJ meshes: one grid file, or every completion of the run.
    Mesh {
        #[arg(long, requires = "output")]
        input: Option<PathBuf>,
        #[arg(long, requires = "input")]
        output: Option<PathBuf>,
        /// Iso level (defaults to 1 for unsigned and 0 for signed grids).
        #[arg(long, requires = "input")]
        iso: Option<f32>,
    },
}

fn resolve_config(g: &Global) -> CliResult<RunConfig> {
    let recorded = RunDir::new(&g.run_dir).config_path();
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None if recorded.exists() => RunConfig::load(&recorded)?,
        None => {
            return Err(CliError::Config(format!(
                "no configuration: pass --config or create {} with `bridgekit init`",
                recorded.display()
            )))
        }
    };
    cfg.apply_env()?;
    cfg.apply_overrides(&g.sets)?;
    cfg.validate()?;
    Ok(cfg)
}

fn open(g: &Global, allow_defaults: bool) -> CliResult<Context> {
    let cfg = match resolve_config(g) {
        Err(CliError::Config(_))
            if allow_defaults && g.config.is_none() && !RunDir::new(&g.run_dir).config_path().exists() =>
        {
            let mut c = RunConfig::default();
            c.apply_env()?;
            c.apply_overrides(&g.sets)?;
            c.validate()?;
            c
        }
        other => other?,
    };
    Context::open(&g.run_dir, cfg, g.force)
}

fn print_outcome(what: &str, o: &pipeline::StageOutcome) {
    if o.finished {
        println!("{what}: finished at step {}", o.step);
    } else {
        println!("{what}: paused at step {} of {}", o.step, o.end);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Init => {
            let ctx = open(g, true)?;
            println!(
                "{} (fingerprint {})",
                ctx.run.config_path().display(),
                ctx.fingerprint()
            );
        }
        Command::Gen => {
            let ctx = open(g, false)?;
            let manifest = pipeline::gen(&ctx)?;
            println!("wrote {}", manifest.display());
        }
        Command::TrainVqvae { stage, max_steps } => {
            let ctx = open(g, false)?;
            let stage = Stage::from_number(*stage).map_err(|e| CliError::Config(e.to_string()))?;
            let o = pipeline::train_vqvae(&ctx, stage, TrainOptions { max_steps: *max_steps })?;
            print_outcome(&format!("vqvae stage {}", stage.number()), &o);
        }
        Command::TrainBridge { max_steps } => {
            let ctx = open(g, false)?;
            let o = pipeline::train_bridge(&ctx, TrainOptions { max_steps: *max_steps })?;
            print_outcome("bridge", &o);
        }
        Command::Complete {
            input,
            output,
            inference,
        } => {
            let ctx = open(g, false)?;
            let io = input.as_deref().zip(output.as_deref());
            let written = pipeline::complete(&ctx, inference.overrides(), io)?;
            println!("wrote {} grid(s)", written.len());
        }
        Command::Eval { output, inference } => {
            let ctx = open(g, false)?;
            let r = pipeline::eval(&ctx, inference.overrides(), output.as_deref())?;
            let m = r.means;
            println!(
                "model     l1 {:.4}  cd {:.4}  iou {:.4}  f1 {:.4}",
                m.l1, m.cd, m.iou, m.f1
            );
            if let Some(b) = &r.baseline {
                let m = b.means;
                println!(
                    "{:<9} l1 {:.4}  cd {:.4}  iou {:.4}  f1 {:.4}",
                    b.method, m.l1, m.cd, m.iou, m.f1
                );
            }
        }
        Command::Mesh { input, output, iso } => match (input, output) {
            (Some(i), Some(o)) => {
                let m = pipeline::mesh_file(i, o, *iso)?;
                println!(
                    "{}: {} vertices, {} triangles",
                    o.display(),
                    m.vertices.len(),
                    m.triangles.len()
                );
            }
            _ => {
                let ctx = open(g, false)?;
                let written = pipeline::mesh_run(&ctx)?;
                println!("wrote {} mesh(es) to {}", written.len(), ctx.run.meshes_dir().display());
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bridgekit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

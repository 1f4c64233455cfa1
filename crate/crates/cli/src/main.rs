use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use dragedit_core::backend::{load_backend, BackendConfig, Denoiser};
use dragedit_core::bank::{read_bank, write_bank};
use dragedit_core::eval::evaluate_dir;
use dragedit_core::guidance::{GuidanceConfig, WeightOverrides};
use dragedit_core::image::RgbImage;
use dragedit_core::pipeline::{self, Timings};
use dragedit_core::sampler::{NoObserver, StepRecord};
use dragedit_core::tasks::EditRequest;
use dragedit_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "dragedit", version, about = "Training-free diffusion image editing")]
struct Cli {
    /// Built-in profile name (`toy`, `pretrained`) or a TOML file with a
    /// `[backend]` table.
    #[arg(long, global = true, default_value = "toy")]
    backend_profile: String,

    /// Seed for the toy backend's weights.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert an image (and optional reference) into a memory bank.
    Invert {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Bank directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Run an edit from a bank and an edit request.
    Edit {
        #[arg(long)]
        bank: PathBuf,
        /// Edit request JSON (task kind, raw masks, offsets or points).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file whose `[guidance]` table overrides the task defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Classifier-free guidance scale [task default: 5].
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Guided leading steps [task default: 30].
        #[arg(long)]
        n_gated: Option<usize>,
        /// Energy gradient step size [default: per task].
        #[arg(long)]
        eta: Option<f64>,
        /// Write the per-step log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Sample the bank back without editing.
    Reconstruct {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Mean point distance of edited points to their targets.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
    /// Also write the JSON report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    guidance: WeightOverrides,
}

#[derive(Serialize)]
struct RunReport {
    v: u32,
    command: &'static str,
    steps: usize,
    #[serde(flatten)]
    timings: Timings,
    #[serde(skip_serializing_if = "Option::is_none")]
    gradient_evaluations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<GuidanceConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_energy: Option<f64>,
    output: PathBuf,
}

impl RunReport {
    fn table(&self) -> String {
        let mut out = format!("{:<22} {}\n", "command", self.command);
        out += &format!("{:<22} {}\n", "steps", self.steps);
        out += &format!("{:<22} {:.3}\n", "preparing_seconds", self.timings.preparing_seconds);
        out += &format!("{:<22} {:.3}\n", "inference_seconds", self.timings.inference_seconds);
        if let Some(n) = self.gradient_evaluations {
            out += &format!("{:<22} {n}\n", "gradient_evaluations");
        }
        if let Some(e) = self.final_energy {
            out += &format!("{:<22} {e:.6}\n", "final_energy");
        }
        out += &format!("{:<22} {}\n", "output", self.output.display());
        out
    }
}

fn emit<T: Serialize>(args: &ReportArgs, report: &T, table: String) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    if let Some(path) = &args.report {
        fs::write(path, &json)?;
    }
    if args.json {
        println!("{json}");
    } else {
        print!("{table}");
    }
    Ok(())
}

fn backend(cli: &Cli) -> Result<Arc<dyn Denoiser>> {
    let mut cfg = BackendConfig::resolve(&cli.backend_profile)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    load_backend(&cfg)
}

fn read_file(path: &Path, field: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::contract(field, format!("{}: {e}", path.display())))
}

fn load_image(path: &Path, field: &str) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::contract(field, format!("{}: {e}", path.display())))?;
    RgbImage::from_png(&bytes)
}

fn write_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text += &serde_json::to_string(r)?;
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Invert {
            image,
            reference,
            out,
            prompt,
            steps,
            report,
        } => {
            let backend = backend(cli)?;
            let image = load_image(image, "image")?;
            let reference = reference.as_deref().map(|p| load_image(p, "reference")).transpose()?;
            let prepared = pipeline::prepare(backend.as_ref(), *steps, &image, reference.as_ref(), prompt)?;
            write_bank(&prepared.bank, out)?;
            let r = RunReport {
                v: 1,
                command: "invert",
                steps: *steps,
                timings: Timings {
                    preparing_seconds: prepared.preparing_seconds,
                    inference_seconds: 0.0,
                },
                gradient_evaluations: None,
                config: None,
                final_energy: None,
                output: out.clone(),
            };
            emit(report, &r, r.table())
        }
        Command::Edit {
            bank,
            spec,
            out,
            config,
            cfg_scale,
            n_gated,
            eta,
            log,
            report,
        } => {
            let backend = backend(cli)?;
            let request = EditRequest::from_json(&read_file(spec, "spec")?)?;
            let spec = request.build()?;
            let file: ConfigFile = match config {
                Some(p) => toml::from_str(&read_file(p, "config")?)
                    .map_err(|e| Error::contract("config", e.to_string()))?,
                None => ConfigFile::default(),
            };
            let flags = WeightOverrides {
                cfg_scale: *cfg_scale,
                n_gated: *n_gated,
                eta: *eta,
                ..Default::default()
            };
            let cfg = GuidanceConfig::resolve(&spec, &file.guidance, &flags)?;
            let bank = read_bank(bank)?;
            let edited = pipeline::edit(backend.as_ref(), &bank, &spec, &cfg, &mut NoObserver)?;
            edited.image.save(out)?;
            if let Some(path) = log {
                write_log(path, &edited.output.state.step_log)?;
            }
            let state = &edited.output.state;
            let r = RunReport {
                v: 1,
                command: "edit",
                steps: bank.steps(),
                timings: Timings {
                    preparing_seconds: 0.0,
                    inference_seconds: edited.inference_seconds,
                },
                gradient_evaluations: Some(state.gradient_evaluations()),
                final_energy: state.step_log.iter().rev().find_map(|s| s.total_energy),
                config: Some(edited.config),
                output: out.clone(),
            };
            emit(report, &r, r.table())
        }
        Command::Reconstruct { bank, out, report } => {
            let backend = backend(cli)?;
            let bank = read_bank(bank)?;
            let rec = pipeline::reconstruct(backend.as_ref(), &bank, &mut NoObserver)?;
            rec.image.save(out)?;
            let r = RunReport {
                v: 1,
                command: "reconstruct",
                steps: bank.steps(),
                timings: Timings {
                    preparing_seconds: 0.0,
                    inference_seconds: rec.inference_seconds,
                },
                gradient_evaluations: Some(0),
                config: None,
                final_energy: None,
                output: out.clone(),
            };
            emit(report, &r, r.table())
        }
        Command::Eval {
            results,
            targets,
            report,
        } => {
            let r = evaluate_dir(results, targets)?;
            emit(report, &r, r.table())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Contract { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sprec_core::catalog::sample_interactions;
use sprec_core::harness::{emit_report, run_experiment, ExperimentKind, ExperimentSpec, RunOutcome};
use sprec_core::{Error, Result};

/// Exit code of `verify` when a check fails.
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "sprec", version, about = "Tabular SFT / DPO / self-play preference tuning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Built-in preset to start from.
    #[arg(long)]
    preset: Option<String>,
    /// Flat key = value configuration file, applied after the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied last, e.g. `--set train.beta=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, default_preset: Option<&str>) -> Result<ExperimentSpec> {
        let mut spec = match self.preset.as_deref().or(default_preset) {
            Some(p) => ExperimentSpec::preset(p)?,
            None => ExperimentSpec::default(),
        };
        if let Some(path) = &self.config {
            if !path.is_file() {
                return Err(Error::MissingInput(path.clone()));
            }
            spec.apply_kv(&fs::read_to_string(path)?)?;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Invalid {
                    field: o.clone(),
                    reason: "expected KEY=VALUE".into(),
                })?;
            spec.set(k, v)?;
        }
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a catalog and optionally sample interactions from it.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Where to write the catalog JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also write this many sampled positives as CSV (context,item).
        #[arg(long)]
        interactions: Option<usize>,
        #[arg(long, requires = "interactions")]
        interactions_out: Option<PathBuf>,
    },
    /// Run a single arm of an experiment.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Arm to run; defaults to the last arm of the spec.
        #[arg(long)]
        arm: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the closed-form optima numerically. Exits with 3 on a failed check.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every arm of an experiment (presets: fig1, ablation-negatives,
    /// rho-sweep, nneg-sweep, beta-sweep) and emit its report.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Consolidate a finished experiment directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Synth {
            cfg,
            out,
            interactions,
            interactions_out,
        } => {
            let spec = cfg.resolve(None)?;
            let catalog = spec.catalog.build()?;
            fs::write(&out, catalog.to_json()?)?;
            if let (Some(n), Some(path)) = (interactions, interactions_out) {
                let set = sample_interactions(&catalog, n, spec.seed)?;
                let mut w = csv::Writer::from_path(path)?;
                w.write_record(["context", "item"])?;
                for (c, i) in &set.records {
                    w.write_record([c.to_string(), i.to_string()])?;
                }
                w.flush()?;
            }
            Ok(0)
        }
        Command::Train { cfg, arm, out } => {
            let mut spec = cfg.resolve(Some("fig1"))?;
            if spec.kind != ExperimentKind::Train {
                return Err(Error::Invalid {
                    field: "preset".into(),
                    reason: "train needs a training preset".into(),
                });
            }
            let name = match arm {
                Some(a) => a,
                None => spec.arms.last().map(|a| a.name.clone()).unwrap_or_default(),
            };
            spec.arms.retain(|a| a.name == name);
            if spec.arms.is_empty() {
                return Err(Error::Invalid {
                    field: "arm".into(),
                    reason: format!("no arm named `{name}`"),
                });
            }
            if let Some(o) = out {
                spec.output_dir = o;
            }
            run_experiment(&spec)?;
            println!("{}", spec.output_dir.display());
            Ok(0)
        }
        Command::Verify { cfg, out } => {
            let mut spec = cfg.resolve(Some("verify-theorem"))?;
            if let Some(o) = out {
                spec.output_dir = o;
            }
            let outcome = run_experiment(&spec)?;
            if let RunOutcome::Verify(report) = &outcome {
                for r in &report.records {
                    println!(
                        "{:<13} instance={} beta={} ref={} error={:.3e} threshold={:e} {}",
                        r.kind,
                        r.instance,
                        r.beta.map_or("-".into(), |b| b.to_string()),
                        r.reference,
                        r.error,
                        r.threshold,
                        if r.pass { "PASS" } else { "FAIL" }
                    );
                }
            }
            Ok(if outcome.passed() { 0 } else { EXIT_CHECK_FAILED })
        }
        Command::Sweep { cfg, out } => {
            let mut spec = cfg.resolve(Some("fig1"))?;
            if let Some(o) = out {
                spec.output_dir = o;
            }
            let outcome = run_experiment(&spec)?;
            if spec.kind == ExperimentKind::Train {
                emit_report(&spec.output_dir)?;
            }
            println!("{}", spec.output_dir.display());
            Ok(if outcome.passed() { 0 } else { EXIT_CHECK_FAILED })
        }
        Command::Report { dir } => {
            let report = emit_report(&dir)?;
            println!("{} rows -> {}", report.rows.len(), dir.join("report.csv").display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

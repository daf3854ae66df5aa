//! Experiment execution and on-disk layout.
//!
//! A training experiment directory contains:
//!
//! ```text
//! config.json                         the resolved ExperimentSpec
//! catalog.json                        the ItemCatalog
//! metrics.csv                         one row per arm x replication x snapshot
//! checkpoints/<arm>/rep<r>/<t>_<phase>.json
//! summary.json                        per-arm means over replications
//! ```
//!
//! A verification directory holds `config.json`, `verification.json` and
//! `summary.json`. Outputs are written to a sibling staging directory that
//! is renamed into place on success and deleted on failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spec::{ArmKind, ExperimentKind, ExperimentSpec};
use super::verify::run_verification;
use crate::catalog::{sample_interactions, InteractionSet, ItemCatalog};
use crate::metrics::csv_header;
use crate::policy::Policy;
use crate::rng::derive_seed;
use crate::theory::VerificationReport;
use crate::training::{sprec_run, train_dpo_baseline, train_sft_only, Trajectory};
use crate::{Error, Result};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "SPREC_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeans {
    pub iteration: usize,
    pub phase: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub kind: ArmKind,
    pub snapshots: Vec<SnapshotMeans>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub replications: usize,
    pub arms: Vec<ArmSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub experiment: String,
    pub checks: usize,
    pub passed: usize,
    pub all_pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Train(RunSummary),
    Verify(VerificationReport),
}

impl RunOutcome {
    /// False only for a verification run with a failing check.
    pub fn passed(&self) -> bool {
        match self {
            Self::Train(_) => true,
            Self::Verify(r) => r.all_pass(),
        }
    }
}

/// Data shared by every arm of one replication.
pub struct Replication {
    pub index: usize,
    pub train: InteractionSet,
    pub validation: InteractionSet,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Replication {
    pub fn new(spec: &ExperimentSpec, catalog: &ItemCatalog, index: usize) -> Result<Self> {
        let rep = derive_seed(spec.seed, &[index as u64]);
        Ok(Self {
            index,
            train: sample_interactions(catalog, spec.n_train, derive_seed(rep, &[1]))?,
            validation: sample_interactions(catalog, spec.n_validation, derive_seed(rep, &[2]))?,
            train_seed: derive_seed(rep, &[3]),
            eval_seed: derive_seed(rep, &[4]),
        })
    }
}

/// Runs one arm on one replication, with metrics attached to every
/// snapshot. Every arm of a replication sees the same data and seeds.
pub fn run_arm(spec: &ExperimentSpec, arm: usize, catalog: &ItemCatalog, rep: &Replication) -> Result<Trajectory> {
    let a = &spec.arms[arm];
    let mut cfg = a.train_config(&spec.train)?;
    cfg.seed = rep.train_seed;
    let init = Policy::uniform(catalog.n_contexts, catalog.n_items);
    let mut traj = match a.kind {
        ArmKind::SftOnly => train_sft_only(&init, &rep.train, &cfg)?,
        ArmKind::Dpo => train_dpo_baseline(&init, &rep.train, &cfg)?,
        ArmKind::Sprec => sprec_run(&init, &rep.train, &cfg)?,
    };
    let evaluator = crate::metrics::Evaluator {
        seed: rep.eval_seed,
        ..spec.eval.clone()
    };
    traj.evaluate(&evaluator, catalog, &rep.validation, &rep.train)?;
    Ok(traj)
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid(WORKERS_ENV, format!("expected a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::invalid(WORKERS_ENV, e.to_string()))
}

fn staging_path(out: &Path) -> Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::invalid("output_dir", "must name a directory"))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Ok(parent.join(format!(".{}.staging-{}", name.to_string_lossy(), std::process::id())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Formats a metric value; `f64`'s `Display` is the shortest string that
/// parses back to the same bits.
pub(crate) fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Runs every arm x replication of a spec and writes its artifacts.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunOutcome> {
    spec.validate()?;
    let out = &spec.output_dir;
    if out.exists() && (!out.is_dir() || fs::read_dir(out)?.next().is_some()) {
        return Err(Error::invalid("output_dir", format!("{} exists and is not empty", out.display())));
    }
    let staging = staging_path(out)?;
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let result = worker_pool().and_then(|pool| pool.install(|| write_outputs(spec, &staging)));
    match result {
        Ok(outcome) => {
            if out.exists() {
                fs::remove_dir(out)?;
            }
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::rename(&staging, out)?;
            Ok(outcome)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn write_outputs(spec: &ExperimentSpec, dir: &Path) -> Result<RunOutcome> {
    write_json(&dir.join("config.json"), spec)?;
    match spec.kind {
        ExperimentKind::Verify => {
            let report = run_verification(spec)?;
            fs::write(dir.join("verification.json"), report.to_json()?)?;
            let passed = report.records.iter().filter(|r| r.pass).count();
            write_json(
                &dir.join("summary.json"),
                &VerifySummary {
                    experiment: spec.name.clone(),
                    checks: report.records.len(),
                    passed,
                    all_pass: report.all_pass(),
                },
            )?;
            Ok(RunOutcome::Verify(report))
        }
        ExperimentKind::Train => Ok(RunOutcome::Train(write_training(spec, dir)?)),
    }
}

fn write_training(spec: &ExperimentSpec, dir: &Path) -> Result<RunSummary> {
    let catalog = spec.catalog.build()?;
    fs::write(dir.join("catalog.json"), catalog.to_json()?)?;
    let reps: Vec<Replication> = (0..spec.replications)
        .into_par_iter()
        .map(|r| Replication::new(spec, &catalog, r))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..spec.arms.len())
        .flat_map(|a| (0..spec.replications).map(move |r| (a, r)))
        .collect();
    let trajectories: Vec<Trajectory> = jobs
        .par_iter()
        .map(|&(a, r)| run_arm(spec, a, &catalog, &reps[r]))
        .collect::<Result<_>>()?;

    let mut csv = csv::Writer::from_path(dir.join("metrics.csv"))?;
    csv.write_record(csv_header(catalog.n_groups))?;
    for (&(a, r), traj) in jobs.iter().zip(&trajectories) {
        let arm = &spec.arms[a].name;
        let ckpt = dir.join("checkpoints").join(arm).join(format!("rep{r}"));
        fs::create_dir_all(&ckpt)?;
        for (snap, m) in traj.snapshots.iter().zip(&traj.metrics) {
            fs::write(
                ckpt.join(format!("{}_{}.json", snap.iteration, snap.phase.as_str())),
                snap.policy.to_json()?,
            )?;
            let mut row = vec![arm.clone(), snap.iteration.to_string(), snap.phase.as_str().to_string()];
            row.extend(m.csv_values().into_iter().map(fmt_value));
            csv.write_record(&row)?;
        }
    }
    csv.flush()?;

    let summary = summarize(spec, &jobs, &trajectories, catalog.n_groups);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn summarize(spec: &ExperimentSpec, jobs: &[(usize, usize)], trajectories: &[Trajectory], n_groups: usize) -> RunSummary {
    let names: Vec<String> = csv_header(n_groups).into_iter().skip(3).collect();
    let arms = spec
        .arms
        .iter()
        .enumerate()
        .map(|(a, arm)| {
            let runs: Vec<&Trajectory> = jobs
                .iter()
                .zip(trajectories)
                .filter(|((ja, _), _)| *ja == a)
                .map(|(_, t)| t)
                .collect();
            let first = runs[0];
            let snapshots = first
                .snapshots
                .iter()
                .enumerate()
                .map(|(i, snap)| {
                    let rows: Vec<Vec<f64>> = runs.iter().map(|t| t.metrics[i].csv_values()).collect();
                    let metrics = names
                        .iter()
                        .enumerate()
                        .map(|(j, name)| {
                            let sum: f64 = rows.iter().map(|r| r[j]).sum();
                            (name.clone(), sum / rows.len() as f64)
                        })
                        .collect();
                    SnapshotMeans {
                        iteration: snap.iteration,
                        phase: snap.phase.as_str().into(),
                        metrics,
                    }
                })
                .collect();
            ArmSummary {
                arm: arm.name.clone(),
                kind: arm.kind,
                snapshots,
            }
        })
        .collect();
    RunSummary {
        experiment: spec.name.clone(),
        replications: spec.replications,
        arms,
    }
}

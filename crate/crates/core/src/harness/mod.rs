//! Experiment specs, orchestration, verification runs and reports.

mod report;
mod run;
mod spec;
mod verify;

pub use report::{build_report, emit_report, read_metric_means, ArmFinal, Report, ReportRow, REFERENCE_ARM};
pub use run::{
    run_arm, run_experiment, ArmSummary, Replication, RunOutcome, RunSummary, SnapshotMeans,
    VerifySummary, WORKERS_ENV,
};
pub use spec::{parse_kv, ArmKind, ArmSpec, ExperimentKind, ExperimentSpec, VerifySpec, PRESETS};
pub use verify::{
    random_distribution, run_verification, verify_collapse, verify_policies, verify_rewards, COLLAPSE_THRESHOLD,
    POLICY_TV_THRESHOLD, REWARD_ABS_THRESHOLD,
};

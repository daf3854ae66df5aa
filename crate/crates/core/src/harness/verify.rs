//! Numerical checks of the closed-form optima.

use rand::Rng;
use rayon::prelude::*;

use super::spec::ExperimentSpec;
use crate::catalog::CatalogParams;
use crate::metrics::total_variation;
use crate::numeric::max_abs;
use crate::rng::{derive_seed, rng_from_seed};
use crate::theory::{
    beta_sharpening_curve, closed_form_optimal_policy, closed_form_optimal_reward, exact_bt_reward_optimize,
    exact_dpo_optimize, OptConfig, VerificationRecord, VerificationReport,
};
use crate::Result;

pub const POLICY_TV_THRESHOLD: f64 = 1e-3;
pub const REWARD_ABS_THRESHOLD: f64 = 1e-4;
pub const COLLAPSE_THRESHOLD: f64 = 0.999;

/// A random strictly positive distribution with log-weights uniform on
/// `[-1.5, 1.5]`.
pub fn random_distribution(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5f64..1.5).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct PolicyCase {
    instance: usize,
    beta: f64,
    random_ref: bool,
    reference: Vec<f64>,
    p: Vec<f64>,
}

fn policy_cases(spec: &ExperimentSpec) -> Vec<PolicyCase> {
    let n = spec.verify.n_items;
    let mut cases = Vec::new();
    for instance in 0..spec.verify.instances {
        let mut rng = rng_from_seed(derive_seed(spec.seed, &[1, instance as u64]));
        let p = random_distribution(n, &mut rng);
        let random_ref = random_distribution(n, &mut rng);
        for &beta in &spec.verify.betas {
            for random in [false, true] {
                cases.push(PolicyCase {
                    instance,
                    beta,
                    random_ref: random,
                    reference: if random { random_ref.clone() } else { vec![1.0 / n as f64; n] },
                    p: p.clone(),
                });
            }
        }
    }
    cases
}

/// Fits the exact DPO objective (uniform negatives) for every instance, β and
/// reference, and compares with the closed form.
pub fn verify_policies(spec: &ExperimentSpec) -> Result<Vec<VerificationRecord>> {
    let n = spec.verify.n_items;
    let q = vec![1.0 / n as f64; n];
    policy_cases(spec)
        .into_par_iter()
        .map(|c| {
            let out = exact_dpo_optimize(&c.reference, &c.p, &q, c.beta, &OptConfig::default())?;
            let star = closed_form_optimal_policy(&c.reference, &c.p, &q, c.beta)?;
            let tv = total_variation(&out.solution, &star)?;
            Ok(VerificationRecord {
                kind: "dpo_policy".into(),
                instance: c.instance,
                n_items: n,
                beta: Some(c.beta),
                reference: if c.random_ref { "random" } else { "uniform" }.into(),
                error: tv,
                threshold: POLICY_TV_THRESHOLD,
                iterations: out.iterations,
                grad_norm: out.grad_norm,
                converged: out.converged,
                pass: tv < POLICY_TV_THRESHOLD,
            })
        })
        .collect()
}

/// Fits the exact Bradley–Terry objective on random strictly positive
/// `(p, q)` and compares with the closed-form reward.
pub fn verify_rewards(spec: &ExperimentSpec) -> Result<Vec<VerificationRecord>> {
    let n = spec.verify.reward_items;
    (0..spec.verify.instances)
        .into_par_iter()
        .map(|instance| {
            let mut rng = rng_from_seed(derive_seed(spec.seed, &[2, instance as u64]));
            let p = random_distribution(n, &mut rng);
            let q = random_distribution(n, &mut rng);
            let out = exact_bt_reward_optimize(&p, &q, &OptConfig::default())?;
            let star = closed_form_optimal_reward(&p, &q)?;
            let diff: Vec<f64> = out.solution.log_reward.iter().zip(&star).map(|(a, b)| a - b).collect();
            let err = max_abs(&diff);
            Ok(VerificationRecord {
                kind: "bt_reward".into(),
                instance,
                n_items: n,
                beta: None,
                reference: "none".into(),
                error: err,
                threshold: REWARD_ABS_THRESHOLD,
                iterations: out.iterations,
                grad_norm: out.grad_norm,
                converged: out.converged,
                pass: err < REWARD_ABS_THRESHOLD,
            })
        })
        .collect()
}

/// Top-1 mass of the closed form on the experiment's catalog (uniform
/// reference and negatives) along β ∈ {2, 1, 0.5, 0.1, 0.01}.
///
/// The record's `error` is the largest decrease of top-1 mass between
/// consecutive β values plus the shortfall below [`COLLAPSE_THRESHOLD`] at
/// the smallest β; it passes when that is zero.
pub fn verify_collapse(catalog: &CatalogParams) -> Result<VerificationRecord> {
    let cat = catalog.build()?;
    let p = cat.popularity(0)?;
    let n = cat.n_items;
    let u = vec![1.0 / n as f64; n];
    let curve = beta_sharpening_curve(&u, p, &u, &[2.0, 1.0, 0.5, 0.1, 0.01])?;
    let drop = curve
        .windows(2)
        .map(|w| (w[0].top1_mass - w[1].top1_mass).max(0.0))
        .fold(0.0, f64::max);
    let last = curve.last().expect("five betas").top1_mass;
    let err = drop + (COLLAPSE_THRESHOLD - last).max(0.0);
    Ok(VerificationRecord {
        kind: "beta_collapse".into(),
        instance: 0,
        n_items: n,
        beta: Some(0.01),
        reference: "uniform".into(),
        error: err,
        threshold: 0.0,
        iterations: 0,
        grad_norm: 0.0,
        converged: true,
        pass: err == 0.0 && last > COLLAPSE_THRESHOLD,
    })
}

pub fn run_verification(spec: &ExperimentSpec) -> Result<VerificationReport> {
    let mut records = verify_policies(spec)?;
    records.extend(verify_rewards(spec)?);
    records.push(verify_collapse(&spec.catalog)?);
    Ok(VerificationReport { records })
}

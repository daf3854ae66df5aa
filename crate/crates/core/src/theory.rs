//! Closed-form optima of the population DPO and Bradley–Terry objectives,
//! and brute-force optimizers that check them numerically.

use serde::{Deserialize, Serialize};

use crate::losses::exact_weighted_dpo_loss;
use crate::numeric::{centered, check_distribution, entropy, log_sum_exp, max_abs, pairwise_sum, sigmoid, softplus};
use crate::policy::Policy;
use crate::{Error, Result};

/// Log-reward assigned to zero-popularity items by [`exact_bt_reward_optimize`],
/// relative to the largest log-reward.
pub const REWARD_FLOOR: f64 = -40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormSolution {
    pub policy_star: Vec<f64>,
    pub reward_star: Vec<f64>,
    pub beta: f64,
}

impl ClosedFormSolution {
    pub fn new(reference: &[f64], p: &[f64], q: &[f64], beta: f64) -> Result<Self> {
        Ok(Self {
            policy_star: closed_form_optimal_policy(reference, p, q, beta)?,
            reward_star: closed_form_optimal_reward(p, q)?,
            beta,
        })
    }
}

fn check_lengths(reference: &[f64], p: &[f64], q: &[f64]) -> Result<()> {
    if reference.len() != p.len() || q.len() != p.len() {
        return Err(Error::invalid("ref/p/q", "lengths differ"));
    }
    Ok(())
}

/// `π*(y) ∝ ref(y) · (p(y)/q(y))^{1/β}`, evaluated in the log domain.
///
/// The inputs only need to be non-negative; `p` and `q` enter through their
/// ratio, so rescaling either leaves the result unchanged. Items with
/// `p = 0` (and `q > 0`) or `ref = 0` get probability zero.
pub fn closed_form_optimal_policy(reference: &[f64], p: &[f64], q: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_lengths(reference, p, q)?;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid("beta", "must be positive and finite"));
    }
    let mut log_u = Vec::with_capacity(p.len());
    for (item, ((&r, &pp), &qq)) in reference.iter().zip(p).zip(q).enumerate() {
        if [r, pp, qq].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("ref/p/q[{item}]"), "must be finite and non-negative"));
        }
        if qq == 0.0 {
            if pp > 0.0 {
                return Err(Error::UndefinedRatio { item, p: pp });
            }
            return Err(Error::invalid(format!("p/q[{item}]"), "p and q are both zero"));
        }
        log_u.push(if pp == 0.0 || r == 0.0 {
            f64::NEG_INFINITY
        } else {
            r.ln() + (pp.ln() - qq.ln()) / beta
        });
    }
    let lz = log_sum_exp(&log_u);
    if lz == f64::NEG_INFINITY {
        return Err(Error::invalid("ref·p", "no item has positive mass under both ref and p"));
    }
    let mut out: Vec<f64> = log_u.iter().map(|&l| (l - lz).exp()).collect();
    let total = pairwise_sum(&out);
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// `r*(y) = log p(y) - log q(y)`, shifted to zero mean.
pub fn closed_form_optimal_reward(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(Error::invalid("q", "length differs from p"));
    }
    let mut r = Vec::with_capacity(p.len());
    for (item, (&pp, &qq)) in p.iter().zip(q).enumerate() {
        if !(qq > 0.0) {
            return Err(Error::UndefinedRatio { item, p: pp });
        }
        if !(pp > 0.0) {
            return Err(Error::invalid(format!("p[{item}]"), "must be strictly positive"));
        }
        r.push(pp.ln() - qq.ln());
    }
    Ok(centered(&r))
}

/// Gradient-descent settings for the verification optimizers. A step that
/// raises the objective is rejected and the learning rate halved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once the gradient infinity-norm drops below this.
    pub tolerance: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            max_iters: 200_000,
            tolerance: 1e-8,
        }
    }
}

impl OptConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("opt.learning_rate", "must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("opt.tolerance", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptOutcome<T> {
    pub solution: T,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

impl<T> OptOutcome<T> {
    /// Turns a non-converged outcome into [`Error::NotConverged`].
    pub fn ensure_converged(self) -> Result<T> {
        if self.converged {
            Ok(self.solution)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                grad_norm: self.grad_norm,
            })
        }
    }
}

/// Generic descent loop over a flat parameter vector.
fn descend_with_halving(
    mut x: Vec<f64>,
    cfg: &OptConfig,
    mut objective: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    mut project: impl FnMut(&mut [f64], &mut [f64]),
) -> Result<OptOutcome<Vec<f64>>> {
    cfg.validate()?;
    let (mut value, mut grad) = objective(&x)?;
    project(&mut x, &mut grad);
    let mut lr = cfg.learning_rate;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let norm = max_abs(&grad);
        if norm < cfg.tolerance {
            return Ok(OptOutcome {
                solution: x,
                iterations,
                grad_norm: norm,
                converged: true,
            });
        }
        iterations += 1;
        let trial: Vec<f64> = x.iter().zip(&grad).map(|(v, g)| v - lr * g).collect();
        let (v_new, mut g_new) = objective(&trial)?;
        // rounding slack so that a flat objective does not starve the step size
        if v_new <= value + 1e-15 * value.abs().max(1.0) {
            x = trial;
            value = v_new;
            project(&mut x, &mut g_new);
            grad = g_new;
        } else {
            lr *= 0.5;
            if lr < 1e-300 {
                break;
            }
        }
    }
    let grad_norm = max_abs(&grad);
    Ok(OptOutcome {
        solution: x,
        iterations,
        grad_norm,
        converged: grad_norm < cfg.tolerance,
    })
}

/// Minimizes the exact population DPO loss (negatives from `q`, unit
/// weights) over the logits of a single-context policy, starting from
/// uniform logits. Returns the fitted probabilities.
pub fn exact_dpo_optimize(
    reference: &[f64],
    p: &[f64],
    q: &[f64],
    beta: f64,
    cfg: &OptConfig,
) -> Result<OptOutcome<Vec<f64>>> {
    check_lengths(reference, p, q)?;
    check_distribution("ref", reference)?;
    let n = p.len();
    let ref_policy = Policy::from_probs(&[reference.to_vec()])?;
    let ones = vec![1.0; n];
    let out = descend_with_halving(
        vec![0.0; n],
        cfg,
        |z| {
            let pol = Policy::from_logits(1, n, z.to_vec())?;
            let loss = exact_weighted_dpo_loss(&pol, &ref_policy, p, q, &ones, beta, 0)?;
            Ok((loss.value, loss.grad))
        },
        |_, _| {},
    )?;
    let probs = crate::numeric::softmax(&out.solution);
    Ok(OptOutcome {
        solution: probs,
        iterations: out.iterations,
        grad_norm: out.grad_norm,
        converged: out.converged,
    })
}

/// Negated Bradley–Terry log-likelihood
/// `-Σ_{w,l} p(w) q(l) log σ(s_w - s_l)` over log-rewards `s`, with its
/// gradient in `s`.
pub fn bt_objective(p: &[f64], q: &[f64], log_reward: &[f64]) -> (f64, Vec<f64>) {
    let n = p.len();
    let mut grad = vec![0.0; n];
    let mut terms = Vec::with_capacity(n * n);
    for w in 0..n {
        if p[w] == 0.0 {
            continue;
        }
        for l in 0..n {
            let c = p[w] * q[l];
            if c == 0.0 {
                continue;
            }
            let m = log_reward[w] - log_reward[l];
            terms.push(c * softplus(-m));
            let d = c * sigmoid(-m);
            grad[w] -= d;
            grad[l] += d;
        }
    }
    (pairwise_sum(&terms), grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSolution {
    /// Centered log-rewards; entries listed in `floored` are at
    /// [`REWARD_FLOOR`] below the maximum before centering.
    pub log_reward: Vec<f64>,
    pub floored: Vec<usize>,
}

/// Maximizes the exact Bradley–Terry objective over log-rewards by gradient
/// ascent. The additive gauge is fixed by holding the maximum at zero.
///
/// For an item with `p = 0` every term of the gradient pushes its reward
/// down, so its optimum is `-∞`. Such items are pinned at [`REWARD_FLOOR`]
/// from the start and reported in `floored`.
pub fn exact_bt_reward_optimize(p: &[f64], q: &[f64], cfg: &OptConfig) -> Result<OptOutcome<RewardSolution>> {
    if p.len() != q.len() {
        return Err(Error::invalid("q", "length differs from p"));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let n = p.len();
    let pinned: Vec<bool> = p.iter().map(|&v| v == 0.0).collect();
    let init = pinned.iter().map(|&f| if f { REWARD_FLOOR } else { 0.0 }).collect();
    let out = descend_with_halving(
        init,
        cfg,
        |s| Ok(bt_objective(p, q, s)),
        |s, g| {
            let top = (0..n)
                .filter(|&i| !pinned[i])
                .map(|i| s[i])
                .fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                if pinned[i] {
                    s[i] = REWARD_FLOOR;
                    g[i] = 0.0;
                } else {
                    s[i] -= top;
                }
            }
        },
    )?;
    let floored: Vec<usize> = (0..n).filter(|&i| pinned[i]).collect();
    Ok(OptOutcome {
        solution: RewardSolution {
            log_reward: centered(&out.solution),
            floored,
        },
        iterations: out.iterations,
        grad_norm: out.grad_norm,
        converged: out.converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpeningPoint {
    pub beta: f64,
    pub top1_mass: f64,
    pub entropy: f64,
}

/// Closed-form policy statistics along a descending β grid.
pub fn beta_sharpening_curve(reference: &[f64], p: &[f64], q: &[f64], betas: &[f64]) -> Result<Vec<SharpeningPoint>> {
    if betas.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::invalid("betas", "must be strictly descending"));
    }
    betas
        .iter()
        .map(|&beta| {
            let pi = closed_form_optimal_policy(reference, p, q, beta)?;
            Ok(SharpeningPoint {
                beta,
                top1_mass: pi.iter().copied().fold(0.0, f64::max),
                entropy: entropy(&pi),
            })
        })
        .collect()
}

/// One row of the verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub kind: String,
    pub instance: usize,
    pub n_items: usize,
    pub beta: Option<f64>,
    pub reference: String,
    /// TV distance for policy checks, max-abs error for reward checks.
    pub error: f64,
    pub threshold: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerificationReport {
    pub records: Vec<VerificationRecord>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

//! Objectives over policy logits with analytic gradients.
//!
//! Every gradient is taken with respect to the logit table of the trained
//! policy and has the same row-major shape. Log-probability ratios are
//! computed from logit differences, so the softmax normalizers cancel
//! exactly and no large exponentials are formed.

use serde::{Deserialize, Serialize};

use crate::catalog::InteractionSet;
use crate::numeric::{log_softmax, pairwise_sum, sigmoid, softmax, softplus};
use crate::policy::Policy;
use crate::{Error, Result};

/// Scalar objective and its gradient w.r.t. the logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Which sampler produced the rejected items of a triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    Uniform,
    SelfPlay,
    Beam,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub context: usize,
    pub chosen: usize,
    pub rejected: Vec<usize>,
    pub source: NegativeSource,
}

impl PreferenceTriple {
    pub fn new(context: usize, chosen: usize, rejected: Vec<usize>, source: NegativeSource) -> Result<Self> {
        let t = Self {
            context,
            chosen,
            rejected,
            source,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rejected.is_empty() {
            return Err(Error::invalid("triple.rejected", "must not be empty"));
        }
        if self.rejected.contains(&self.chosen) {
            return Err(Error::invalid("triple.rejected", "contains the chosen item"));
        }
        for (i, a) in self.rejected.iter().enumerate() {
            if self.rejected[i + 1..].contains(a) {
                return Err(Error::invalid("triple.rejected", format!("duplicate item {a}")));
            }
        }
        Ok(())
    }

    fn check_shape(&self, policy: &Policy) -> Result<()> {
        if self.context >= policy.n_contexts() {
            return Err(Error::ContextOutOfRange {
                context: self.context,
                n_contexts: policy.n_contexts(),
            });
        }
        let n = policy.n_items();
        if self.chosen >= n || self.rejected.iter().any(|&r| r >= n) {
            return Err(Error::invalid("triple", format!("item id outside 0..{n}")));
        }
        Ok(())
    }
}

fn same_shape(policy: &Policy, reference: &Policy) -> Result<()> {
    if policy.n_contexts() != reference.n_contexts() || policy.n_items() != reference.n_items() {
        return Err(Error::invalid("ref_policy", "shape differs from the trained policy"));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("beta", "must be positive and finite"))
    }
}

/// Mean negative log-likelihood of the logged positives.
pub fn sft_loss(policy: &Policy, interactions: &InteractionSet) -> Result<LossValue> {
    if interactions.is_empty() {
        return Err(Error::Empty("interactions"));
    }
    if interactions.n_contexts != policy.n_contexts() || interactions.n_items != policy.n_items() {
        return Err(Error::invalid("interactions", "shape differs from the policy"));
    }
    let n_items = policy.n_items();
    let total = interactions.len() as f64;
    let mut grad = vec![0.0; policy.logits().len()];
    let mut per_context = Vec::with_capacity(policy.n_contexts());
    for (c, counts) in interactions.counts.iter().enumerate() {
        let n_c: u64 = counts.iter().sum();
        if n_c == 0 {
            continue;
        }
        let row = policy.row_unchecked(c);
        let lp = log_softmax(row);
        let p = softmax(row);
        let terms: Vec<f64> = counts
            .iter()
            .zip(&lp)
            .filter(|(&k, _)| k > 0)
            .map(|(&k, &l)| -(k as f64) * l)
            .collect();
        per_context.push(pairwise_sum(&terms));
        let g = &mut grad[c * n_items..(c + 1) * n_items];
        for y in 0..n_items {
            g[y] = (n_c as f64 * p[y] - counts[y] as f64) / total;
        }
    }
    Ok(LossValue {
        value: pairwise_sum(&per_context) / total,
        grad,
    })
}

/// Cross-entropy `-Σ_y p(y) log π(y|x)` against a target distribution for
/// one context; a context-weighted sum of these is the exact-expectation
/// SFT objective.
pub fn expected_nll(policy: &Policy, p: &[f64], context: usize) -> Result<LossValue> {
    let row = policy.row(context)?;
    if p.len() != row.len() {
        return Err(Error::invalid("p", "length differs from n_items"));
    }
    let lp = log_softmax(row);
    let pi = softmax(row);
    let terms: Vec<f64> = p
        .iter()
        .zip(&lp)
        .filter(|(&w, _)| w > 0.0)
        .map(|(&w, &l)| -w * l)
        .collect();
    let n = policy.n_items();
    let mut grad = vec![0.0; policy.logits().len()];
    for y in 0..n {
        grad[context * n + y] = pi[y] - p[y];
    }
    Ok(LossValue {
        value: pairwise_sum(&terms),
        grad,
    })
}

/// `KL(p ‖ q)` between two probability vectors. Returns `+∞` when `p` puts
/// mass where `q` is exactly zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("q", "length differs from p"));
    }
    let mut terms = Vec::with_capacity(p.len());
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            terms.push(pi * (pi.ln() - qi.ln()));
        }
    }
    Ok(pairwise_sum(&terms).max(0.0))
}

/// `KL(p ‖ π_θ(·|x))`, evaluated with log-probabilities so it stays finite
/// for finite logits.
pub fn forward_kl(p: &[f64], policy: &Policy, context: usize) -> Result<f64> {
    crate::numeric::check_distribution("p", p)?;
    let lp = policy.log_probs(context)?;
    if lp.len() != p.len() {
        return Err(Error::invalid("p", "length differs from n_items"));
    }
    let terms: Vec<f64> = p
        .iter()
        .zip(&lp)
        .filter(|(&w, _)| w > 0.0)
        .map(|(&w, &l)| if l == f64::NEG_INFINITY { f64::INFINITY } else { w * (w.ln() - l) })
        .collect();
    Ok(pairwise_sum(&terms).max(0.0))
}

/// β-scaled implicit-reward margin of `chosen` over `rejected`.
#[inline]
fn margin(z: &[f64], r: &[f64], chosen: usize, rejected: usize, beta: f64) -> f64 {
    beta * ((z[chosen] - z[rejected]) - (r[chosen] - r[rejected]))
}

/// Adds `scale * ∂/∂z softplus(-m)` for one (chosen, rejected) pair into
/// `grad_row` and returns `softplus(-m)`.
#[inline]
fn accumulate_pair(
    z: &[f64],
    r: &[f64],
    chosen: usize,
    rejected: usize,
    beta: f64,
    scale: f64,
    grad_row: &mut [f64],
) -> f64 {
    let m = margin(z, r, chosen, rejected, beta);
    let d = -sigmoid(-m) * beta * scale;
    grad_row[chosen] += d;
    grad_row[rejected] -= d;
    softplus(-m)
}

/// Accumulates the multi-negative loss of one triple with weight `scale`.
fn accumulate_triple(
    policy: &Policy,
    reference: &Policy,
    triple: &PreferenceTriple,
    beta: f64,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let n = policy.n_items();
    let c = triple.context;
    let z = policy.row_unchecked(c);
    let r = reference.row_unchecked(c);
    let g = &mut grad[c * n..(c + 1) * n];
    let k = triple.rejected.len() as f64;
    let mut terms = Vec::with_capacity(triple.rejected.len());
    for &l in &triple.rejected {
        terms.push(accumulate_pair(z, r, triple.chosen, l, beta, scale / k, g));
    }
    pairwise_sum(&terms) / k
}

/// `-log σ(β[log π_θ(y_w)/π_ref(y_w) - log π_θ(y_l)/π_ref(y_l)])` for a
/// triple with exactly one rejected item.
pub fn dpo_pair_loss(policy: &Policy, reference: &Policy, triple: &PreferenceTriple, beta: f64) -> Result<LossValue> {
    if triple.rejected.len() != 1 {
        return Err(Error::invalid("triple.rejected", "pairwise loss needs exactly one rejected item"));
    }
    multi_negative_dpo_loss(policy, reference, triple, beta)
}

/// Arithmetic mean of the pairwise loss over the rejected items.
pub fn multi_negative_dpo_loss(
    policy: &Policy,
    reference: &Policy,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<LossValue> {
    check_beta(beta)?;
    same_shape(policy, reference)?;
    triple.validate()?;
    triple.check_shape(policy)?;
    let mut grad = vec![0.0; policy.logits().len()];
    let value = accumulate_triple(policy, reference, triple, beta, 1.0, &mut grad);
    Ok(LossValue { value, grad })
}

/// Mean over triples of the (multi-negative) DPO loss.
pub fn dpo_batch_loss(
    policy: &Policy,
    reference: &Policy,
    triples: &[PreferenceTriple],
    beta: f64,
) -> Result<LossValue> {
    check_beta(beta)?;
    same_shape(policy, reference)?;
    if triples.is_empty() {
        return Err(Error::Empty("preference triples"));
    }
    for t in triples {
        t.validate()?;
        t.check_shape(policy)?;
    }
    Ok(dpo_batch_loss_unchecked(policy, reference, triples, beta))
}

pub(crate) fn dpo_batch_loss_unchecked(
    policy: &Policy,
    reference: &Policy,
    triples: &[PreferenceTriple],
    beta: f64,
) -> LossValue {
    let scale = 1.0 / triples.len() as f64;
    let mut grad = vec![0.0; policy.logits().len()];
    let values: Vec<f64> = triples
        .iter()
        .map(|t| accumulate_triple(policy, reference, t, beta, scale, &mut grad))
        .collect();
    LossValue {
        value: pairwise_sum(&values) * scale,
        grad,
    }
}

/// `π_t(y) / q(y)`, the importance weights that turn an expectation under
/// `q` into one under `π_t`.
pub fn importance_weights(pi_t: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if pi_t.len() != q.len() {
        return Err(Error::invalid("q", "length differs from pi_t"));
    }
    pi_t.iter()
        .zip(q)
        .enumerate()
        .map(|(item, (&p, &qq))| {
            if qq > 0.0 {
                Ok(p / qq)
            } else if p == 0.0 {
                Ok(0.0)
            } else {
                Err(Error::UndefinedRatio { item, p })
            }
        })
        .collect()
}

/// Exact expectation `Σ_{y_w} Σ_{y_l} p(y_w) q(y_l) w(y_l) softplus(-m)`
/// over all ordered pairs, including `y_w = y_l` (each contributes `ln 2`).
///
/// With `w ≡ 1` this is the population DPO objective under negative
/// distribution `q`; with `w = π_t / q` it is the self-play objective.
#[allow(clippy::too_many_arguments)]
pub fn exact_weighted_dpo_loss(
    policy: &Policy,
    reference: &Policy,
    p: &[f64],
    q: &[f64],
    weight: &[f64],
    beta: f64,
    context: usize,
) -> Result<LossValue> {
    check_beta(beta)?;
    same_shape(policy, reference)?;
    let n = policy.n_items();
    let z = policy.row(context)?;
    let r = reference.row(context)?;
    if p.len() != n || q.len() != n || weight.len() != n {
        return Err(Error::invalid("p/q/weight", "length differs from n_items"));
    }
    crate::numeric::check_distribution("p", p)?;
    crate::numeric::check_distribution("q", q)?;
    for (item, (&qq, &w)) in q.iter().zip(weight).enumerate() {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::invalid(format!("weight[{item}]"), "must be finite and non-negative"));
        }
        if qq == 0.0 && w > 0.0 {
            return Err(Error::UndefinedRatio { item, p: w });
        }
    }
    let mut grad = vec![0.0; policy.logits().len()];
    let g = &mut grad[context * n..(context + 1) * n];
    let mut terms = Vec::with_capacity(n * n);
    for w_item in 0..n {
        if p[w_item] == 0.0 {
            continue;
        }
        for l_item in 0..n {
            let c = p[w_item] * q[l_item] * weight[l_item];
            if c == 0.0 {
                continue;
            }
            terms.push(c * accumulate_pair(z, r, w_item, l_item, beta, c, g));
        }
    }
    Ok(LossValue {
        value: pairwise_sum(&terms),
        grad,
    })
}

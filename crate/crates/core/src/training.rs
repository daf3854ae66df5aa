//! SFT and DPO steps, negative construction and the self-play driver.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{sample_categorical, InteractionSet, ItemCatalog};
use crate::losses::{
    dpo_batch_loss, exact_weighted_dpo_loss, expected_nll, sft_loss, LossValue, NegativeSource, PreferenceTriple,
};
use crate::metrics::{Evaluator, MetricsReport};
use crate::policy::Policy;
use crate::rng::{derive_seed, stream, LabRng};
use crate::{Error, Result};

/// Self-play draws that collide with the chosen item (or an earlier
/// negative) are redrawn at most this many times before falling back to the
/// highest-ranked free item.
pub const MAX_SELF_PLAY_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    Uniform,
    #[default]
    SelfPlay,
    Beam,
    /// Self-play negatives, each replaced by a uniform draw with
    /// probability `contamination`.
    Mixed,
}

impl NegativeStrategy {
    pub fn source(self) -> NegativeSource {
        match self {
            Self::Uniform => NegativeSource::Uniform,
            Self::SelfPlay => NegativeSource::SelfPlay,
            Self::Beam => NegativeSource::Beam,
            Self::Mixed => NegativeSource::Mixed,
        }
    }
}

/// Which snapshot of an iteration the self-play sampler reads from. The DPO
/// reference is always the post-SFT snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerSnapshot {
    /// The policy entering the iteration.
    #[default]
    PreSft,
    /// The policy after this iteration's SFT step, i.e. the DPO reference.
    PostSft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr_sft: f64,
    pub lr_dpo: f64,
    pub epochs_per_step: usize,
    pub iterations: usize,
    pub negatives: NegativeStrategy,
    pub n_negatives: usize,
    pub contamination: f64,
    pub subsample_fraction: f64,
    pub sampler: SamplerSnapshot,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            lr_sft: 0.5,
            lr_dpo: 0.1,
            epochs_per_step: 200,
            iterations: 5,
            negatives: NegativeStrategy::SelfPlay,
            n_negatives: 1,
            contamination: 0.0,
            subsample_fraction: 0.5,
            sampler: SamplerSnapshot::PreSft,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.beta) {
            return Err(Error::invalid("train.beta", "must be positive"));
        }
        if !(self.lr_sft >= 0.0 && self.lr_sft.is_finite()) {
            return Err(Error::invalid("train.lr_sft", "must be non-negative"));
        }
        if !(self.lr_dpo >= 0.0 && self.lr_dpo.is_finite()) {
            return Err(Error::invalid("train.lr_dpo", "must be non-negative"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("train.iterations", "must be at least 1"));
        }
        if self.n_negatives == 0 {
            return Err(Error::invalid("train.n_negatives", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.contamination) {
            return Err(Error::invalid("train.contamination", "must lie in [0, 1]"));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::invalid("train.subsample_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

struct NegativeStreams {
    self_play: LabRng,
    uniform: LabRng,
    coin: LabRng,
}

impl NegativeStreams {
    fn new(seed: u64) -> Self {
        Self {
            self_play: stream(seed, 0),
            uniform: stream(seed, 1),
            coin: stream(seed, 2),
        }
    }
}

fn draw_uniform(n_items: usize, taken: &[usize], chosen: usize, rng: &mut LabRng) -> usize {
    loop {
        let y = rng.gen_range(0..n_items);
        if y != chosen && !taken.contains(&y) {
            return y;
        }
    }
}

fn draw_self_play(probs: &[f64], ranking: &[usize], taken: &[usize], chosen: usize, rng: &mut LabRng) -> usize {
    for _ in 0..=MAX_SELF_PLAY_RETRIES {
        let y = sample_categorical(probs, rng);
        if y != chosen && !taken.contains(&y) {
            return y;
        }
    }
    *ranking
        .iter()
        .find(|&&y| y != chosen && !taken.contains(&y))
        .expect("n_negatives < n_items leaves a free item")
}

/// One triple per positive in `interactions`, with negatives drawn from
/// `sampler` according to `config`.
///
/// Self-play, uniform and contamination draws use three independent streams
/// of `seed`, so `Mixed` with contamination 0 (resp. 1) yields exactly the
/// `SelfPlay` (resp. `Uniform`) triples.
pub fn build_preference_triples(
    sampler: &Policy,
    interactions: &InteractionSet,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<PreferenceTriple>> {
    if interactions.is_empty() {
        return Err(Error::Empty("interactions"));
    }
    let n = sampler.n_items();
    if n < 2 {
        return Err(Error::invalid("catalog", "a single item leaves no valid negative"));
    }
    if interactions.n_items != n || interactions.n_contexts != sampler.n_contexts() {
        return Err(Error::invalid("interactions", "shape differs from the sampler policy"));
    }
    let k = config.n_negatives;
    if k >= n {
        return Err(Error::invalid(
            "train.n_negatives",
            format!("{k} negatives need more than {n} items"),
        ));
    }
    let mut rngs = NegativeStreams::new(seed);
    let mut cache: Vec<Option<(Vec<f64>, Vec<usize>)>> = vec![None; sampler.n_contexts()];
    let mut out = Vec::with_capacity(interactions.len());
    for &(c, chosen) in &interactions.records {
        if cache[c].is_none() {
            cache[c] = Some((sampler.probs(c)?, sampler.ranking(c)?));
        }
        let (probs, ranking) = cache[c].as_ref().expect("filled above");
        let rejected = match config.negatives {
            NegativeStrategy::Beam => sampler.beam_negatives(c, k, chosen)?,
            NegativeStrategy::Uniform => {
                let mut r = Vec::with_capacity(k);
                for _ in 0..k {
                    let y = draw_uniform(n, &r, chosen, &mut rngs.uniform);
                    r.push(y);
                }
                r
            }
            NegativeStrategy::SelfPlay => {
                let mut r = Vec::with_capacity(k);
                for _ in 0..k {
                    let y = draw_self_play(probs, ranking, &r, chosen, &mut rngs.self_play);
                    r.push(y);
                }
                r
            }
            NegativeStrategy::Mixed => {
                let mut r = Vec::with_capacity(k);
                for _ in 0..k {
                    let replace = rngs.coin.gen::<f64>() < config.contamination;
                    let y = if replace {
                        draw_uniform(n, &r, chosen, &mut rngs.uniform)
                    } else {
                        draw_self_play(probs, ranking, &r, chosen, &mut rngs.self_play)
                    };
                    r.push(y);
                }
                r
            }
        };
        out.push(PreferenceTriple {
            context: c,
            chosen,
            rejected,
            source: config.negatives.source(),
        });
    }
    Ok(out)
}

fn descend_epochs(
    policy: &Policy,
    epochs: usize,
    lr: f64,
    phase: &'static str,
    mut loss: impl FnMut(&Policy) -> Result<LossValue>,
) -> Result<Policy> {
    let mut work = policy.clone();
    if lr == 0.0 {
        return Ok(work);
    }
    for epoch in 0..epochs {
        let l = loss(&work)?;
        if !l.value.is_finite() {
            return Err(Error::Divergence {
                phase,
                epoch,
                detail: format!("loss is {}", l.value),
            });
        }
        work.descend(&l.grad, lr);
        if !work.all_finite() {
            return Err(Error::Divergence {
                phase,
                epoch,
                detail: "non-finite logits after update".into(),
            });
        }
    }
    Ok(work)
}

/// `epochs_per_step` full-batch epochs on the SFT loss.
pub fn sft_step(policy: &Policy, interactions: &InteractionSet, config: &TrainConfig) -> Result<Policy> {
    sft_loss(policy, interactions)?;
    descend_epochs(policy, config.epochs_per_step, config.lr_sft, "sft", |p| {
        sft_loss(p, interactions)
    })
}

/// SFT on the exact expectation: minimizes the context-averaged cross
/// entropy to `targets[c]`.
pub fn sft_step_expected(policy: &Policy, targets: &[Vec<f64>], config: &TrainConfig) -> Result<Policy> {
    if targets.len() != policy.n_contexts() {
        return Err(Error::invalid("targets", "need one distribution per context"));
    }
    for (c, t) in targets.iter().enumerate() {
        crate::numeric::check_distribution(&format!("targets[{c}]"), t)?;
    }
    let w = 1.0 / targets.len() as f64;
    descend_epochs(policy, config.epochs_per_step, config.lr_sft, "sft", |p| {
        let mut value = 0.0;
        let mut grad = vec![0.0; p.logits().len()];
        for (c, t) in targets.iter().enumerate() {
            let l = expected_nll(p, t, c)?;
            value += w * l.value;
            for (g, d) in grad.iter_mut().zip(&l.grad) {
                *g += w * d;
            }
        }
        Ok(LossValue { value, grad })
    })
}

/// `epochs_per_step` full-batch epochs on the (multi-negative) DPO loss
/// against a fixed reference.
pub fn dpo_step(
    policy: &Policy,
    reference: &Policy,
    triples: &[PreferenceTriple],
    config: &TrainConfig,
) -> Result<Policy> {
    dpo_batch_loss(policy, reference, triples, config.beta)?;
    descend_epochs(policy, config.epochs_per_step, config.lr_dpo, "dpo", |p| {
        // shapes and triples were validated by the first call
        Ok(crate::losses::dpo_batch_loss_unchecked(p, reference, triples, config.beta))
    })
}

/// DPO on the exact expectation with positives from `p[c]` and negatives
/// from `q[c]`, contexts weighted equally.
pub fn dpo_step_expected(
    policy: &Policy,
    reference: &Policy,
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<Policy> {
    if p.len() != policy.n_contexts() || q.len() != policy.n_contexts() {
        return Err(Error::invalid("p/q", "need one distribution per context"));
    }
    let ones = vec![1.0; policy.n_items()];
    let w = 1.0 / p.len() as f64;
    descend_epochs(policy, config.epochs_per_step, config.lr_dpo, "dpo", |pol| {
        let mut value = 0.0;
        let mut grad = vec![0.0; pol.logits().len()];
        for c in 0..p.len() {
            let l = exact_weighted_dpo_loss(pol, reference, &p[c], &q[c], &ones, config.beta, c)?;
            value += w * l.value;
            for (g, d) in grad.iter_mut().zip(&l.grad) {
                *g += w * d;
            }
        }
        Ok(LossValue { value, grad })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    PostSft,
    PostDpo,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Init => "init",
            Self::PostSft => "post_sft",
            Self::PostDpo => "post_dpo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "init" => Some(Self::Init),
            "post_sft" => Some(Self::PostSft),
            "post_dpo" => Some(Self::PostDpo),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub phase: Phase,
    pub policy: Policy,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    /// One report per snapshot once [`Trajectory::evaluate`] has run.
    pub metrics: Vec<MetricsReport>,
}

impl Trajectory {
    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("a trajectory starts with its init snapshot")
    }

    pub fn find(&self, iteration: usize, phase: Phase) -> Option<&Snapshot> {
        self.snapshots
            .iter()
            .find(|s| s.iteration == iteration && s.phase == phase)
    }

    pub fn evaluate(
        &mut self,
        evaluator: &Evaluator,
        catalog: &ItemCatalog,
        validation: &InteractionSet,
        history: &InteractionSet,
    ) -> Result<()> {
        self.metrics = self
            .snapshots
            .iter()
            .map(|s| evaluator.evaluate(&s.policy, catalog, validation, history))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

fn iteration_seed(config: &TrainConfig, t: usize) -> u64 {
    derive_seed(config.seed, &[t as u64])
}

fn iteration_subsample(interactions: &InteractionSet, config: &TrainConfig, t: usize) -> Result<InteractionSet> {
    let mut rng = stream(iteration_seed(config, t), 3);
    interactions.subsample(config.subsample_fraction, &mut rng)
}

/// The self-play loop. Each iteration subsamples the positives, runs an SFT
/// step, then a DPO step whose reference is the post-SFT snapshot and whose
/// negatives come from the snapshot chosen by `config.sampler`.
pub fn sprec_run(init: &Policy, interactions: &InteractionSet, config: &TrainConfig) -> Result<Trajectory> {
    config.validate()?;
    if interactions.is_empty() {
        return Err(Error::Empty("interactions"));
    }
    let mut snapshots = vec![Snapshot {
        iteration: 0,
        phase: Phase::Init,
        policy: init.clone(),
    }];
    let mut current = init.clone();
    for t in 1..=config.iterations {
        let sub = iteration_subsample(interactions, config, t)?;
        let post_sft = sft_step(&current, &sub, config)?;
        let sampler = match config.sampler {
            SamplerSnapshot::PreSft => &current,
            SamplerSnapshot::PostSft => &post_sft,
        };
        let triples = build_preference_triples(sampler, &sub, config, iteration_seed(config, t))?;
        let post_dpo = dpo_step(&post_sft, &post_sft, &triples, config)?;
        snapshots.push(Snapshot {
            iteration: t,
            phase: Phase::PostSft,
            policy: post_sft,
        });
        snapshots.push(Snapshot {
            iteration: t,
            phase: Phase::PostDpo,
            policy: post_dpo.clone(),
        });
        current = post_dpo;
    }
    Ok(Trajectory {
        snapshots,
        metrics: Vec::new(),
    })
}

/// One SFT step followed by one DPO step with uniform negatives.
pub fn train_dpo_baseline(init: &Policy, interactions: &InteractionSet, config: &TrainConfig) -> Result<Trajectory> {
    let cfg = TrainConfig {
        iterations: 1,
        negatives: NegativeStrategy::Uniform,
        ..config.clone()
    };
    sprec_run(init, interactions, &cfg)
}

/// The first iteration's SFT step alone, on the same subsample the other
/// arms see.
pub fn train_sft_only(init: &Policy, interactions: &InteractionSet, config: &TrainConfig) -> Result<Trajectory> {
    config.validate()?;
    let sub = iteration_subsample(interactions, config, 1)?;
    let post_sft = sft_step(init, &sub, config)?;
    Ok(Trajectory {
        snapshots: vec![
            Snapshot {
                iteration: 0,
                phase: Phase::Init,
                policy: init.clone(),
            },
            Snapshot {
                iteration: 1,
                phase: Phase::PostSft,
                policy: post_sft,
            },
        ],
        metrics: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(n_items: usize, items: &[usize]) -> InteractionSet {
        InteractionSet::from_records(1, n_items, items.iter().map(|&i| (0, i)).collect()).unwrap()
    }

    #[test]
    fn uniform_two_items_forced() {
        let cfg = TrainConfig {
            negatives: NegativeStrategy::Uniform,
            ..TrainConfig::default()
        };
        let triples = build_preference_triples(&Policy::uniform(1, 2), &set(2, &[0; 50]), &cfg, 3).unwrap();
        assert!(triples.iter().all(|t| t.rejected == vec![1]));
    }

    #[test]
    fn self_play_degenerate_sampler() {
        let mut logits = vec![0.0; 10];
        logits[7] = 60.0;
        let pol = Policy::from_logits(1, 10, logits).unwrap();
        let cfg = TrainConfig::default();
        let positives: Vec<usize> = (0..40).map(|i| i % 7).collect();
        let triples = build_preference_triples(&pol, &set(10, &positives), &cfg, 1).unwrap();
        assert!(triples.iter().all(|t| t.rejected == vec![7]));
    }

    #[test]
    fn self_play_falls_back_to_ranking() {
        // the only item with mass is the positive itself
        let mut logits = vec![0.0; 4];
        logits[2] = 800.0;
        logits[1] = 1.0;
        let pol = Policy::from_logits(1, 4, logits).unwrap();
        let triples = build_preference_triples(&pol, &set(4, &[2]), &TrainConfig::default(), 0).unwrap();
        assert_eq!(triples[0].rejected, vec![1]);
    }

    #[test]
    fn single_item_catalog_rejected() {
        let err = build_preference_triples(&Policy::uniform(1, 1), &set(1, &[0]), &TrainConfig::default(), 0);
        assert!(err.is_err());
    }

    #[test]
    fn mixed_endpoints_match_pure_strategies() {
        let logits: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let pol = Policy::from_logits(1, 12, logits).unwrap();
        let positives: Vec<usize> = (0..200).map(|i| (i * 5) % 12).collect();
        let data = set(12, &positives);
        for n_negatives in [1, 3] {
            let with = |negatives, contamination| TrainConfig {
                negatives,
                contamination,
                n_negatives,
                ..TrainConfig::default()
            };
            let strip = |v: Vec<PreferenceTriple>| v.into_iter().map(|t| (t.chosen, t.rejected)).collect::<Vec<_>>();
            let mixed0 = build_preference_triples(&pol, &data, &with(NegativeStrategy::Mixed, 0.0), 9).unwrap();
            let pure_sp = build_preference_triples(&pol, &data, &with(NegativeStrategy::SelfPlay, 0.0), 9).unwrap();
            assert_eq!(strip(mixed0), strip(pure_sp));
            let mixed1 = build_preference_triples(&pol, &data, &with(NegativeStrategy::Mixed, 1.0), 9).unwrap();
            let pure_u = build_preference_triples(&pol, &data, &with(NegativeStrategy::Uniform, 0.0), 9).unwrap();
            assert_eq!(strip(mixed1), strip(pure_u));
        }
    }

    #[test]
    fn sft_concentrates_on_single_item() {
        let cfg = TrainConfig {
            epochs_per_step: 400,
            ..TrainConfig::default()
        };
        let pol = sft_step(&Policy::uniform(1, 5), &set(5, &[3; 10]), &cfg).unwrap();
        assert!(pol.probs(0).unwrap()[3] > 0.99);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let init = Policy::from_logits(1, 3, vec![0.1, -0.4, 0.25]).unwrap();
        let cfg = TrainConfig {
            lr_sft: 0.0,
            lr_dpo: 0.0,
            ..TrainConfig::default()
        };
        let data = set(3, &[0, 1, 1]);
        assert_eq!(sft_step(&init, &data, &cfg).unwrap(), init);
        let triples = vec![PreferenceTriple::new(0, 0, vec![2], NegativeSource::Uniform).unwrap()];
        assert_eq!(dpo_step(&init, &init, &triples, &cfg).unwrap(), init);
    }

    #[test]
    fn dpo_single_triple_separates_pair() {
        let init = Policy::uniform(1, 4);
        let triples = vec![PreferenceTriple::new(0, 1, vec![3], NegativeSource::Uniform).unwrap()];
        let pol = dpo_step(&init, &init, &triples, &TrainConfig::default()).unwrap();
        let p = pol.probs(0).unwrap();
        assert!(p[1] > p[3]);
        assert!(dpo_step(&init, &init, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        // logit gaps overflow to infinity in both policies, so the margin is inf - inf
        let pol = Policy::from_logits(1, 2, vec![1e308, -1e308]).unwrap();
        let triples = vec![PreferenceTriple::new(0, 0, vec![1], NegativeSource::Uniform).unwrap()];
        let err = dpo_step(&pol, &pol, &triples, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { phase: "dpo", epoch: 0, .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn baseline_is_single_uniform_iteration() {
        let cat = crate::catalog::CatalogParams {
            n_items: 12,
            n_groups: 3,
            ..Default::default()
        }
        .build()
        .unwrap();
        let data = crate::catalog::sample_interactions(&cat, 64, 5).unwrap();
        let cfg = TrainConfig {
            epochs_per_step: 10,
            seed: 4,
            ..TrainConfig::default()
        };
        let init = Policy::uniform(1, 12);
        let a = train_dpo_baseline(&init, &data, &cfg).unwrap();
        let b = sprec_run(
            &init,
            &data,
            &TrainConfig {
                iterations: 1,
                negatives: NegativeStrategy::Uniform,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(a, b);
        let sft = train_sft_only(&init, &data, &cfg).unwrap();
        assert_eq!(sft.last().policy, a.find(1, Phase::PostSft).unwrap().policy);
    }
}

//! Experiment specifications, built-in presets and the flat `key = value`
//! configuration format.
//!
//! Recognized keys:
//!
//! ```text
//! name, output_dir, seed, replications, n_train, n_validation
//! catalog.{n_items, n_categories, n_contexts, zipf_exponent, n_groups, categories, seed}
//! train.{beta, lr_sft, lr_dpo, epochs_per_step, iterations, negatives,
//!        n_negatives, contamination, subsample_fraction, sampler}
//! eval.{k, top_m, mode}
//! arms = name:kind, name:kind, ...        kind ∈ sft_only | dpo | sprec
//! arm.<name>.<train key> = value          per-arm override of a train.* key
//! verify.{instances, n_items, reward_items, betas}
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogParams, CategoryAssignment};
use crate::metrics::{Evaluator, RecommendMode};
use crate::training::{NegativeStrategy, SamplerSnapshot, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    SftOnly,
    Dpo,
    Sprec,
}

impl ArmKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "sft_only" => Ok(Self::SftOnly),
            "dpo" => Ok(Self::Dpo),
            "sprec" => Ok(Self::Sprec),
            _ => Err(Error::invalid("arms", format!("unknown arm kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub kind: ArmKind,
    /// `train.*` keys (without the prefix) overridden for this arm.
    pub overrides: BTreeMap<String, String>,
}

impl ArmSpec {
    pub fn new(name: &str, kind: ArmKind) -> Self {
        Self {
            name: name.into(),
            kind,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.overrides.insert(key.into(), value.into());
        self
    }

    /// The arm's training configuration on top of the experiment's.
    pub fn train_config(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            set_train_key(&mut cfg, k, v).map_err(|e| match e {
                Error::Invalid { reason, .. } => Error::invalid(format!("arm.{}.{}", self.name, k), reason),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Train,
    Verify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySpec {
    pub instances: usize,
    pub n_items: usize,
    pub reward_items: usize,
    pub betas: Vec<f64>,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            instances: 5,
            n_items: 20,
            reward_items: 10,
            betas: vec![0.1, 0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub replications: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub catalog: CatalogParams,
    pub train: TrainConfig,
    pub eval: Evaluator,
    pub arms: Vec<ArmSpec>,
    pub verify: VerifySpec,
    pub output_dir: PathBuf,
}

pub const PRESETS: &[&str] = &[
    "fig1",
    "verify-theorem",
    "ablation-negatives",
    "rho-sweep",
    "nneg-sweep",
    "beta-sweep",
];

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            kind: ExperimentKind::Train,
            seed: 0,
            replications: 1,
            n_train: 4096,
            n_validation: 512,
            catalog: CatalogParams::default(),
            train: TrainConfig::default(),
            eval: Evaluator::default(),
            arms: vec![ArmSpec::new("sft_only", ArmKind::SftOnly)],
            verify: VerifySpec::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentSpec {
    pub fn preset(name: &str) -> Result<Self> {
        // shared by every training preset
        let cold_start = |name: &str, arms: Vec<ArmSpec>| {
            let mut spec = Self {
                name: name.into(),
                replications: 3,
                arms,
                ..Self::default()
            };
            spec.train.lr_dpo = 0.3;
            spec.train.sampler = SamplerSnapshot::PostSft;
            spec.output_dir = PathBuf::from(format!("out/{name}"));
            spec
        };
        let sft = || ArmSpec::new("sft_only", ArmKind::SftOnly);
        let spec = match name {
            "fig1" => cold_start(
                name,
                vec![
                    sft(),
                    ArmSpec::new("dpo_uniform", ArmKind::Dpo),
                    ArmSpec::new("sprec_T5", ArmKind::Sprec).with("negatives", "self_play"),
                ],
            ),
            "ablation-negatives" => cold_start(
                name,
                vec![
                    sft(),
                    ArmSpec::new("sprec_uniform", ArmKind::Sprec).with("negatives", "uniform"),
                    ArmSpec::new("sprec_self_play", ArmKind::Sprec).with("negatives", "self_play"),
                    ArmSpec::new("sprec_beam", ArmKind::Sprec).with("negatives", "beam"),
                ],
            ),
            "rho-sweep" => {
                let mut arms = vec![sft()];
                for rho in ["0", "0.25", "0.5", "0.75", "1"] {
                    arms.push(
                        ArmSpec::new(&format!("sprec_rho{rho}"), ArmKind::Sprec)
                            .with("negatives", "mixed")
                            .with("contamination", rho),
                    );
                }
                cold_start(name, arms)
            }
            "nneg-sweep" => {
                let mut arms = vec![sft()];
                for n in ["1", "2", "4", "8"] {
                    arms.push(
                        ArmSpec::new(&format!("sprec_beam_n{n}"), ArmKind::Sprec)
                            .with("negatives", "beam")
                            .with("n_negatives", n),
                    );
                }
                cold_start(name, arms)
            }
            "beta-sweep" => {
                let mut arms = vec![sft()];
                for b in ["0.1", "0.5", "0.9"] {
                    arms.push(ArmSpec::new(&format!("dpo_beta{b}"), ArmKind::Dpo).with("beta", b));
                }
                cold_start(name, arms)
            }
            "verify-theorem" => Self {
                name: name.into(),
                kind: ExperimentKind::Verify,
                arms: Vec::new(),
                output_dir: PathBuf::from("out/verify-theorem"),
                ..Self::default()
            },
            _ => {
                return Err(Error::invalid(
                    "preset",
                    format!("unknown preset `{name}` (known: {})", PRESETS.join(", ")),
                ))
            }
        };
        Ok(spec)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        if let Some(k) = key.strip_prefix("train.") {
            return set_train_key(&mut self.train, k, value);
        }
        if let Some(rest) = key.strip_prefix("arm.") {
            let (arm, k) = rest
                .split_once('.')
                .ok_or_else(|| Error::invalid(key, "expected arm.<name>.<key>"))?;
            let spec = self
                .arms
                .iter_mut()
                .find(|a| a.name == arm)
                .ok_or_else(|| Error::invalid(key, format!("no arm named `{arm}`")))?;
            // validate eagerly so the error names the offending key
            set_train_key(&mut TrainConfig::default(), k, value)?;
            spec.overrides.insert(k.into(), value.into());
            return Ok(());
        }
        match key {
            "name" => self.name = value.into(),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "replications" => self.replications = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_validation" => self.n_validation = parse(key, value)?,
            "catalog.n_items" => self.catalog.n_items = parse(key, value)?,
            "catalog.n_categories" => self.catalog.n_categories = parse(key, value)?,
            "catalog.n_contexts" => self.catalog.n_contexts = parse(key, value)?,
            "catalog.zipf_exponent" => self.catalog.zipf_exponent = parse(key, value)?,
            "catalog.n_groups" => self.catalog.n_groups = parse(key, value)?,
            "catalog.seed" => self.catalog.seed = parse(key, value)?,
            "catalog.categories" => {
                self.catalog.categories = match value {
                    "independent" => CategoryAssignment::Independent,
                    "by_popularity" => CategoryAssignment::ByPopularity,
                    _ => return Err(Error::invalid(key, "expected independent or by_popularity")),
                }
            }
            "eval.k" => self.eval.k = parse(key, value)?,
            "eval.top_m" => self.eval.top_m = parse(key, value)?,
            "eval.mode" => {
                self.eval.mode = match value {
                    "sampled" => RecommendMode::Sampled,
                    "greedy" => RecommendMode::Greedy,
                    _ => return Err(Error::invalid(key, "expected sampled or greedy")),
                }
            }
            "arms" => {
                let mut arms = Vec::new();
                for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (name, kind) = item
                        .split_once(':')
                        .ok_or_else(|| Error::invalid(key, format!("expected name:kind, got `{item}`")))?;
                    arms.push(ArmSpec::new(name.trim(), ArmKind::parse(kind.trim())?));
                }
                self.arms = arms;
            }
            "verify.instances" => self.verify.instances = parse(key, value)?,
            "verify.n_items" => self.verify.n_items = parse(key, value)?,
            "verify.reward_items" => self.verify.reward_items = parse(key, value)?,
            "verify.betas" => {
                self.verify.betas = value
                    .split(',')
                    .map(|b| parse(key, b.trim()))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::invalid(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Applies every setting of a `key = value` document. A `preset` key,
    /// if present, must come first and replaces the whole spec.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, pair) in parse_kv(text)?.into_iter().enumerate() {
            let (k, v) = pair;
            if k == "preset" {
                if n != 0 {
                    return Err(Error::invalid("preset", "must be the first setting"));
                }
                *self = Self::preset(&v)?;
                continue;
            }
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("replications", "must be at least 1"));
        }
        self.train.validate()?;
        self.catalog.build()?;
        match self.kind {
            ExperimentKind::Train => {
                if self.arms.is_empty() {
                    return Err(Error::invalid("arms", "need at least one arm"));
                }
                for (i, a) in self.arms.iter().enumerate() {
                    if a.name.is_empty() || a.name.contains(['/', ',', ':', '\\']) {
                        return Err(Error::invalid(format!("arms[{i}]"), "bad arm name"));
                    }
                    if self.arms[..i].iter().any(|b| b.name == a.name) {
                        return Err(Error::invalid("arms", format!("duplicate arm name `{}`", a.name)));
                    }
                    a.train_config(&self.train)?;
                }
                if self.n_train == 0 || self.n_validation == 0 {
                    return Err(Error::invalid("n_train/n_validation", "must be at least 1"));
                }
                if self.eval.k == 0 || self.eval.k > self.catalog.n_items {
                    return Err(Error::invalid("eval.k", "must lie in 1..=n_items"));
                }
                if self.eval.top_m == 0 {
                    return Err(Error::invalid("eval.top_m", "must be at least 1"));
                }
            }
            ExperimentKind::Verify => {
                if self.verify.instances == 0 {
                    return Err(Error::invalid("verify.instances", "must be at least 1"));
                }
                if self.verify.n_items < 2 || self.verify.reward_items < 2 {
                    return Err(Error::invalid("verify.n_items", "need at least 2 items"));
                }
                if self.verify.betas.iter().any(|b| !(*b > 0.0)) || self.verify.betas.is_empty() {
                    return Err(Error::invalid("verify.betas", "need positive betas"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses a flat `key = value` document into ordered pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}", n + 1), "expected key = value"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(key, format!("cannot parse `{value}`")))
}

fn set_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let full = format!("train.{key}");
    match key {
        "beta" => cfg.beta = parse(&full, value)?,
        "lr_sft" => cfg.lr_sft = parse(&full, value)?,
        "lr_dpo" => cfg.lr_dpo = parse(&full, value)?,
        "epochs_per_step" => cfg.epochs_per_step = parse(&full, value)?,
        "iterations" => cfg.iterations = parse(&full, value)?,
        "n_negatives" => cfg.n_negatives = parse(&full, value)?,
        "contamination" => cfg.contamination = parse(&full, value)?,
        "subsample_fraction" => cfg.subsample_fraction = parse(&full, value)?,
        "negatives" => {
            cfg.negatives = match value {
                "uniform" => NegativeStrategy::Uniform,
                "self_play" => NegativeStrategy::SelfPlay,
                "beam" => NegativeStrategy::Beam,
                "mixed" => NegativeStrategy::Mixed,
                _ => return Err(Error::invalid(full, "expected uniform, self_play, beam or mixed")),
            }
        }
        "sampler" => {
            cfg.sampler = match value {
                "pre_sft" => SamplerSnapshot::PreSft,
                "post_sft" => SamplerSnapshot::PostSft,
                _ => return Err(Error::invalid(full, "expected pre_sft or post_sft")),
            }
        }
        _ => return Err(Error::invalid(full, "unknown training key")),
    }
    Ok(())
}

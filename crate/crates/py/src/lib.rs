//! Python bindings for the simulation lab.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use sprec_core::catalog::{self, CatalogParams, InteractionSet, ItemCatalog};
use sprec_core::harness::{self, ExperimentSpec};
use sprec_core::losses::{self, NegativeSource, PreferenceTriple};
use sprec_core::metrics;
use sprec_core::policy::Policy;
use sprec_core::theory::{self, OptConfig};
use sprec_core::training::{self, NegativeStrategy, SamplerSnapshot};
use sprec_core::Error;

create_exception!(sprec, DivergenceError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } | Error::NotConverged { .. } => DivergenceError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Catalog", module = "sprec", from_py_object)]
#[derive(Clone)]
struct PyCatalog {
    inner: ItemCatalog,
}

#[pymethods]
impl PyCatalog {
    #[new]
    #[pyo3(signature = (n_items=100, n_categories=8, n_contexts=1, zipf_exponent=1.2, n_groups=5, seed=0))]
    fn new(
        n_items: usize,
        n_categories: usize,
        n_contexts: usize,
        zipf_exponent: f64,
        n_groups: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = CatalogParams {
            n_items,
            n_categories,
            n_contexts,
            zipf_exponent,
            n_groups,
            seed,
            ..CatalogParams::default()
        }
        .build()
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items
    }

    #[getter]
    fn n_groups(&self) -> usize {
        self.inner.n_groups
    }

    #[getter]
    fn group_of(&self) -> Vec<usize> {
        self.inner.group_of.clone()
    }

    #[getter]
    fn category_of(&self) -> Vec<usize> {
        self.inner.category_of.clone()
    }

    #[pyo3(signature = (context=0))]
    fn popularity(&self, context: usize) -> PyResult<Vec<f64>> {
        self.inner.popularity(context).map(<[f64]>::to_vec).map_err(to_py)
    }

    fn group_mass(&self, dist: Vec<f64>) -> Vec<f64> {
        self.inner.group_mass(&dist)
    }

    /// `n` positives as a list of `(context, item)`.
    fn sample_interactions(&self, n: usize, seed: u64) -> PyResult<Vec<(usize, usize)>> {
        Ok(catalog::sample_interactions(&self.inner, n, seed).map_err(to_py)?.records)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ItemCatalog::from_json(s).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Catalog(n_items={}, n_contexts={}, n_groups={})",
            self.inner.n_items, self.inner.n_contexts, self.inner.n_groups
        )
    }
}

#[pyclass(name = "Policy", module = "sprec", from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: Policy,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn uniform(n_contexts: usize, n_items: usize) -> Self {
        Self {
            inner: Policy::uniform(n_contexts, n_items),
        }
    }

    #[staticmethod]
    fn from_logits(n_contexts: usize, n_items: usize, logits: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: Policy::from_logits(n_contexts, n_items, logits).map_err(to_py)?,
        })
    }

    #[getter]
    fn logits(&self) -> Vec<f64> {
        self.inner.logits().to_vec()
    }

    #[pyo3(signature = (context=0))]
    fn probs(&self, context: usize) -> PyResult<Vec<f64>> {
        self.inner.probs(context).map_err(to_py)
    }

    fn top_k_items(&self, context: usize, k: usize) -> PyResult<Vec<usize>> {
        self.inner.top_k_items(context, k).map_err(to_py)
    }

    fn beam_negatives(&self, context: usize, n: usize, exclude: usize) -> PyResult<Vec<usize>> {
        self.inner.beam_negatives(context, n, exclude).map_err(to_py)
    }

    fn sample_items(&self, context: usize, n: usize, seed: u64) -> PyResult<Vec<usize>> {
        let mut rng = sprec_core::rng::rng_from_seed(seed);
        (0..n)
            .map(|_| self.inner.sample_item(context, &mut rng).map_err(to_py))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Policy::from_json(s).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Policy(n_contexts={}, n_items={})",
            self.inner.n_contexts(),
            self.inner.n_items()
        )
    }
}

#[pyclass(name = "TrainConfig", module = "sprec", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    #[pyo3(get, set)]
    beta: f64,
    #[pyo3(get, set)]
    lr_sft: f64,
    #[pyo3(get, set)]
    lr_dpo: f64,
    #[pyo3(get, set)]
    epochs_per_step: usize,
    #[pyo3(get, set)]
    iterations: usize,
    /// One of `uniform`, `self_play`, `beam`, `mixed`.
    #[pyo3(get, set)]
    negatives: String,
    #[pyo3(get, set)]
    n_negatives: usize,
    #[pyo3(get, set)]
    contamination: f64,
    #[pyo3(get, set)]
    subsample_fraction: f64,
    /// `pre_sft` or `post_sft`.
    #[pyo3(get, set)]
    sampler: String,
    #[pyo3(get, set)]
    seed: u64,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let d = training::TrainConfig::default();
        let mut cfg = Self {
            beta: d.beta,
            lr_sft: d.lr_sft,
            lr_dpo: d.lr_dpo,
            epochs_per_step: d.epochs_per_step,
            iterations: d.iterations,
            negatives: "self_play".into(),
            n_negatives: d.n_negatives,
            contamination: d.contamination,
            subsample_fraction: d.subsample_fraction,
            sampler: "pre_sft".into(),
            seed: d.seed,
        };
        if let Some(kw) = kwargs {
            let py = kw.py();
            let obj = Bound::new(py, cfg)?;
            for (k, v) in kw.iter() {
                obj.setattr(k.extract::<String>()?.as_str(), v)?;
            }
            cfg = obj.borrow().clone();
        }
        cfg.to_core()?;
        Ok(cfg)
    }
}

impl PyTrainConfig {
    fn to_core(&self) -> PyResult<training::TrainConfig> {
        let negatives = match self.negatives.as_str() {
            "uniform" => NegativeStrategy::Uniform,
            "self_play" => NegativeStrategy::SelfPlay,
            "beam" => NegativeStrategy::Beam,
            "mixed" => NegativeStrategy::Mixed,
            other => return Err(PyValueError::new_err(format!("unknown negative strategy `{other}`"))),
        };
        let sampler = match self.sampler.as_str() {
            "pre_sft" => SamplerSnapshot::PreSft,
            "post_sft" => SamplerSnapshot::PostSft,
            other => return Err(PyValueError::new_err(format!("unknown sampler `{other}`"))),
        };
        let cfg = training::TrainConfig {
            beta: self.beta,
            lr_sft: self.lr_sft,
            lr_dpo: self.lr_dpo,
            epochs_per_step: self.epochs_per_step,
            iterations: self.iterations,
            negatives,
            n_negatives: self.n_negatives,
            contamination: self.contamination,
            subsample_fraction: self.subsample_fraction,
            sampler,
            seed: self.seed,
        };
        cfg.validate().map_err(to_py)?;
        Ok(cfg)
    }
}

fn interactions(policy: &Policy, records: Vec<(usize, usize)>) -> PyResult<InteractionSet> {
    InteractionSet::from_records(policy.n_contexts(), policy.n_items(), records).map_err(to_py)
}

/// Runs the self-play loop (or, with `baseline=True`, one SFT + uniform DPO
/// iteration) and returns `[(iteration, phase, Policy)]`.
#[pyfunction]
#[pyo3(signature = (init, records, config, baseline=false))]
fn sprec_run(
    init: &PyPolicy,
    records: Vec<(usize, usize)>,
    config: &PyTrainConfig,
    baseline: bool,
) -> PyResult<Vec<(usize, String, PyPolicy)>> {
    let set = interactions(&init.inner, records)?;
    let cfg = config.to_core()?;
    let traj = if baseline {
        training::train_dpo_baseline(&init.inner, &set, &cfg)
    } else {
        training::sprec_run(&init.inner, &set, &cfg)
    }
    .map_err(to_py)?;
    Ok(traj
        .snapshots
        .into_iter()
        .map(|s| (s.iteration, s.phase.as_str().to_string(), PyPolicy { inner: s.policy }))
        .collect())
}

/// `(value, grad)` of the multi-negative DPO loss for one triple.
#[pyfunction]
fn dpo_loss(
    policy: &PyPolicy,
    reference: &PyPolicy,
    context: usize,
    chosen: usize,
    rejected: Vec<usize>,
    beta: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let t = PreferenceTriple::new(context, chosen, rejected, NegativeSource::Uniform).map_err(to_py)?;
    let l = losses::multi_negative_dpo_loss(&policy.inner, &reference.inner, &t, beta).map_err(to_py)?;
    Ok((l.value, l.grad))
}

/// `(value, grad)` of the mean NLL of `records`.
#[pyfunction]
fn sft_loss(policy: &PyPolicy, records: Vec<(usize, usize)>) -> PyResult<(f64, Vec<f64>)> {
    let set = interactions(&policy.inner, records)?;
    let l = losses::sft_loss(&policy.inner, &set).map_err(to_py)?;
    Ok((l.value, l.grad))
}

#[pyfunction]
fn closed_form_optimal_policy(reference: Vec<f64>, p: Vec<f64>, q: Vec<f64>, beta: f64) -> PyResult<Vec<f64>> {
    theory::closed_form_optimal_policy(&reference, &p, &q, beta).map_err(to_py)
}

#[pyfunction]
fn closed_form_optimal_reward(p: Vec<f64>, q: Vec<f64>) -> PyResult<Vec<f64>> {
    theory::closed_form_optimal_reward(&p, &q).map_err(to_py)
}

/// Returns `(probs, iterations, grad_norm, converged)`.
#[pyfunction]
#[pyo3(signature = (reference, p, q, beta, learning_rate=0.5, max_iters=200_000, tolerance=1e-8))]
fn exact_dpo_optimize(
    reference: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    beta: f64,
    learning_rate: f64,
    max_iters: usize,
    tolerance: f64,
) -> PyResult<(Vec<f64>, usize, f64, bool)> {
    let cfg = OptConfig {
        learning_rate,
        max_iters,
        tolerance,
    };
    let o = theory::exact_dpo_optimize(&reference, &p, &q, beta, &cfg).map_err(to_py)?;
    Ok((o.solution, o.iterations, o.grad_norm, o.converged))
}

/// Returns `(centered log-rewards, floored items, converged)`.
#[pyfunction]
fn exact_bt_reward_optimize(p: Vec<f64>, q: Vec<f64>) -> PyResult<(Vec<f64>, Vec<usize>, bool)> {
    let o = theory::exact_bt_reward_optimize(&p, &q, &OptConfig::default()).map_err(to_py)?;
    Ok((o.solution.log_reward, o.solution.floored, o.converged))
}

/// `[(beta, top1_mass, entropy)]` for a descending β grid.
#[pyfunction]
fn beta_sharpening_curve(
    reference: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    betas: Vec<f64>,
) -> PyResult<Vec<(f64, f64, f64)>> {
    Ok(theory::beta_sharpening_curve(&reference, &p, &q, &betas)
        .map_err(to_py)?
        .into_iter()
        .map(|s| (s.beta, s.top1_mass, s.entropy))
        .collect())
}

#[pyfunction]
fn total_variation(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    metrics::total_variation(&p, &q).map_err(to_py)
}

/// Runs a preset with `key=value` overrides into `output_dir` and returns
/// `(passed, summary_json)`.
#[pyfunction]
#[pyo3(signature = (preset, output_dir, overrides=None))]
fn run_experiment(
    preset: &str,
    output_dir: PathBuf,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<(bool, String)> {
    let mut spec = ExperimentSpec::preset(preset).map_err(to_py)?;
    for (k, v) in overrides.unwrap_or_default() {
        spec.set(&k, &v).map_err(to_py)?;
    }
    spec.output_dir = output_dir.clone();
    let outcome = harness::run_experiment(&spec).map_err(to_py)?;
    let summary = std::fs::read_to_string(output_dir.join("summary.json")).map_err(|e| to_py(e.into()))?;
    Ok((outcome.passed(), summary))
}

/// Writes `report.csv` / `report.json` and returns the number of long rows.
#[pyfunction]
fn emit_report(dir: PathBuf) -> PyResult<usize> {
    Ok(harness::emit_report(&dir).map_err(to_py)?.rows.len())
}

#[pymodule]
fn sprec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCatalog>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    m.add_function(wrap_pyfunction!(sprec_run, m)?)?;
    m.add_function(wrap_pyfunction!(sft_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_optimal_policy, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_optimal_reward, m)?)?;
    m.add_function(wrap_pyfunction!(exact_dpo_optimize, m)?)?;
    m.add_function(wrap_pyfunction!(exact_bt_reward_optimize, m)?)?;
    m.add_function(wrap_pyfunction!(beta_sharpening_curve, m)?)?;
    m.add_function(wrap_pyfunction!(total_variation, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(emit_report, m)?)?;
    Ok(())
}

//! Tabular softmax policy: one logit row per context.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{log_softmax, softmax};
use crate::{Error, Result};

/// `π_θ(y|x) = softmax(logits[x])[y]`.
///
/// Serialized as `{"n_contexts": C, "n_items": I, "logits": [C*I floats, row-major]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    n_contexts: usize,
    n_items: usize,
    logits: Vec<f64>,
}

impl Policy {
    /// All-zero logits, i.e. the uniform policy.
    pub fn uniform(n_contexts: usize, n_items: usize) -> Self {
        Self {
            n_contexts,
            n_items,
            logits: vec![0.0; n_contexts * n_items],
        }
    }

    pub fn from_logits(n_contexts: usize, n_items: usize, logits: Vec<f64>) -> Result<Self> {
        if n_contexts == 0 || n_items == 0 {
            return Err(Error::invalid("policy.shape", "contexts and items must be positive"));
        }
        if logits.len() != n_contexts * n_items {
            return Err(Error::invalid(
                "policy.logits",
                format!("expected {} values, got {}", n_contexts * n_items, logits.len()),
            ));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::invalid("policy.logits", "logits must be finite"));
        }
        Ok(Self {
            n_contexts,
            n_items,
            logits,
        })
    }

    /// Policy whose row for every context is `log(probs)`; zero entries get a
    /// logit of -745 (below which `exp` underflows).
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let n_items = rows.first().map_or(0, Vec::len);
        let logits = rows
            .iter()
            .flat_map(|row| row.iter().map(|&p| if p > 0.0 { p.ln() } else { -745.0 }))
            .collect();
        Self::from_logits(rows.len(), n_items, logits)
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn check_context(&self, context: usize) -> Result<()> {
        if context < self.n_contexts {
            Ok(())
        } else {
            Err(Error::ContextOutOfRange {
                context,
                n_contexts: self.n_contexts,
            })
        }
    }

    pub fn row(&self, context: usize) -> Result<&[f64]> {
        self.check_context(context)?;
        Ok(&self.logits[context * self.n_items..(context + 1) * self.n_items])
    }

    pub(crate) fn row_unchecked(&self, context: usize) -> &[f64] {
        &self.logits[context * self.n_items..(context + 1) * self.n_items]
    }

    pub fn probs(&self, context: usize) -> Result<Vec<f64>> {
        Ok(softmax(self.row(context)?))
    }

    pub fn log_probs(&self, context: usize) -> Result<Vec<f64>> {
        Ok(log_softmax(self.row(context)?))
    }

    /// Re-centers every row to zero mean. The distribution is unchanged up
    /// to rounding.
    pub fn recenter(&mut self) {
        let n = self.n_items;
        for row in self.logits.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            for z in row {
                *z -= mean;
            }
        }
    }

    /// `logits -= lr * grad`, in place.
    pub(crate) fn descend(&mut self, grad: &[f64], lr: f64) {
        debug_assert_eq!(grad.len(), self.logits.len());
        for (z, g) in self.logits.iter_mut().zip(grad) {
            *z -= lr * g;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.logits.iter().all(|z| z.is_finite())
    }

    pub fn sample_item(&self, context: usize, rng: &mut impl Rng) -> Result<usize> {
        let p = self.probs(context)?;
        Ok(crate::catalog::sample_categorical(&p, rng))
    }

    /// Items ordered by descending probability, ties by ascending id.
    pub fn ranking(&self, context: usize) -> Result<Vec<usize>> {
        let row = self.row(context)?;
        let mut order: Vec<usize> = (0..self.n_items).collect();
        // logits order items exactly as probabilities do, without underflow ties
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        Ok(order)
    }

    pub fn top_k_items(&self, context: usize, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n_items {
            return Err(Error::invalid("k", format!("must lie in 1..={}", self.n_items)));
        }
        let mut order = self.ranking(context)?;
        order.truncate(k);
        Ok(order)
    }

    /// Tabular stand-in for beam-search negative generation: take the top
    /// `2n` items, drop `exclude`, keep the `n` most probable.
    ///
    /// Requires `n < n_items` so that `n` items besides `exclude` exist; the
    /// result then always has exactly `n` entries.
    pub fn beam_negatives(&self, context: usize, n: usize, exclude: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::invalid("n_negatives", "must be at least 1"));
        }
        if n >= self.n_items {
            return Err(Error::invalid(
                "n_negatives",
                format!("{n} negatives need more than {} items", self.n_items),
            ));
        }
        let beam = self.top_k_items(context, (2 * n).min(self.n_items))?;
        let mut out = Vec::with_capacity(n);
        for item in beam {
            if item != exclude && !out.contains(&item) {
                out.push(item);
                if out.len() == n {
                    break;
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Policy = serde_json::from_str(s)?;
        Self::from_logits(raw.n_contexts, raw.n_items, raw.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn uniform_probs() {
        let p = Policy::uniform(1, 3).probs(0).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ln_two_logit() {
        let pol = Policy::from_logits(1, 2, vec![2f64.ln(), 0.0]).unwrap();
        let p = pol.probs(0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huge_gap_no_overflow() {
        let pol = Policy::from_logits(1, 2, vec![1000.0, 0.0]).unwrap();
        let p = pol.probs(0).unwrap();
        // e^{-1000} is below the smallest subnormal, so the exact answer rounds to [1, 0]
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1] < 1e-12);
        let lp = pol.log_probs(0).unwrap();
        assert!((lp[1] + 1000.0).abs() < 1e-12);
    }

    #[test]
    fn context_out_of_range() {
        let pol = Policy::uniform(2, 3);
        assert!(matches!(pol.probs(2), Err(Error::ContextOutOfRange { .. })));
    }

    #[test]
    fn peaked_sampling() {
        let mut logits = vec![0.0; 10];
        logits[6] = 50.0;
        let pol = Policy::from_logits(1, 10, logits).unwrap();
        let mut rng = rng_from_seed(1);
        for _ in 0..10_000 {
            assert_eq!(pol.sample_item(0, &mut rng).unwrap(), 6);
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let pol = Policy::uniform(1, 4);
        let mut rng = rng_from_seed(2);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[pol.sample_item(0, &mut rng).unwrap()] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 16.27, "chi2 {chi2}"); // 3 dof, 99.9%
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn sampling_reproducible() {
        let pol = Policy::from_logits(1, 5, vec![0.1, 0.7, -0.3, 0.0, 1.2]).unwrap();
        let draw = |seed| {
            let mut rng = rng_from_seed(seed);
            (0..50).map(|_| pol.sample_item(0, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn top_k_examples() {
        let pol = Policy::from_probs(&[vec![0.5, 0.2, 0.3]]).unwrap();
        assert_eq!(pol.top_k_items(0, 2).unwrap(), vec![0, 2]);
        let flat = Policy::uniform(1, 5);
        assert_eq!(flat.top_k_items(0, 3).unwrap(), vec![0, 1, 2]);
        assert!(flat.top_k_items(0, 0).is_err());
        assert!(flat.top_k_items(0, 6).is_err());
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut rng = rng_from_seed(17);
        let logits: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let pol = Policy::from_logits(1, 50, logits).unwrap();
        let probs = pol.probs(0).unwrap();
        let mut oracle: Vec<(f64, usize)> = probs.iter().copied().zip(0..).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let oracle: Vec<usize> = oracle.into_iter().map(|(_, i)| i).take(10).collect();
        assert_eq!(pol.top_k_items(0, 10).unwrap(), oracle);
    }

    #[test]
    fn beam_excludes_positive() {
        let pol = Policy::from_probs(&[vec![0.7, 0.1, 0.15, 0.05]]).unwrap();
        assert_eq!(pol.beam_negatives(0, 1, 0).unwrap(), vec![2]);
        let flat = Policy::uniform(1, 6);
        assert_eq!(flat.beam_negatives(0, 1, 3).unwrap(), vec![0]);
        assert_eq!(flat.beam_negatives(0, 1, 0).unwrap(), vec![1]);
        assert!(flat.beam_negatives(0, 6, 0).is_err());
        assert!(flat.beam_negatives(0, 0, 0).is_err());
    }

    #[test]
    fn beam_matches_sort_drop_take_oracle() {
        let mut rng = rng_from_seed(23);
        let logits: Vec<f64> = (0..100).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pol = Policy::from_logits(1, 100, logits.clone()).unwrap();
        for exclude in [0usize, 17, 99] {
            let mut order: Vec<usize> = (0..100).collect();
            order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
            let oracle: Vec<usize> = order.into_iter().filter(|&i| i != exclude).take(4).collect();
            assert_eq!(pol.beam_negatives(0, 4, exclude).unwrap(), oracle);
        }
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let pol = Policy::from_logits(2, 2, vec![0.5, -0.5, 1.0, 2.0]).unwrap();
        assert_eq!(Policy::from_json(&pol.to_json().unwrap()).unwrap(), pol);
        assert!(Policy::from_json(r#"{"n_contexts":1,"n_items":2,"logits":[0.0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-500.0f64..500.0, 1..40)) {
            let n = logits.len();
            let pol = Policy::from_logits(1, n, logits).unwrap();
            let p = pol.probs(0).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn shift_invariance(logits in proptest::collection::vec(-20.0f64..20.0, 2..30), shift in -100.0f64..100.0) {
            let n = logits.len();
            let a = Policy::from_logits(1, n, logits.clone()).unwrap();
            let b = Policy::from_logits(1, n, logits.iter().map(|z| z + shift).collect()).unwrap();
            let mut c = a.clone();
            c.recenter();
            let (pa, pb, pc) = (a.probs(0).unwrap(), b.probs(0).unwrap(), c.probs(0).unwrap());
            for i in 0..n {
                prop_assert!((pa[i] - pb[i]).abs() < 1e-12);
                prop_assert!((pa[i] - pc[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn full_ranking_is_permutation(logits in proptest::collection::vec(-5.0f64..5.0, 1..60)) {
            let n = logits.len();
            let pol = Policy::from_logits(1, n, logits).unwrap();
            let mut r = pol.top_k_items(0, n).unwrap();
            r.sort_unstable();
            prop_assert_eq!(r, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn beam_has_no_duplicates(logits in proptest::collection::vec(-5.0f64..5.0, 3..60), n in 1usize..10, ex in 0usize..60) {
            let items = logits.len();
            let n = n.min(items - 1);
            let ex = ex % items;
            let pol = Policy::from_logits(1, items, logits).unwrap();
            let neg = pol.beam_negatives(0, n, ex).unwrap();
            prop_assert_eq!(neg.len(), n);
            prop_assert!(!neg.contains(&ex));
            let mut d = neg.clone();
            d.sort_unstable();
            d.dedup();
            prop_assert_eq!(d.len(), neg.len());
        }
    }
}

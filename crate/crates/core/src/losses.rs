//! Contrastive objectives over a multi-view batch of unit embeddings.
//!
//! Every loss here has the form
//!
//! ```text
//! L = c · Σ_i Σ_j w_ij · ( log Σ_{k≠i} exp(z_i·z_k/τ) − z_i·z_j/τ )
//! ```
//!
//! and the losses differ only in the positive-pair weights `w_ij` and the
//! outer constant `c` (`1/2b` for batch means, `1` for the raw labeled and
//! unlabeled puNCE risks). The shared kernel [`weighted_nce`] evaluates the
//! value, the per-anchor decomposition and the exact gradient with respect to
//! `z`.

use std::fmt;
use std::str::FromStr;

use crate::data::{check_pairing, ClassPrior, Label, MultiViewBatch};
use crate::error::{arg, contract, Result};
use crate::numerics::{dot, gemm_nt, log_sum_exp, Matrix};

pub const DEFAULT_TAU: f64 = 0.5;

/// Unit-norm tolerance enforced on embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Embeddings of a multi-view batch together with its pairing and labels.
#[derive(Clone, Debug)]
pub struct EmbeddedBatch {
    pub z: Matrix,
    pub pair_index: Vec<usize>,
    pub indicator: Vec<bool>,
    pub labels: Vec<Option<Label>>,
    pub tau: f64,
    check_norm: bool,
}

impl EmbeddedBatch {
    pub fn new(
        z: Matrix,
        pair_index: Vec<usize>,
        indicator: Vec<bool>,
        labels: Vec<Option<Label>>,
        tau: f64,
    ) -> Result<Self> {
        Self::build(z, pair_index, indicator, labels, tau, true)
    }

    /// Like [`EmbeddedBatch::new`] but accepts rows of any norm.
    pub fn new_unnormalized(
        z: Matrix,
        pair_index: Vec<usize>,
        indicator: Vec<bool>,
        labels: Vec<Option<Label>>,
        tau: f64,
    ) -> Result<Self> {
        Self::build(z, pair_index, indicator, labels, tau, false)
    }

    fn build(
        z: Matrix,
        pair_index: Vec<usize>,
        indicator: Vec<bool>,
        labels: Vec<Option<Label>>,
        tau: f64,
        check_norm: bool,
    ) -> Result<Self> {
        let batch = Self {
            z,
            pair_index,
            indicator,
            labels,
            tau,
            check_norm,
        };
        batch.validate()?;
        Ok(batch)
    }

    /// Pairs embeddings with the bookkeeping of the views they came from.
    /// With `check_norm` false the rows need not be unit length.
    pub fn from_views(z: Matrix, views: &MultiViewBatch, tau: f64, check_norm: bool) -> Result<Self> {
        Self::build(
            z,
            views.pair_index.clone(),
            views.indicator.clone(),
            views.labels.clone(),
            tau,
            check_norm,
        )
    }

    /// Drops the unit-norm requirement, so the losses can be probed off the
    /// sphere (finite differences).
    pub fn relaxed(mut self) -> Self {
        self.check_norm = false;
        self
    }

    pub fn n_views(&self) -> usize {
        self.pair_index.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pair_index.len();
        if n < 2 || !n.is_multiple_of(2) {
            return contract(format!("batch needs 2b >= 2 views, got {n}"));
        }
        if self.z.rows() != n || self.indicator.len() != n || self.labels.len() != n {
            return contract("embedding, pairing, indicator and label lengths disagree");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return contract(format!("temperature must be positive, got {}", self.tau));
        }
        check_pairing(&self.pair_index)?;
        if !self.z.all_finite() {
            return contract("embeddings must be finite");
        }
        if self.check_norm {
            for i in 0..n {
                let norm = dot(self.z.row(i), self.z.row(i)).sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return contract(format!("embedding {i} has norm {norm}, expected 1"));
                }
            }
        }
        Ok(())
    }

    fn labeled(&self) -> Vec<usize> {
        (0..self.n_views()).filter(|&i| self.indicator[i]).collect()
    }
}

/// Value, per-anchor decomposition and gradient of a contrastive loss.
#[derive(Clone, Debug)]
pub struct LossOutput {
    /// `c · Σ per_anchor`, with `c` the loss's own normalization.
    pub value: f64,
    pub per_anchor: Vec<f64>,
    pub grad_z: Matrix,
    /// Batches where the labeled term was skipped because `|ℙ| < 2`.
    pub degenerate_labeled: usize,
}

/// Weighted softmax cross-entropy over pairwise similarities.
///
/// `weights[(i, j)]` is the weight of `j` as a positive for anchor `i`; the
/// diagonal must be zero. `scale` multiplies the summed per-anchor losses.
pub fn weighted_nce(batch: &EmbeddedBatch, weights: &Matrix, scale: f64) -> Result<LossOutput> {
    let n = batch.n_views();
    if weights.shape() != (n, n) {
        return contract("weight matrix shape does not match batch");
    }
    let inv_tau = 1.0 / batch.tau;
    let sim = gemm_nt(&batch.z, &batch.z)?;
    let mut per_anchor = vec![0.0; n];
    // dL/d(z_i·z_k)
    let mut coef = Matrix::zeros(n, n);
    let mut logits = Vec::with_capacity(n - 1);
    for i in 0..n {
        let w = weights.row(i);
        if w[i] != 0.0 {
            return contract("self-pairs cannot carry weight");
        }
        let total: f64 = w.iter().sum();
        if total == 0.0 {
            continue;
        }
        logits.clear();
        logits.extend((0..n).filter(|&k| k != i).map(|k| sim[(i, k)] * inv_tau));
        let lse = log_sum_exp(&logits)?;
        let mut loss = 0.0;
        for (k, &wk) in w.iter().enumerate() {
            if k == i {
                continue;
            }
            let s = sim[(i, k)] * inv_tau;
            loss += wk * (lse - s);
            let p = (s - lse).exp();
            coef[(i, k)] = scale * inv_tau * (total * p - wk);
        }
        per_anchor[i] = loss;
    }
    let value = scale * per_anchor.iter().sum::<f64>();

    let k = batch.z.cols();
    let mut grad_z = Matrix::zeros(n, k);
    for i in 0..n {
        for j in 0..n {
            let c = coef[(i, j)] + coef[(j, i)];
            if c == 0.0 {
                continue;
            }
            let zj = batch.z.row(j);
            for (g, &v) in grad_z.row_mut(i).iter_mut().zip(zj) {
                *g += c * v;
            }
        }
    }
    Ok(LossOutput {
        value,
        per_anchor,
        grad_z,
        degenerate_labeled: 0,
    })
}

fn mean_scale(batch: &EmbeddedBatch) -> f64 {
    1.0 / batch.n_views() as f64
}

/// Adds the labeled-anchor weights (all other labeled views, equally
/// weighted). Returns `false` if `|ℙ| < 2` and nothing was added.
fn add_labeled_weights(batch: &EmbeddedBatch, w: &mut Matrix) -> bool {
    let labeled = batch.labeled();
    if labeled.len() < 2 {
        return false;
    }
    let wt = 1.0 / (labeled.len() - 1) as f64;
    for &i in &labeled {
        for &j in &labeled {
            if j != i {
                w[(i, j)] += wt;
            }
        }
    }
    true
}

/// Adds unlabeled-anchor weights: with weight `pi` the anchor is positive and
/// pulls `ℙ ∪ {a(i)}`, with weight `1 − pi` only its sibling.
fn add_unlabeled_weights(batch: &EmbeddedBatch, pi: f64, w: &mut Matrix) -> Result<()> {
    let labeled = batch.labeled();
    let pos_wt = pi / (labeled.len() + 1) as f64;
    for i in 0..batch.n_views() {
        if batch.indicator[i] {
            continue;
        }
        let sib = batch.pair_index[i];
        if batch.indicator[sib] {
            return contract(format!("view {i} is unlabeled but its sibling {sib} is labeled"));
        }
        for &j in &labeled {
            w[(i, j)] += pos_wt;
        }
        w[(i, sib)] += pos_wt + (1.0 - pi);
    }
    Ok(())
}

/// Self-supervised infoNCE: the sibling view is the only positive.
pub fn info_nce(batch: &EmbeddedBatch) -> Result<LossOutput> {
    batch.validate()?;
    let n = batch.n_views();
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        w[(i, batch.pair_index[i])] = 1.0;
    }
    weighted_nce(batch, &w, mean_scale(batch))
}

/// Supervised contrastive loss: every other view of the same class is a
/// positive. Requires a label on every view.
pub fn scl(batch: &EmbeddedBatch) -> Result<LossOutput> {
    batch.validate()?;
    let n = batch.n_views();
    let labels: Vec<Label> = match batch.labels.iter().copied().collect::<Option<Vec<_>>>() {
        Some(l) => l,
        None => return contract("SCL requires a label on every view"),
    };
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        let same: Vec<usize> = (0..n).filter(|&t| t != i && labels[t] == labels[i]).collect();
        if same.is_empty() {
            return contract(format!("anchor {i} has no same-class view"));
        }
        let wt = 1.0 / same.len() as f64;
        for t in same {
            w[(i, t)] = wt;
        }
    }
    weighted_nce(batch, &w, mean_scale(batch))
}

/// Raw labeled puNCE risk `ℓ_P` (summed, not averaged). Zero with a
/// degenerate-batch flag when fewer than two views are labeled.
pub fn punce_labeled(batch: &EmbeddedBatch) -> Result<LossOutput> {
    batch.validate()?;
    let n = batch.n_views();
    let mut w = Matrix::zeros(n, n);
    let ok = add_labeled_weights(batch, &mut w);
    let mut out = weighted_nce(batch, &w, 1.0)?;
    out.degenerate_labeled = usize::from(!ok);
    Ok(out)
}

/// Raw unlabeled puNCE risk `ℓ_U` (summed, not averaged).
pub fn punce_unlabeled(batch: &EmbeddedBatch, prior: ClassPrior) -> Result<LossOutput> {
    batch.validate()?;
    let n = batch.n_views();
    let mut w = Matrix::zeros(n, n);
    add_unlabeled_weights(batch, prior.pi(), &mut w)?;
    weighted_nce(batch, &w, 1.0)
}

/// puNCE: `(ℓ_P + ℓ_U) / 2b`.
pub fn punce(batch: &EmbeddedBatch, prior: ClassPrior) -> Result<LossOutput> {
    batch.validate()?;
    let n = batch.n_views();
    let mut w = Matrix::zeros(n, n);
    let ok = add_labeled_weights(batch, &mut w);
    add_unlabeled_weights(batch, prior.pi(), &mut w)?;
    let mut out = weighted_nce(batch, &w, mean_scale(batch))?;
    out.degenerate_labeled = usize::from(!ok);
    Ok(out)
}

/// SCL adapted to PU data: supervised term over labeled views, infoNCE on
/// unlabeled ones.
pub fn scl_pu(batch: &EmbeddedBatch) -> Result<LossOutput> {
    batch.validate()?;
    let n = batch.n_views();
    let mut w = Matrix::zeros(n, n);
    let ok = add_labeled_weights(batch, &mut w);
    for i in 0..n {
        if !batch.indicator[i] {
            w[(i, batch.pair_index[i])] = 1.0;
        }
    }
    let mut out = weighted_nce(batch, &w, mean_scale(batch))?;
    out.degenerate_labeled = usize::from(!ok);
    Ok(out)
}

/// puNCE for positive/negative/unlabeled batches.
///
/// Labeled anchors use the labeled views of their own class as positives.
/// Unlabeled anchors mix `ℙ ∪ {a(i)}` with weight `pi` and `ℕ ∪ {a(i)}` with
/// weight `1 − pi`.
pub fn punce_pnu(batch: &EmbeddedBatch, prior: ClassPrior) -> Result<LossOutput> {
    batch.validate()?;
    let n = batch.n_views();
    let pi = prior.pi();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        match (batch.indicator[i], batch.labels[i]) {
            (true, Some(Label::Positive)) => pos.push(i),
            (true, Some(Label::Negative)) => neg.push(i),
            (true, None) => return contract(format!("labeled view {i} carries no sign")),
            (false, _) => {}
        }
    }
    let mut w = Matrix::zeros(n, n);
    for class in [&pos, &neg] {
        for &i in class.iter() {
            if class.len() < 2 {
                return contract(format!("labeled view {i} has no same-class partner"));
            }
            let wt = 1.0 / (class.len() - 1) as f64;
            for &j in class.iter() {
                if j != i {
                    w[(i, j)] = wt;
                }
            }
        }
    }
    let pos_wt = pi / (pos.len() + 1) as f64;
    let neg_wt = (1.0 - pi) / (neg.len() + 1) as f64;
    for i in 0..n {
        if batch.indicator[i] {
            continue;
        }
        let sib = batch.pair_index[i];
        if batch.indicator[sib] {
            return contract(format!("view {i} is unlabeled but its sibling {sib} is labeled"));
        }
        for &j in &pos {
            w[(i, j)] += pos_wt;
        }
        for &j in &neg {
            w[(i, j)] += neg_wt;
        }
        w[(i, sib)] += pos_wt + neg_wt;
    }
    weighted_nce(batch, &w, mean_scale(batch))
}

/// Contrastive objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContrastiveLoss {
    InfoNce,
    Scl,
    Punce,
    SclPu,
    PnuPunce,
}

impl ContrastiveLoss {
    pub const ALL: [ContrastiveLoss; 5] = [
        ContrastiveLoss::InfoNce,
        ContrastiveLoss::Scl,
        ContrastiveLoss::Punce,
        ContrastiveLoss::SclPu,
        ContrastiveLoss::PnuPunce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContrastiveLoss::InfoNce => "infonce",
            ContrastiveLoss::Scl => "scl",
            ContrastiveLoss::Punce => "punce",
            ContrastiveLoss::SclPu => "scl_pu",
            ContrastiveLoss::PnuPunce => "pnu_punce",
        }
    }

    pub fn evaluate(self, batch: &EmbeddedBatch, prior: ClassPrior) -> Result<LossOutput> {
        match self {
            ContrastiveLoss::InfoNce => info_nce(batch),
            ContrastiveLoss::Scl => scl(batch),
            ContrastiveLoss::Punce => punce(batch, prior),
            ContrastiveLoss::SclPu => scl_pu(batch),
            ContrastiveLoss::PnuPunce => punce_pnu(batch, prior),
        }
    }
}

impl fmt::Display for ContrastiveLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContrastiveLoss {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|l| l.name() == s) {
            Some(l) => Ok(*l),
            None => arg(format!(
                "unknown loss `{s}` (expected infonce, scl, punce, scl_pu or pnu_punce)"
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_view(pi_labels: bool) -> EmbeddedBatch {
        let z = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let s = if pi_labels {
            vec![true, true, false, false]
        } else {
            vec![false; 4]
        };
        let labels = s.iter().map(|&s| s.then_some(Label::Positive)).collect();
        EmbeddedBatch::new(z, vec![1, 0, 3, 2], s, labels, 1.0).unwrap()
    }

    fn prior(p: f64) -> ClassPrior {
        ClassPrior::new(p).unwrap()
    }

    #[test]
    fn worked_four_view_example() {
        let b = four_view(true);
        let e = std::f64::consts::E;
        let info = info_nce(&b).unwrap().value;
        assert!((info - (1.0 + 2.0 / e).ln()).abs() < 1e-12);
        assert!((info - 0.551445).abs() < 1e-6);
        let lp = punce_labeled(&b).unwrap().value;
        assert!((lp - 1.102890).abs() < 1e-6);
        let lu = punce_unlabeled(&b, prior(0.5)).unwrap().value;
        assert!((lu - 1.769557).abs() < 1e-6);
        let total = punce(&b, prior(0.5)).unwrap().value;
        assert!((total - (lp + lu) / 4.0).abs() < 1e-12);
        assert!((total - 0.718112).abs() < 1e-6);
    }

    #[test]
    fn identical_embeddings_give_uniform_softmax() {
        for b in [2usize, 3, 5] {
            let n = 2 * b;
            let z = Matrix::from_vec(n, 2, [0.6, 0.8].repeat(n)).unwrap();
            let pair: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
            let labels = vec![Some(Label::Negative); n];
            let batch = EmbeddedBatch::new(z, pair, vec![false; n], labels, 0.3).unwrap();
            let expect = ((n - 1) as f64).ln();
            assert!((info_nce(&batch).unwrap().value - expect).abs() < 1e-12);
            assert!((scl(&batch).unwrap().value - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pair_info_nce_is_zero() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = EmbeddedBatch::new(z, vec![1, 0], vec![false; 2], vec![None; 2], 0.5).unwrap();
        let out = info_nce(&b).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_z.as_slice().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn contract_errors() {
        let z = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = EmbeddedBatch::new(z.clone(), vec![1, 0], vec![false; 2], vec![None; 2], 0.5);
        assert!(matches!(b, Err(crate::Error::Contract(_))));
        let relaxed = EmbeddedBatch {
            z,
            pair_index: vec![1, 0],
            indicator: vec![false; 2],
            labels: vec![None; 2],
            tau: 0.5,
            check_norm: false,
        };
        assert!(info_nce(&relaxed).is_ok());
        assert!(scl(&four_view(false)).is_err());
        let mut missing_sign = four_view(true);
        missing_sign.labels[0] = None;
        assert!(punce_pnu(&missing_sign, prior(0.5)).is_err());
    }

    #[test]
    fn degenerate_labeled_set() {
        let b = four_view(false);
        let lp = punce_labeled(&b).unwrap();
        assert_eq!(lp.value, 0.0);
        assert_eq!(lp.degenerate_labeled, 1);
        assert_eq!(punce_labeled(&four_view(true)).unwrap().degenerate_labeled, 0);
    }

    #[test]
    fn pi_zero_collapses_unlabeled_term() {
        let b = four_view(true);
        let lu = punce_unlabeled(&b, prior(0.0)).unwrap();
        let info = info_nce(&b).unwrap();
        for i in [2, 3] {
            assert!((lu.per_anchor[i] - info.per_anchor[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn unlabeled_term_is_linear_in_prior() {
        let b = four_view(true);
        let at = |p| punce_unlabeled(&b, prior(p)).unwrap().per_anchor;
        let (l0, lh, l1) = (at(0.0), at(0.5), at(1.0));
        for i in 0..4 {
            assert!((lh[i] - 0.5 * (l0[i] + l1[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_kind_names_roundtrip() {
        for l in ContrastiveLoss::ALL {
            assert_eq!(l.name().parse::<ContrastiveLoss>().unwrap(), l);
        }
        assert!("nce".parse::<ContrastiveLoss>().is_err());
    }
}

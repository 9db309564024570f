//! Cost-sensitive PU risks over scalar logits, with the logistic surrogate.

use std::fmt;
use std::str::FromStr;

use crate::data::ClassPrior;
use crate::error::{arg, Result};

/// Logits `f(x) = v·g_B(x)` with their observed indicators.
#[derive(Clone, Debug)]
pub struct LogitBatch {
    pub logits: Vec<f64>,
    pub indicator: Vec<bool>,
    pub prior: ClassPrior,
}

impl LogitBatch {
    pub fn new(logits: Vec<f64>, indicator: Vec<bool>, prior: ClassPrior) -> Result<Self> {
        if logits.len() != indicator.len() {
            return arg("logits and indicator lengths differ");
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return arg("logits must be finite");
        }
        Ok(Self {
            logits,
            indicator,
            prior,
        })
    }

    fn counts(&self) -> (usize, usize) {
        let p = self.indicator.iter().filter(|&&s| s).count();
        (p, self.indicator.len() - p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskOutput {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(1 + exp(−y·z))` for `y = ±1`.
#[inline]
pub fn logistic_loss(z: f64, y: f64) -> f64 {
    softplus(-y * z)
}

/// Derivative of [`logistic_loss`] in `z`.
#[inline]
pub fn logistic_grad(z: f64, y: f64) -> f64 {
    -y * sigmoid(-y * z)
}

/// Treats every unlabeled sample as negative.
pub fn pn_risk(batch: &LogitBatch) -> Result<RiskOutput> {
    let n = batch.logits.len();
    if n == 0 {
        return arg("empty logit batch");
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&z, &s) in batch.logits.iter().zip(&batch.indicator) {
        let y = if s { 1.0 } else { -1.0 };
        value += logistic_loss(z, y);
        grad.push(inv * logistic_grad(z, y));
    }
    Ok(RiskOutput {
        value: value * inv,
        grad_logits: grad,
    })
}

struct Parts {
    pos: f64,
    neg: f64,
    grad_pos: Vec<f64>,
    grad_neg: Vec<f64>,
}

/// Splits the unbiased risk into `π·R_P⁺` and `R_U⁻ − π·R_P⁻`.
fn unbiased_parts(batch: &LogitBatch) -> Result<Parts> {
    let (n_p, n_u) = batch.counts();
    if n_p == 0 || n_u == 0 {
        return arg(format!(
            "unbiased PU risk needs labeled and unlabeled samples (got {n_p} and {n_u})"
        ));
    }
    let pi = batch.prior.pi();
    let (wp, wu) = (pi / n_p as f64, 1.0 / n_u as f64);
    let n = batch.logits.len();
    let mut parts = Parts {
        pos: 0.0,
        neg: 0.0,
        grad_pos: vec![0.0; n],
        grad_neg: vec![0.0; n],
    };
    for (i, (&z, &s)) in batch.logits.iter().zip(&batch.indicator).enumerate() {
        if s {
            parts.pos += wp * logistic_loss(z, 1.0);
            parts.grad_pos[i] = wp * logistic_grad(z, 1.0);
            parts.neg -= wp * logistic_loss(z, -1.0);
            parts.grad_neg[i] = -wp * logistic_grad(z, -1.0);
        } else {
            parts.neg += wu * logistic_loss(z, -1.0);
            parts.grad_neg[i] = wu * logistic_grad(z, -1.0);
        }
    }
    Ok(parts)
}

/// Unbiased PU risk; may be negative.
pub fn upu_risk(batch: &LogitBatch) -> Result<RiskOutput> {
    let p = unbiased_parts(batch)?;
    Ok(RiskOutput {
        value: p.pos + p.neg,
        grad_logits: p.grad_pos.iter().zip(&p.grad_neg).map(|(a, b)| a + b).collect(),
    })
}

/// Non-negative PU risk: the negative-class part is clamped at zero, and no
/// gradient flows through it while clamped.
pub fn nnpu_risk(batch: &LogitBatch) -> Result<RiskOutput> {
    let p = unbiased_parts(batch)?;
    if p.neg >= 0.0 {
        return Ok(RiskOutput {
            value: p.pos + p.neg,
            grad_logits: p.grad_pos.iter().zip(&p.grad_neg).map(|(a, b)| a + b).collect(),
        });
    }
    Ok(RiskOutput {
        value: p.pos,
        grad_logits: p.grad_pos,
    })
}

/// Estimates `c = p(s = 1 | y = 1)` as the mean labeled-vs-unlabeled
/// probability on held-out labeled positives.
pub fn pvu_calibrate(probs_on_labeled: &[f64]) -> Result<f64> {
    if probs_on_labeled.is_empty() {
        return arg("calibration needs at least one held-out labeled sample");
    }
    if let Some(p) = probs_on_labeled.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return arg(format!("calibration probability {p} outside (0, 1]"));
    }
    Ok(probs_on_labeled.iter().sum::<f64>() / probs_on_labeled.len() as f64)
}

/// Calibrated posterior `p(y = 1 | x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub p: f64,
    /// `p_s > c`; the ratio was clipped to 1.
    pub clipped: bool,
}

/// `min(1, p_s / c)`.
pub fn pvu_posterior(p_s: f64, c: f64) -> Result<Posterior> {
    if !(c > 0.0 && c <= 1.0) {
        return arg(format!("calibration constant {c} outside (0, 1]"));
    }
    if !(0.0..=1.0).contains(&p_s) {
        return arg(format!("probability {p_s} outside [0, 1]"));
    }
    let r = p_s / c;
    Ok(Posterior {
        p: r.min(1.0),
        clipped: r > 1.0,
    })
}

/// Transfer-stage risk selector. `Pvu` trains with the PN risk on `s` and is
/// calibrated afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RiskKind {
    Pn,
    Pvu,
    Upu,
    Nnpu,
}

impl RiskKind {
    pub const ALL: [RiskKind; 4] = [RiskKind::Pn, RiskKind::Pvu, RiskKind::Upu, RiskKind::Nnpu];

    pub fn name(self) -> &'static str {
        match self {
            RiskKind::Pn => "pn",
            RiskKind::Pvu => "pvu",
            RiskKind::Upu => "upu",
            RiskKind::Nnpu => "nnpu",
        }
    }

    pub fn evaluate(self, batch: &LogitBatch) -> Result<RiskOutput> {
        match self {
            RiskKind::Pn | RiskKind::Pvu => pn_risk(batch),
            RiskKind::Upu => upu_risk(batch),
            RiskKind::Nnpu => nnpu_risk(batch),
        }
    }
}

impl fmt::Display for RiskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RiskKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|r| r.name() == s) {
            Some(r) => Ok(*r),
            None => arg(format!("unknown risk `{s}` (expected pn, pvu, upu or nnpu)")),
        }
    }
}

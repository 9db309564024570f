//! Test-only references: literal double-loop evaluations of every loss,
//! random batch generators and finite-difference helpers. Nothing here calls
//! into the loss implementations under test.
#![allow(dead_code)]

use punce_core::data::{ClassPrior, Label};
use punce_core::losses::EmbeddedBatch;
use punce_core::model::ModelParams;
use punce_core::numerics::{Matrix, RngStream};

/// Plain-data batch description used by the oracles.
#[derive(Clone, Debug)]
pub struct RawBatch {
    pub z: Vec<Vec<f64>>,
    pub pair: Vec<usize>,
    pub s: Vec<bool>,
    pub y: Vec<Option<Label>>,
    pub tau: f64,
}

impl RawBatch {
    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn to_batch(&self) -> EmbeddedBatch {
        let k = self.z[0].len();
        let m = Matrix::from_vec(self.n(), k, self.z.concat()).unwrap();
        EmbeddedBatch::new(m, self.pair.clone(), self.s.clone(), self.y.clone(), self.tau).unwrap()
    }

    pub fn to_relaxed(&self, z: &[Vec<f64>]) -> EmbeddedBatch {
        let k = z[0].len();
        let mut b = self.to_batch().relaxed();
        b.z = Matrix::from_vec(self.n(), k, z.concat()).unwrap();
        b
    }

    fn dot(&self, z: &[Vec<f64>], i: usize, j: usize) -> f64 {
        let mut s = 0.0;
        for t in 0..z[i].len() {
            s += z[i][t] * z[j][t];
        }
        s
    }

    /// `log( exp(z_i·z_j/τ) / Σ_{k≠i} exp(z_i·z_k/τ) )`, computed directly.
    pub fn log_ratio(&self, z: &[Vec<f64>], i: usize, j: usize) -> f64 {
        let mut denom = 0.0;
        for k in 0..self.n() {
            if k != i {
                denom += (self.dot(z, i, k) / self.tau).exp();
            }
        }
        ((self.dot(z, i, j) / self.tau).exp() / denom).ln()
    }

    pub fn labeled(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.s[i]).collect()
    }
}

pub fn oracle_info_nce(b: &RawBatch, z: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..b.n() {
        total += -b.log_ratio(z, i, b.pair[i]);
    }
    total / b.n() as f64
}

pub fn oracle_scl(b: &RawBatch, z: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..b.n() {
        let q: Vec<usize> = (0..b.n()).filter(|&t| t != i && b.y[t] == b.y[i]).collect();
        let mut inner = 0.0;
        for &j in &q {
            inner += -b.log_ratio(z, i, j);
        }
        total += inner / q.len() as f64;
    }
    total / b.n() as f64
}

pub fn oracle_lp(b: &RawBatch, z: &[Vec<f64>]) -> f64 {
    let p = b.labeled();
    if p.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in &p {
        let mut inner = 0.0;
        for &j in &p {
            if j != i {
                inner += -b.log_ratio(z, i, j);
            }
        }
        total += inner / (p.len() - 1) as f64;
    }
    total
}

pub fn oracle_lu(b: &RawBatch, z: &[Vec<f64>], pi: f64) -> f64 {
    let p = b.labeled();
    let mut total = 0.0;
    for i in 0..b.n() {
        if b.s[i] {
            continue;
        }
        let mut pos = 0.0;
        for &j in &p {
            pos += b.log_ratio(z, i, j);
        }
        pos += b.log_ratio(z, i, b.pair[i]);
        total -= pi / (p.len() + 1) as f64 * pos + (1.0 - pi) * b.log_ratio(z, i, b.pair[i]);
    }
    total
}

pub fn oracle_punce(b: &RawBatch, z: &[Vec<f64>], pi: f64) -> f64 {
    (oracle_lp(b, z) + oracle_lu(b, z, pi)) / b.n() as f64
}

pub fn oracle_scl_pu(b: &RawBatch, z: &[Vec<f64>]) -> f64 {
    let mut total = oracle_lp(b, z);
    for i in 0..b.n() {
        if !b.s[i] {
            total += -b.log_ratio(z, i, b.pair[i]);
        }
    }
    total / b.n() as f64
}

pub fn oracle_pnu(b: &RawBatch, z: &[Vec<f64>], pi: f64) -> f64 {
    let pos: Vec<usize> = (0..b.n()).filter(|&i| b.s[i] && b.y[i] == Some(Label::Positive)).collect();
    let neg: Vec<usize> = (0..b.n()).filter(|&i| b.s[i] && b.y[i] == Some(Label::Negative)).collect();
    let mut total = 0.0;
    for i in 0..b.n() {
        if b.s[i] {
            let q: Vec<usize> = (0..b.n()).filter(|&t| t != i && b.s[t] && b.y[t] == b.y[i]).collect();
            let mut inner = 0.0;
            for &j in &q {
                inner += b.log_ratio(z, i, j);
            }
            total += inner / q.len() as f64;
        } else {
            let mut pset = pos.clone();
            pset.push(b.pair[i]);
            let mut nset = neg.clone();
            nset.push(b.pair[i]);
            let mut lp = 0.0;
            for &j in &pset {
                lp += b.log_ratio(z, i, j);
            }
            let mut ln = 0.0;
            for &j in &nset {
                ln += b.log_ratio(z, i, j);
            }
            total += pi / pset.len() as f64 * lp + (1.0 - pi) / nset.len() as f64 * ln;
        }
    }
    -total / b.n() as f64
}

pub fn unit_vector(rng: &mut RngStream, k: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// How labels are assigned to the sources of a random batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Labeling {
    /// Random subset of sources labeled positive (PU).
    Pu,
    AllLabeled,
    NoneLabeled,
    /// Every source carries a true label; used for SCL.
    FullTwoClass,
    /// Random subset labeled with random signs; each labeled class gets at
    /// least two views by construction.
    Pnu,
}

/// Random batch with `b` sources, `k` dims and sibling-paired views.
pub fn random_raw_batch(rng: &mut RngStream, b: usize, k: usize, labeling: Labeling) -> RawBatch {
    let n = 2 * b;
    let z: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(rng, k)).collect();
    let pair: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
    let mut s = vec![false; n];
    let mut y = vec![None; n];
    for src in 0..b {
        let (lab, sign) = match labeling {
            Labeling::Pu => (rng.uniform() < 0.5, Some(Label::Positive)),
            Labeling::AllLabeled => (true, Some(Label::Positive)),
            Labeling::NoneLabeled => (false, None),
            Labeling::FullTwoClass => (
                true,
                Some(if rng.uniform() < 0.5 { Label::Positive } else { Label::Negative }),
            ),
            Labeling::Pnu => (
                rng.uniform() < 0.6,
                Some(if rng.uniform() < 0.5 { Label::Positive } else { Label::Negative }),
            ),
        };
        for v in [2 * src, 2 * src + 1] {
            s[v] = lab;
            y[v] = if lab || labeling == Labeling::FullTwoClass { sign } else { None };
        }
    }
    let tau = 0.2 + 0.8 * rng.uniform();
    RawBatch { z, pair, s, y, tau }
}

pub fn prior(pi: f64) -> ClassPrior {
    ClassPrior::new(pi).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central differences of `f` around `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn unflatten(z: &[f64], k: usize) -> Vec<Vec<f64>> {
    z.chunks(k).map(<[f64]>::to_vec).collect()
}

/// Copy of `params` with every tensor overwritten from `flat` (manifest order).
pub fn set_flat(params: &ModelParams, flat: &[f64]) -> ModelParams {
    let mut p = params.clone();
    let mut it = flat.iter();
    for (_, t) in p.tensors_mut() {
        for v in t {
            *v = *it.next().unwrap();
        }
    }
    p
}

//! Binary datasets, PU/PNU simulation and multi-view batch construction.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{arg, contract, Error, Result};
use crate::numerics::{Matrix, RngStream};

/// Ground-truth class of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn from_sign(y: f64) -> Self {
        if y > 0.0 {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    /// `+1.0` or `-1.0`.
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }

    fn parse(field: &str) -> Option<Self> {
        match field.trim() {
            "+1" | "1" | "1.0" | "+1.0" => Some(Label::Positive),
            "-1" | "-1.0" => Some(Label::Negative),
            _ => None,
        }
    }

    fn as_field(self) -> &'static str {
        match self {
            Label::Positive => "+1",
            Label::Negative => "-1",
        }
    }
}

/// Positive-class weight used by the PU losses and risks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassPrior(f64);

impl ClassPrior {
    pub fn new(pi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&pi) {
            return arg(format!("class prior {pi} outside [0, 1]"));
        }
        Ok(Self(pi))
    }

    #[inline]
    pub fn pi(self) -> f64 {
        self.0
    }
}

/// Prior of the unlabeled pool after `n_labeled` of `p_star` positives have
/// been labeled: `(P* - n_P) / (P* + N* - n_P)`.
pub fn exact_pi(p_star: usize, n_star: usize, n_labeled: usize) -> Result<ClassPrior> {
    if n_labeled > p_star {
        return arg(format!(
            "n_P = {n_labeled} exceeds the {p_star} available positives"
        ));
    }
    let pool = p_star + n_star - n_labeled;
    if pool == 0 {
        return arg("no unlabeled samples remain");
    }
    ClassPrior::new((p_star - n_labeled) as f64 / pool as f64)
}

/// Fully labeled binary data.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryDataset {
    features: Matrix,
    labels: Vec<Label>,
}

impl BinaryDataset {
    pub fn new(features: Matrix, labels: Vec<Label>) -> Result<Self> {
        if features.rows() != labels.len() {
            return arg(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            ));
        }
        if !features.all_finite() {
            return arg("features must be finite");
        }
        if !labels.contains(&Label::Positive) || !labels.contains(&Label::Negative) {
            return arg("dataset must contain both classes");
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// `(P*, N*)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let p = self
            .labels
            .iter()
            .filter(|&&y| y == Label::Positive)
            .count();
        (p, self.labels.len() - p)
    }
}

/// Labeled positives plus an unlabeled pool; `s = 1` implies `y = +1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PUDataset {
    features: Matrix,
    indicator: Vec<bool>,
    hidden_labels: Vec<Label>,
    prior: ClassPrior,
}

impl PUDataset {
    /// Validates the labeling invariant. The prior is computed from the
    /// hidden class counts with [`exact_pi`].
    pub fn new(features: Matrix, indicator: Vec<bool>, hidden_labels: Vec<Label>) -> Result<Self> {
        if features.rows() != indicator.len() || indicator.len() != hidden_labels.len() {
            return arg("features, indicator and labels must have equal length");
        }
        if let Some(i) = indicator
            .iter()
            .zip(&hidden_labels)
            .position(|(&s, &y)| s && y != Label::Positive)
        {
            return arg(format!("sample {i} is labeled but not positive"));
        }
        let p_star = hidden_labels
            .iter()
            .filter(|&&y| y == Label::Positive)
            .count();
        let n_star = hidden_labels.len() - p_star;
        let n_p = indicator.iter().filter(|&&s| s).count();
        let prior = exact_pi(p_star, n_star, n_p)?;
        Ok(Self {
            features,
            indicator,
            hidden_labels,
            prior,
        })
    }

    pub fn with_prior(mut self, prior: ClassPrior) -> Self {
        self.prior = prior;
        self
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn indicator(&self) -> &[bool] {
        &self.indicator
    }

    /// Ground truth. Evaluation and diagnostics only; no training path reads it.
    pub fn hidden_labels(&self) -> &[Label] {
        &self.hidden_labels
    }

    pub fn prior(&self) -> ClassPrior {
        self.prior
    }

    pub fn len(&self) -> usize {
        self.indicator.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indicator.is_empty()
    }

    pub fn n_labeled(&self) -> usize {
        self.indicator.iter().filter(|&&s| s).count()
    }

    /// The underlying fully labeled data (for evaluation).
    pub fn to_binary(&self) -> Result<BinaryDataset> {
        BinaryDataset::new(self.features.clone(), self.hidden_labels.clone())
    }
}

/// Semi-supervised data: some samples keep their true label of either sign.
#[derive(Clone, Debug, PartialEq)]
pub struct PNUDataset {
    features: Matrix,
    observed: Vec<Option<Label>>,
    hidden_labels: Vec<Label>,
    prior: ClassPrior,
}

impl PNUDataset {
    /// The prior is the positive fraction of the unlabeled pool, or of the
    /// whole dataset when nothing is unlabeled.
    pub fn new(
        features: Matrix,
        observed: Vec<Option<Label>>,
        hidden_labels: Vec<Label>,
    ) -> Result<Self> {
        if features.rows() != observed.len() || observed.len() != hidden_labels.len() {
            return arg("features, observed and hidden labels must have equal length");
        }
        if let Some(i) = observed
            .iter()
            .zip(&hidden_labels)
            .position(|(o, y)| o.is_some_and(|o| o != *y))
        {
            return arg(format!("observed label of sample {i} contradicts its true label"));
        }
        let unlabeled: Vec<Label> = observed
            .iter()
            .zip(&hidden_labels)
            .filter(|(o, _)| o.is_none())
            .map(|(_, &y)| y)
            .collect();
        let pool: &[Label] = if unlabeled.is_empty() {
            &hidden_labels
        } else {
            &unlabeled
        };
        let pos = pool.iter().filter(|&&y| y == Label::Positive).count();
        let prior = ClassPrior::new(if pool.is_empty() {
            0.0
        } else {
            pos as f64 / pool.len() as f64
        })?;
        Ok(Self {
            features,
            observed,
            hidden_labels,
            prior,
        })
    }

    pub fn with_prior(mut self, prior: ClassPrior) -> Self {
        self.prior = prior;
        self
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn observed_labels(&self) -> &[Option<Label>] {
        &self.observed
    }

    /// Ground truth. Evaluation only.
    pub fn hidden_labels(&self) -> &[Label] {
        &self.hidden_labels
    }

    pub fn prior(&self) -> ClassPrior {
        self.prior
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.observed.iter().all(Option::is_some)
    }
}

/// What a training loop may see of a dataset: features, the observed
/// indicator and observed labels. Hidden labels are not reachable through it.
pub trait TrainingView {
    fn features(&self) -> &Matrix;
    fn prior(&self) -> ClassPrior;
    /// `s_i`.
    fn is_labeled(&self, i: usize) -> bool;
    /// Observed label; PU positives report `Positive`.
    fn observed_label(&self, i: usize) -> Option<Label>;

    fn len(&self) -> usize {
        self.features().rows()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrainingView for PUDataset {
    fn features(&self) -> &Matrix {
        &self.features
    }

    fn prior(&self) -> ClassPrior {
        self.prior
    }

    fn is_labeled(&self, i: usize) -> bool {
        self.indicator[i]
    }

    fn observed_label(&self, i: usize) -> Option<Label> {
        self.indicator[i].then_some(Label::Positive)
    }
}

impl TrainingView for PNUDataset {
    fn features(&self) -> &Matrix {
        &self.features
    }

    fn prior(&self) -> ClassPrior {
        self.prior
    }

    fn is_labeled(&self, i: usize) -> bool {
        self.observed[i].is_some()
    }

    fn observed_label(&self, i: usize) -> Option<Label> {
        self.observed[i]
    }
}

/// Two classes `N(±μ, I)` with `μ = (separation / 2)·e₁`.
pub fn synth_gaussians(
    n: usize,
    d: usize,
    separation: f64,
    pi_true: f64,
    seed: u64,
) -> Result<BinaryDataset> {
    if n < 2 || d == 0 {
        return arg(format!("need n >= 2 and d >= 1, got n = {n}, d = {d}"));
    }
    if !(pi_true > 0.0 && pi_true < 1.0) {
        return arg(format!("pi_true = {pi_true} must lie in (0, 1)"));
    }
    if !separation.is_finite() || separation < 0.0 {
        return arg("separation must be finite and non-negative");
    }
    let n_pos = (n as f64 * pi_true).round() as usize;
    if n_pos == 0 || n_pos == n {
        return arg(format!("n = {n} with pi_true = {pi_true} leaves a class empty"));
    }
    let mut rng = RngStream::new(seed, crate::numerics::streams::SYNTH);
    let mut labels: Vec<Label> = (0..n)
        .map(|i| {
            if i < n_pos {
                Label::Positive
            } else {
                Label::Negative
            }
        })
        .collect();
    rng.shuffle(&mut labels);
    let half = separation / 2.0;
    let mut data = Vec::with_capacity(n * d);
    for y in &labels {
        for j in 0..d {
            let mean = if j == 0 { y.sign() * half } else { 0.0 };
            data.push(mean + rng.normal());
        }
    }
    BinaryDataset::new(Matrix::from_vec(n, d, data)?, labels)
}

/// Labels `n_labeled` true positives chosen uniformly without replacement.
pub fn make_pu(ds: &BinaryDataset, n_labeled: usize, seed: u64) -> Result<PUDataset> {
    let positives: Vec<usize> = ds
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == Label::Positive)
        .map(|(i, _)| i)
        .collect();
    if n_labeled > positives.len() {
        return arg(format!(
            "n_P = {n_labeled} exceeds the {} positives in the dataset",
            positives.len()
        ));
    }
    let mut rng = RngStream::new(seed, crate::numerics::streams::PU_SELECT);
    let mut indicator = vec![false; ds.len()];
    for k in rng.sample_without_replacement(positives.len(), n_labeled) {
        indicator[positives[k]] = true;
    }
    PUDataset::new(ds.features.clone(), indicator, ds.labels.clone())
}

/// Keeps the true label of `n_labeled` uniformly chosen samples.
pub fn make_pnu(ds: &BinaryDataset, n_labeled: usize, seed: u64) -> Result<PNUDataset> {
    if n_labeled > ds.len() {
        return arg(format!(
            "n_l = {n_labeled} exceeds dataset size {}",
            ds.len()
        ));
    }
    let mut rng = RngStream::new(seed, crate::numerics::streams::PNU_SELECT);
    let mut observed = vec![None; ds.len()];
    for i in rng.sample_without_replacement(ds.len(), n_labeled) {
        observed[i] = Some(ds.labels[i]);
    }
    PNUDataset::new(ds.features.clone(), observed, ds.labels.clone())
}

/// Stochastic augmentation for vector data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Std of additive Gaussian jitter.
    pub noise_sigma: f64,
    /// Multiplicative factor drawn uniformly from `[lo, hi]` per view.
    pub scale_range: (f64, f64),
    /// Per-coordinate zeroing probability.
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            scale_range: (0.9, 1.1),
            mask_prob: 0.05,
        }
    }
}

impl AugmentConfig {
    pub const IDENTITY: Self = Self {
        noise_sigma: 0.0,
        scale_range: (1.0, 1.0),
        mask_prob: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return arg("noise_sigma must be finite and >= 0");
        }
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return arg("scale_range needs finite lo <= hi");
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return arg("mask_prob must lie in [0, 1)");
        }
        Ok(())
    }

    /// Jitter, then scale, then mask.
    pub fn apply(&self, x: &[f64], rng: &mut RngStream, out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o = v + self.noise_sigma * rng.normal();
        }
        let (lo, hi) = self.scale_range;
        let factor = lo + (hi - lo) * rng.uniform();
        for o in out.iter_mut() {
            *o *= factor;
        }
        for o in out.iter_mut() {
            if rng.uniform() < self.mask_prob {
                *o = 0.0;
            }
        }
    }
}

/// `2b` augmented views. Views `2i` and `2i + 1` come from source sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewBatch {
    pub inputs: Matrix,
    pub pair_index: Vec<usize>,
    pub indicator: Vec<bool>,
    pub labels: Vec<Option<Label>>,
    pub source_index: Vec<usize>,
}

impl MultiViewBatch {
    pub fn n_views(&self) -> usize {
        self.pair_index.len()
    }
}

/// Builds a multi-view batch from the given dataset rows.
pub fn make_multiview_batch<D: TrainingView + ?Sized>(
    data: &D,
    samples: &[usize],
    cfg: &AugmentConfig,
    rng: &mut RngStream,
) -> Result<MultiViewBatch> {
    if samples.is_empty() {
        return arg("multi-view batch needs at least one source sample");
    }
    cfg.validate()?;
    let feats = data.features();
    let d = feats.cols();
    let n_views = 2 * samples.len();
    let mut inputs = Matrix::zeros(n_views, d);
    let mut pair_index = Vec::with_capacity(n_views);
    let mut indicator = Vec::with_capacity(n_views);
    let mut labels = Vec::with_capacity(n_views);
    let mut source_index = Vec::with_capacity(n_views);
    for (b, &src) in samples.iter().enumerate() {
        if src >= feats.rows() {
            return arg(format!("sample index {src} out of range"));
        }
        for v in 0..2 {
            let view = 2 * b + v;
            cfg.apply(feats.row(src), rng, inputs.row_mut(view));
            pair_index.push(view ^ 1);
            indicator.push(data.is_labeled(src));
            labels.push(data.observed_label(src));
            source_index.push(src);
        }
    }
    Ok(MultiViewBatch {
        inputs,
        pair_index,
        indicator,
        labels,
        source_index,
    })
}

/// Checks that `pair_index` is a fixed-point-free involution.
pub fn check_pairing(pair_index: &[usize]) -> Result<()> {
    for (i, &j) in pair_index.iter().enumerate() {
        if j >= pair_index.len() || j == i || pair_index[j] != i {
            return contract(format!("pair_index is not an involution at view {i}"));
        }
    }
    Ok(())
}

struct CsvTable {
    features: Matrix,
    labels: Vec<Label>,
    indicator: Option<Vec<bool>>,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_table(path: &Path) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let has_s = cols.last() == Some(&"s");
    let n_meta = if has_s { 2 } else { 1 };
    if cols.len() < n_meta + 1 || cols[cols.len() - n_meta] != "y" {
        return Err(parse_err(path, 1, "header must be feature_0..feature_{d-1},y[,s]"));
    }
    let d = cols.len() - n_meta;
    for (j, c) in cols[..d].iter().enumerate() {
        if *c != format!("feature_{j}") {
            return Err(parse_err(path, 1, format!("expected column feature_{j}, found `{c}`")));
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut indicator = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, csv::Position::line);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, csv::Position::line);
        if rec.len() != cols.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", cols.len(), rec.len()),
            ));
        }
        for (j, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("feature_{j}: bad number `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("feature_{j} is not finite")));
            }
            data.push(v);
        }
        let y = Label::parse(&rec[d])
            .ok_or_else(|| parse_err(path, line, format!("label must be +1 or -1, found `{}`", &rec[d])))?;
        labels.push(y);
        if has_s {
            let s = match &rec[d + 1] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(parse_err(path, line, format!("s must be 0 or 1, found `{other}`")))
                }
            };
            indicator.push(s);
        }
    }
    let features = Matrix::from_vec(labels.len(), d, data)?;
    Ok(CsvTable {
        features,
        labels,
        indicator: has_s.then_some(indicator),
    })
}

/// Reads `feature_0,...,feature_{d-1},y[,s]`; any `s` column is ignored.
pub fn load_csv_dataset(path: impl AsRef<Path>) -> Result<BinaryDataset> {
    let t = read_table(path.as_ref())?;
    BinaryDataset::new(t.features, t.labels)
}

/// Reads a dataset with an `s` column as PU data.
pub fn load_pu_csv(path: impl AsRef<Path>) -> Result<PUDataset> {
    let path = path.as_ref();
    let t = read_table(path)?;
    let Some(s) = t.indicator else {
        return Err(parse_err(path, 1, "PU data needs an `s` column"));
    };
    PUDataset::new(t.features, s, t.labels)
}

/// Reads a dataset with an `s` column as PNU data (`s = 1` keeps `y`).
pub fn load_pnu_csv(path: impl AsRef<Path>) -> Result<PNUDataset> {
    let path = path.as_ref();
    let t = read_table(path)?;
    let Some(s) = t.indicator else {
        return Err(parse_err(path, 1, "PNU data needs an `s` column"));
    };
    let observed = s
        .iter()
        .zip(&t.labels)
        .map(|(&s, &y)| s.then_some(y))
        .collect();
    PNUDataset::new(t.features, observed, t.labels)
}

/// Formats a real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_table(
    path: &Path,
    features: &Matrix,
    labels: &[Label],
    indicator: Option<&[bool]>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header: Vec<String> = (0..features.cols()).map(|j| format!("feature_{j}")).collect();
    header.push("y".into());
    if indicator.is_some() {
        header.push("s".into());
    }
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(header.len());
    for (i, y) in labels.iter().enumerate() {
        rec.clear();
        rec.extend(features.row(i).iter().map(|&v| fmt_real(v)));
        rec.push(y.as_field().to_string());
        if let Some(s) = indicator {
            rec.push(if s[i] { "1" } else { "0" }.to_string());
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn write_csv(path: impl AsRef<Path>, ds: &BinaryDataset) -> Result<()> {
    write_table(path.as_ref(), &ds.features, &ds.labels, None)
}

pub fn write_pu_csv(path: impl AsRef<Path>, ds: &PUDataset) -> Result<()> {
    write_table(path.as_ref(), &ds.features, &ds.hidden_labels, Some(&ds.indicator))
}

pub fn write_pnu_csv(path: impl AsRef<Path>, ds: &PNUDataset) -> Result<()> {
    let s: Vec<bool> = ds.observed.iter().map(Option::is_some).collect();
    write_table(path.as_ref(), &ds.features, &ds.hidden_labels, Some(&s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BinaryDataset {
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.1], vec![2.0, 2.0]])
            .unwrap();
        BinaryDataset::new(
            f,
            vec![Label::Positive, Label::Negative, Label::Positive, Label::Negative],
        )
        .unwrap()
    }

    #[test]
    fn exact_pi_examples() {
        let p = exact_pi(30000, 30000, 3000).unwrap().pi();
        assert!((p - 27000.0 / 57000.0).abs() < 1e-15);
        assert!((p - 0.473684).abs() < 1e-6);
        assert_eq!(exact_pi(700, 300, 0).unwrap().pi(), 0.7);
        assert_eq!(exact_pi(700, 300, 700).unwrap().pi(), 0.0);
        assert!(exact_pi(10, 5, 11).is_err());
        assert!(exact_pi(3, 0, 3).is_err());
    }

    #[test]
    fn exact_pi_monotone_in_labeled_count() {
        for &(p, n) in &[(50usize, 50usize), (10, 90), (90, 1)] {
            let mut last = f64::INFINITY;
            for k in 0..=p {
                let v = exact_pi(p, n, k).unwrap().pi();
                assert!((0.0..=1.0).contains(&v));
                assert!(v <= last);
                last = v;
            }
        }
    }

    #[test]
    fn class_prior_range() {
        assert!(ClassPrior::new(-0.1).is_err());
        assert!(ClassPrior::new(1.1).is_err());
        assert!(ClassPrior::new(f64::NAN).is_err());
        assert_eq!(ClassPrior::new(1.0).unwrap().pi(), 1.0);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_gaussians(101, 3, 4.0, 0.3, 9).unwrap();
        let b = synth_gaussians(101, 3, 4.0, 0.3, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), (30, 71));
        let c = synth_gaussians(101, 3, 4.0, 0.3, 10).unwrap();
        assert_ne!(a, c);
        assert!(synth_gaussians(1, 3, 1.0, 0.5, 0).is_err());
        assert!(synth_gaussians(10, 0, 1.0, 0.5, 0).is_err());
        assert!(synth_gaussians(10, 2, 1.0, 1.0, 0).is_err());
        assert!(synth_gaussians(2, 2, 1.0, 0.1, 0).is_err());
    }

    #[test]
    fn synth_class_means() {
        let ds = synth_gaussians(4000, 2, 6.0, 0.5, 1).unwrap();
        let (mut mp, mut mn) = (0.0, 0.0);
        for (i, y) in ds.labels().iter().enumerate() {
            match y {
                Label::Positive => mp += ds.features()[(i, 0)],
                Label::Negative => mn += ds.features()[(i, 0)],
            }
        }
        assert!((mp / 2000.0 - 3.0).abs() < 0.1);
        assert!((mn / 2000.0 + 3.0).abs() < 0.1);
    }

    #[test]
    fn make_pu_boundaries() {
        let ds = synth_gaussians(200, 2, 2.0, 0.5, 3).unwrap();
        let none = make_pu(&ds, 0, 1).unwrap();
        assert_eq!(none.n_labeled(), 0);
        assert_eq!(none.prior().pi(), 0.5);
        let all = make_pu(&ds, 100, 1).unwrap();
        assert_eq!(all.prior().pi(), 0.0);
        assert!(make_pu(&ds, 101, 1).is_err());
    }

    #[test]
    fn make_pu_labels_only_positives() {
        let ds = synth_gaussians(60000, 1, 1.0, 0.5, 4).unwrap();
        let pu = make_pu(&ds, 3000, 2).unwrap();
        assert_eq!(pu.n_labeled(), 3000);
        for (s, y) in pu.indicator().iter().zip(pu.hidden_labels()) {
            if *s {
                assert_eq!(*y, Label::Positive);
            }
        }
        assert!((pu.prior().pi() - 27000.0 / 57000.0).abs() < 1e-15);
    }

    #[test]
    fn make_pu_seed_behavior() {
        let ds = synth_gaussians(200, 2, 2.0, 0.5, 3).unwrap();
        let a = make_pu(&ds, 20, 5).unwrap();
        assert_eq!(a, make_pu(&ds, 20, 5).unwrap());
        assert_ne!(a.indicator(), make_pu(&ds, 20, 6).unwrap().indicator());
    }

    #[test]
    fn make_pnu_cases() {
        let ds = synth_gaussians(100, 2, 2.0, 0.5, 3).unwrap();
        let full = make_pnu(&ds, 100, 1).unwrap();
        assert!(full.is_fully_labeled());
        let none = make_pnu(&ds, 0, 1).unwrap();
        assert!(none.observed_labels().iter().all(Option::is_none));
        let half = make_pnu(&ds, 50, 7).unwrap();
        assert_eq!(half, make_pnu(&ds, 50, 7).unwrap());
        assert_eq!(half.observed_labels().iter().filter(|o| o.is_some()).count(), 50);
        for (o, y) in half.observed_labels().iter().zip(half.hidden_labels()) {
            if let Some(o) = o {
                assert_eq!(o, y);
            }
        }
        assert!(make_pnu(&ds, 101, 1).is_err());
    }

    #[test]
    fn identity_augmentation_copies_sources() {
        let pu = make_pu(&tiny(), 1, 0).unwrap();
        let mut rng = RngStream::new(0, 0);
        let b = make_multiview_batch(&pu, &[0, 1, 2], &AugmentConfig::IDENTITY, &mut rng).unwrap();
        assert_eq!(b.n_views(), 6);
        for v in 0..6 {
            assert_eq!(b.inputs.row(v), pu.features().row(b.source_index[v]));
        }
        check_pairing(&b.pair_index).unwrap();
    }

    #[test]
    fn labeled_sources_label_both_views() {
        let ds = synth_gaussians(40, 3, 2.0, 0.5, 1).unwrap();
        let pu = make_pu(&ds, 10, 1).unwrap();
        let mut rng = RngStream::new(1, 2);
        let idx: Vec<usize> = (0..40).collect();
        let b = make_multiview_batch(&pu, &idx, &AugmentConfig::default(), &mut rng).unwrap();
        for v in 0..b.n_views() {
            let src = b.source_index[v];
            assert_eq!(b.indicator[v], pu.indicator()[src]);
            assert_eq!(b.indicator[v], b.indicator[b.pair_index[v]]);
            assert_eq!(b.labels[v], b.labels[b.pair_index[v]]);
            assert_eq!(b.source_index[v], b.source_index[b.pair_index[v]]);
        }
        assert_eq!(b.indicator.iter().filter(|&&s| s).count(), 20);
        assert!(make_multiview_batch(&pu, &[], &AugmentConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn pairing_check_rejects_bad_maps() {
        assert!(check_pairing(&[1, 0, 3, 2]).is_ok());
        assert!(check_pairing(&[0, 1]).is_err());
        assert!(check_pairing(&[1, 2, 0]).is_err());
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "feature_0,feature_1,y\n0.5,1.5,+1\n-2,3,-1\n").unwrap();
        let ds = load_csv_dataset(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.class_counts(), (1, 1));

        let q = dir.path().join("q.csv");
        let big = synth_gaussians(30, 4, 2.0, 0.5, 8).unwrap();
        write_csv(&q, &big).unwrap();
        assert_eq!(load_csv_dataset(&q).unwrap(), big);

        let pu = make_pu(&big, 5, 1).unwrap();
        let r = dir.path().join("r.csv");
        write_pu_csv(&r, &pu).unwrap();
        assert_eq!(load_pu_csv(&r).unwrap(), pu);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "feature_0,y\n1.0,+1\n2.0,0\n").unwrap();
        match load_csv_dataset(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&bad, "feature_0,y\n1.0,+1\n2.0,3.0,-1\n").unwrap();
        assert!(matches!(load_csv_dataset(&bad), Err(Error::Parse { line: 3, .. })));
        std::fs::write(&bad, "feature_0,y\n1.0,+1\nabc,-1\n").unwrap();
        assert!(matches!(load_csv_dataset(&bad), Err(Error::Parse { line: 3, .. })));
        std::fs::write(&bad, "x,y\n1.0,+1\n").unwrap();
        assert!(matches!(load_csv_dataset(&bad), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&bad, "feature_0,y,s\n1.0,-1,1\n2.0,+1,0\n").unwrap();
        assert!(load_pu_csv(&bad).is_err());
    }
}

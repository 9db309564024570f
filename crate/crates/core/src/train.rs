//! Contrastive pretraining, transfer (linear probe / fine-tune), evaluation
//! and multi-seed aggregation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::data::{
    make_multiview_batch, AugmentConfig, BinaryDataset, ClassPrior, Label, PNUDataset, PUDataset,
    TrainingView,
};
use crate::error::{arg, contract, Error, Result};
use crate::losses::{ContrastiveLoss, EmbeddedBatch, DEFAULT_TAU};
use crate::model::{
    apply_head, backward, finetune_mask, forward, freeze_encoder, Mode, ModelParams,
    NormPolicy, ParamGrads, ParamMask,
};
use crate::numerics::{streams, Matrix, RngStream};
use crate::pu_risk::{logistic_grad, logistic_loss, pvu_calibrate, sigmoid, LogitBatch, RiskKind};

/// Every knob of a pretraining + transfer run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: ContrastiveLoss,
    pub risk: RiskKind,
    pub tau: f64,
    /// Replaces the dataset's stored prior when set.
    pub pi_override: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub seed: u64,
    /// `λ` in `λ·CE + (1 − λ)·contrastive`.
    pub joint_lambda: Option<f64>,
    pub augment: AugmentConfig,
    pub normalize: bool,
    /// Hidden widths of the encoder; the last entry is the representation size.
    pub encoder_dims: Vec<usize>,
    /// Projector widths after the representation; empty means identity.
    pub projector_dims: Vec<usize>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: ContrastiveLoss::Punce,
            risk: RiskKind::Nnpu,
            tau: DEFAULT_TAU,
            pi_override: None,
            batch_size: 64,
            epochs: 100,
            lr0: 0.01,
            lr_min: 0.0,
            momentum: 0.9,
            seed: 0,
            joint_lambda: None,
            augment: AugmentConfig::default(),
            normalize: true,
            encoder_dims: vec![64, 64, 32],
            projector_dims: vec![16],
            probe_epochs: 50,
            probe_lr: 0.03,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                arg(format!("{name} must be positive, got {v}"))
            }
        };
        positive("tau", self.tau)?;
        positive("lr0", self.lr0)?;
        positive("probe_lr", self.probe_lr)?;
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return arg(format!("lr_min must lie in [0, lr0], got {}", self.lr_min));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return arg(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return arg("batch_size must be at least 1");
        }
        if let Some(l) = self.joint_lambda {
            if !(0.0..=1.0).contains(&l) {
                return arg(format!("joint_lambda must lie in [0, 1], got {l}"));
            }
        }
        if let Some(p) = self.pi_override {
            ClassPrior::new(p)?;
        }
        if self.encoder_dims.is_empty() || self.encoder_dims.contains(&0) {
            return arg("encoder_dims needs at least one positive width");
        }
        if self.projector_dims.contains(&0) {
            return arg("projector_dims must be positive");
        }
        self.augment.validate()
    }

    pub fn init_params(&self, input_dim: usize) -> Result<ModelParams> {
        let mut enc = vec![input_dim];
        enc.extend_from_slice(&self.encoder_dims);
        let mut proj = Vec::new();
        if !self.projector_dims.is_empty() {
            proj.push(*enc.last().unwrap());
            proj.extend_from_slice(&self.projector_dims);
        }
        crate::model::init_mlp(&enc, &proj, self.seed)
    }

    fn norm(&self) -> NormPolicy {
        NormPolicy {
            normalize: self.normalize,
        }
    }

    fn prior_for(&self, data_prior: ClassPrior) -> Result<ClassPrior> {
        match self.pi_override {
            Some(p) => ClassPrior::new(p),
            None => Ok(data_prior),
        }
    }
}

/// One metric observation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// Append-only metric log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    records: Vec<MetricRecord>,
}

impl RunMetrics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; epochs must not go backwards per `(split, metric, seed)`.
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64, seed: u64) -> Result<()> {
        let last = self
            .records
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric && r.seed == seed);
        if let Some(r) = last {
            if epoch < r.epoch {
                return contract(format!(
                    "{split}/{metric}: epoch {epoch} logged after epoch {}",
                    r.epoch
                ));
            }
        }
        self.records.push(MetricRecord {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            seed,
        });
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn extend(&mut self, other: RunMetrics) -> Result<()> {
        for r in other.records {
            self.push(r.epoch, &r.split, &r.metric, r.value, r.seed)?;
        }
        Ok(())
    }

    /// Values of one metric, in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.series(split, metric).last().copied()
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("epoch,split,metric,value,seed\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.split,
                r.metric,
                crate::data::fmt_real(r.value),
                r.seed
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        File::create(path)?.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(πt/T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return arg("schedule length must be at least 1");
    }
    if t > total {
        return arg(format!("step {t} beyond schedule length {total}"));
    }
    let frac = t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Momentum buffers for SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub momentum: f64,
    pub buffers: ParamGrads,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ModelParams, momentum: f64) -> Self {
        Self {
            momentum,
            buffers: params.zeros_like(),
            step: 0,
        }
    }
}

/// `buf ← μ·buf + g; p ← p − lr·buf` for every unmasked tensor.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    opt: &mut OptState,
    lr: f64,
    mask: ParamMask,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&opt.buffers) {
        return contract("parameters, gradients and optimizer buffers must share a layout");
    }
    let mu = opt.momentum;
    for (((g, p), (_, gr)), (_, buf)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.buffers.tensors_mut())
    {
        if !mask.updatable(g) {
            continue;
        }
        for ((pv, gv), bv) in p.iter_mut().zip(gr).zip(buf.iter_mut()) {
            *bv = mu * *bv + gv;
            *pv -= lr * *bv;
        }
    }
    opt.step += 1;
    Ok(())
}

/// A scalar objective with its parameter gradient.
#[derive(Clone, Debug)]
pub struct ValueGrad {
    pub value: f64,
    pub grads: ParamGrads,
}

/// `λ·CE + (1 − λ)·CL` for values and gradients.
pub fn joint_objective(ce: &ValueGrad, cl: &ValueGrad, lambda: f64) -> Result<ValueGrad> {
    if !(0.0..=1.0).contains(&lambda) {
        return arg(format!("lambda must lie in [0, 1], got {lambda}"));
    }
    let mut grads = ce.grads.clone();
    grads.scale(lambda);
    grads.axpy(1.0 - lambda, &cl.grads)?;
    Ok(ValueGrad {
        value: lambda * ce.value + (1.0 - lambda) * cl.value,
        grads,
    })
}

/// Pretraining input: PU or PNU data.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Pu(&'a PUDataset),
    Pnu(&'a PNUDataset),
}

impl TrainData<'_> {
    fn view(&self) -> &dyn TrainingView {
        match self {
            TrainData::Pu(d) => *d,
            TrainData::Pnu(d) => *d,
        }
    }

    fn check_loss(&self, loss: ContrastiveLoss) -> Result<()> {
        match (loss, self) {
            (ContrastiveLoss::InfoNce, _) => Ok(()),
            (ContrastiveLoss::Punce | ContrastiveLoss::SclPu, TrainData::Pu(_)) => Ok(()),
            (ContrastiveLoss::PnuPunce, TrainData::Pnu(_)) => Ok(()),
            (ContrastiveLoss::Scl, TrainData::Pnu(d)) if d.is_fully_labeled() => Ok(()),
            (ContrastiveLoss::Scl, _) => arg("scl needs fully labeled (PNU with every label observed) data"),
            (ContrastiveLoss::PnuPunce, _) => arg("pnu_punce needs PNU data"),
            (l, _) => arg(format!("{l} needs PU data")),
        }
    }
}

/// Cross-entropy over views with an observed label; zero if there are none.
fn labeled_ce(params: &ModelParams, inputs: &Matrix, labels: &[Option<Label>]) -> Result<ValueGrad> {
    let n_lab = labels.iter().filter(|l| l.is_some()).count();
    if n_lab == 0 {
        return Ok(ValueGrad {
            value: 0.0,
            grads: params.zeros_like(),
        });
    }
    let (logits, tape) = forward(params, inputs, Mode::Finetune, NormPolicy::default())?;
    let inv = 1.0 / n_lab as f64;
    let mut value = 0.0;
    let mut g = Matrix::zeros(logits.rows(), 1);
    for (i, l) in labels.iter().enumerate() {
        if let Some(y) = l {
            value += inv * logistic_loss(logits[(i, 0)], y.sign());
            g[(i, 0)] = inv * logistic_grad(logits[(i, 0)], y.sign());
        }
    }
    let (grads, _) = backward(params, &tape, &g)?;
    Ok(ValueGrad { value, grads })
}

fn batches_per_epoch(n: usize, b: usize) -> usize {
    if n == 0 {
        0
    } else if n < b {
        1
    } else {
        n / b
    }
}

/// Contrastive pretraining of encoder and projector (and of the head when a
/// joint CE weight is configured).
pub fn pretrain(cfg: &TrainConfig, data: TrainData<'_>, params: ModelParams) -> Result<(ModelParams, RunMetrics)> {
    cfg.validate()?;
    data.check_loss(cfg.loss)?;
    let view = data.view();
    if view.features().cols() != params.input_dim() {
        return arg("dataset dimension does not match the model input");
    }
    let prior = cfg.prior_for(view.prior())?;
    let mut metrics = RunMetrics::new();
    let mut params = params;
    if cfg.epochs == 0 {
        return Ok((params, metrics));
    }
    let n = view.len();
    let b = cfg.batch_size.min(n);
    let steps = batches_per_epoch(n, b);
    if steps == 0 {
        return arg("cannot pretrain on an empty dataset");
    }
    let total = cfg.epochs * steps;
    let mut shuffle = RngStream::new(cfg.seed, streams::SHUFFLE);
    let mut augment = RngStream::new(cfg.seed, streams::AUGMENT);
    let mut opt = OptState::new(&params, cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut cl_sum = 0.0;
        let mut degenerate = 0usize;
        for chunk in order.chunks_exact(b).take(steps) {
            let views = make_multiview_batch(view, chunk, &cfg.augment, &mut augment)?;
            let (z, tape) = forward(&params, &views.inputs, Mode::Encode, cfg.norm())?;
            let batch = EmbeddedBatch::from_views(z, &views, cfg.tau, cfg.normalize)?;
            let out = cfg.loss.evaluate(&batch, prior)?;
            degenerate += out.degenerate_labeled;
            let (grads, _) = backward(&params, &tape, &out.grad_z)?;
            let cl = ValueGrad {
                value: out.value,
                grads,
            };
            let step = match cfg.joint_lambda {
                Some(lambda) => {
                    let ce = labeled_ce(&params, &views.inputs, &views.labels)?;
                    joint_objective(&ce, &cl, lambda)?
                }
                None => cl,
            };
            let lr = cosine_lr(opt.step as usize, total, cfg.lr0, cfg.lr_min)?;
            sgd_step(&mut params, &step.grads, &mut opt, lr, ParamMask::ALL)?;
            loss_sum += step.value;
            cl_sum += out.value;
        }
        let denom = steps as f64;
        metrics.push(epoch, "train", "loss", loss_sum / denom, cfg.seed)?;
        if cfg.joint_lambda.is_some() {
            metrics.push(epoch, "train", "contrastive_loss", cl_sum / denom, cfg.seed)?;
        }
        metrics.push(epoch, "train", "degenerate_batches", degenerate as f64, cfg.seed)?;
    }
    Ok((params, metrics))
}

/// Accuracy and confusion counts of `sign(head logit)` (zero counts as
/// positive).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl Evaluation {
    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    pub fn recall_pos(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn recall_neg(&self) -> f64 {
        ratio(self.true_neg, self.true_neg + self.false_pos)
    }

    pub fn log(&self, metrics: &mut RunMetrics, epoch: usize, split: &str, seed: u64) -> Result<()> {
        metrics.push(epoch, split, "accuracy", self.accuracy, seed)?;
        metrics.push(epoch, split, "recall_pos", self.recall_pos(), seed)?;
        metrics.push(epoch, split, "recall_neg", self.recall_neg(), seed)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn evaluate(params: &ModelParams, test: &BinaryDataset) -> Result<Evaluation> {
    if test.is_empty() {
        return arg("cannot evaluate on an empty dataset");
    }
    let (logits, _) = forward(params, test.features(), Mode::Finetune, NormPolicy::default())?;
    Ok(evaluate_logits(logits.as_slice(), test.labels()))
}

pub fn evaluate_logits(logits: &[f64], labels: &[Label]) -> Evaluation {
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&f, &y) in logits.iter().zip(labels) {
        match (f >= 0.0, y) {
            (true, Label::Positive) => tp += 1,
            (false, Label::Negative) => tn += 1,
            (true, Label::Negative) => fp += 1,
            (false, Label::Positive) => fn_ += 1,
        }
    }
    Evaluation {
        accuracy: ratio(tp + tn, labels.len()),
        true_pos: tp,
        true_neg: tn,
        false_pos: fp,
        false_neg: fn_,
    }
}

/// Which parameters the transfer stage trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transfer {
    LinearProbe,
    Finetune,
}

impl Transfer {
    pub fn name(self) -> &'static str {
        match self {
            Transfer::LinearProbe => "probe",
            Transfer::Finetune => "finetune",
        }
    }
}

/// Linear probing: the head is trained with the configured PU risk while
/// encoder and projector stay frozen. `test`, when given, is evaluated after
/// every epoch and logged under the `probe_test` / `finetune_test` split.
pub fn probe(
    cfg: &TrainConfig,
    params: ModelParams,
    data: &PUDataset,
    test: Option<&BinaryDataset>,
) -> Result<(ModelParams, RunMetrics)> {
    let mask = freeze_encoder(&params);
    transfer(cfg, params, data, test, mask, Transfer::LinearProbe)
}

/// Fine-tuning: as [`probe`] but every parameter is updated.
pub fn finetune(
    cfg: &TrainConfig,
    params: ModelParams,
    data: &PUDataset,
    test: Option<&BinaryDataset>,
) -> Result<(ModelParams, RunMetrics)> {
    let mask = finetune_mask(&params);
    transfer(cfg, params, data, test, mask, Transfer::Finetune)
}

/// Minibatch plan for one transfer epoch.
///
/// Unbiased risks need labeled and unlabeled samples in every batch, so for
/// uPU/nnPU each batch pairs `b` unlabeled samples with `min(b, n_P)` labeled
/// samples drawn from a separately cycled labeled pool. PN-type risks use
/// uniform batches over the whole training set.
struct TransferBatches {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    all: Vec<usize>,
    cursor: usize,
}

impl TransferBatches {
    fn plan(&mut self, risk: RiskKind, b: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
        match risk {
            RiskKind::Pn | RiskKind::Pvu => {
                rng.shuffle(&mut self.all);
                let b = b.min(self.all.len());
                self.all
                    .chunks_exact(b)
                    .take(batches_per_epoch(self.all.len(), b))
                    .map(<[usize]>::to_vec)
                    .collect()
            }
            RiskKind::Upu | RiskKind::Nnpu => {
                rng.shuffle(&mut self.unlabeled);
                let bu = b.min(self.unlabeled.len());
                let bp = b.min(self.labeled.len());
                let steps = batches_per_epoch(self.unlabeled.len(), bu);
                let mut out = Vec::with_capacity(steps);
                for chunk in self.unlabeled.chunks_exact(bu).take(steps) {
                    let mut idx = Vec::with_capacity(bp + bu);
                    for _ in 0..bp {
                        if self.cursor == 0 {
                            rng.shuffle(&mut self.labeled);
                        }
                        idx.push(self.labeled[self.cursor]);
                        self.cursor = (self.cursor + 1) % self.labeled.len();
                    }
                    idx.extend_from_slice(chunk);
                    out.push(idx);
                }
                out
            }
        }
    }
}

fn transfer(
    cfg: &TrainConfig,
    mut params: ModelParams,
    data: &PUDataset,
    test: Option<&BinaryDataset>,
    mask: ParamMask,
    kind: Transfer,
) -> Result<(ModelParams, RunMetrics)> {
    cfg.validate()?;
    if data.features().cols() != params.input_dim() {
        return arg("dataset dimension does not match the model input");
    }
    let prior = cfg.prior_for(data.prior())?;
    let split = kind.name();
    let shuffle_stream = match kind {
        Transfer::LinearProbe => streams::PROBE_SHUFFLE,
        Transfer::Finetune => streams::FINETUNE_SHUFFLE,
    };
    let mut rng = RngStream::new(cfg.seed, shuffle_stream);
    let mut metrics = RunMetrics::new();

    let mut labeled: Vec<usize> = (0..data.len()).filter(|&i| data.indicator()[i]).collect();
    let unlabeled: Vec<usize> = (0..data.len()).filter(|&i| !data.indicator()[i]).collect();

    // PvU holds out a fifth of the labeled positives to estimate c.
    let mut holdout = Vec::new();
    if cfg.risk == RiskKind::Pvu {
        if labeled.is_empty() {
            return arg("pvu needs at least one labeled sample");
        }
        let mut split_rng = RngStream::new(cfg.seed, streams::PVU_SPLIT);
        split_rng.shuffle(&mut labeled);
        let k = labeled.len().div_ceil(5);
        holdout = labeled.split_off(labeled.len() - k);
    }
    if matches!(cfg.risk, RiskKind::Upu | RiskKind::Nnpu) && (labeled.is_empty() || unlabeled.is_empty()) {
        return arg(format!(
            "{} needs labeled and unlabeled samples ({} and {})",
            cfg.risk,
            labeled.len(),
            unlabeled.len()
        ));
    }
    let mut all: Vec<usize> = labeled.iter().chain(&unlabeled).copied().collect();
    all.sort_unstable();
    let mut plan = TransferBatches {
        labeled,
        unlabeled,
        all,
        cursor: 0,
    };

    let b = cfg.batch_size;
    let probe_plan_len = {
        // Plans are regenerated every epoch; their length is fixed by pool sizes.
        let mut dry = RngStream::new(cfg.seed, shuffle_stream);
        let mut copy = TransferBatches {
            labeled: plan.labeled.clone(),
            unlabeled: plan.unlabeled.clone(),
            all: plan.all.clone(),
            cursor: 0,
        };
        copy.plan(cfg.risk, b, &mut dry).len()
    };
    let total = (cfg.probe_epochs * probe_plan_len).max(1);
    let mut opt = OptState::new(&params, cfg.momentum);
    let feats = data.features();
    for epoch in 0..cfg.probe_epochs {
        let batches = plan.plan(cfg.risk, b, &mut rng);
        let mut risk_sum = 0.0;
        for idx in &batches {
            let x = feats.select_rows(idx);
            let (logits, tape) = forward(&params, &x, Mode::Finetune, cfg.norm())?;
            let s: Vec<bool> = idx.iter().map(|&i| data.indicator()[i]).collect();
            let lb = LogitBatch::new(logits.as_slice().to_vec(), s, prior)?;
            let risk = cfg.risk.evaluate(&lb)?;
            let g = Matrix::from_vec(idx.len(), 1, risk.grad_logits)?;
            let (grads, _) = backward(&params, &tape, &g)?;
            let lr = cosine_lr(opt.step as usize, total, cfg.probe_lr, 0.0)?;
            sgd_step(&mut params, &grads, &mut opt, lr, mask)?;
            risk_sum += risk.value;
        }
        metrics.push(epoch, split, "risk", risk_sum / batches.len().max(1) as f64, cfg.seed)?;
        if let Some(test) = test {
            let mut eval_params = params.clone();
            if cfg.risk == RiskKind::Pvu {
                calibrate_head(&mut eval_params, data, &holdout)?;
            }
            evaluate(&eval_params, test)?.log(&mut metrics, epoch, &format!("{split}_test"), cfg.seed)?;
        }
    }
    if cfg.risk == RiskKind::Pvu {
        let c = calibrate_head(&mut params, data, &holdout)?;
        metrics.push(cfg.probe_epochs, split, "pvu_c", c, cfg.seed)?;
    }
    Ok((params, metrics))
}

/// Folds the PvU decision rule `σ(f)/c ≥ ½` into the head bias so that the
/// sign of the adjusted logit is the calibrated prediction. Returns `c`.
fn calibrate_head(params: &mut ModelParams, data: &PUDataset, holdout: &[usize]) -> Result<f64> {
    let x = data.features().select_rows(holdout);
    let (r, _) = forward(params, &x, Mode::FeatExt, NormPolicy::default())?;
    let logits = apply_head(params, &r)?;
    let probs: Vec<f64> = logits.as_slice().iter().map(|&f| sigmoid(f)).collect();
    let c = pvu_calibrate(&probs)?;
    let t = c / 2.0;
    params.head.bias[0] -= (t / (1.0 - t)).ln();
    Ok(c)
}

/// Mean and unbiased sample standard deviation (absent for a single value).
pub fn mean_std(values: &[f64]) -> Result<(f64, Option<f64>)> {
    if values.is_empty() {
        return arg("no values to aggregate");
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Ok((mean, None));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, Some(var.sqrt())))
}

/// Cross-seed summary of one `(epoch, split, metric)` key.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub mean: f64,
    pub std: Option<f64>,
    pub runs: usize,
}

/// Aggregates runs key by key. Every run must log the same set of
/// `(epoch, split, metric)` keys.
pub fn aggregate_seeds(runs: &[RunMetrics]) -> Result<Vec<Aggregate>> {
    if runs.is_empty() {
        return arg("no runs to aggregate");
    }
    let keyed = |m: &RunMetrics| -> BTreeMap<(usize, String, String), f64> {
        m.records()
            .iter()
            .map(|r| ((r.epoch, r.split.clone(), r.metric.clone()), r.value))
            .collect()
    };
    let first = keyed(&runs[0]);
    let mut columns: BTreeMap<_, Vec<f64>> = first.iter().map(|(k, &v)| (k.clone(), vec![v])).collect();
    for (ri, run) in runs.iter().enumerate().skip(1) {
        let k = keyed(run);
        if k.len() != first.len() || k.keys().zip(first.keys()).any(|(a, b)| a != b) {
            return arg(format!("run {ri} logs a different set of epoch/split/metric keys than run 0"));
        }
        for (key, v) in k {
            columns.get_mut(&key).unwrap().push(v);
        }
    }
    columns
        .into_iter()
        .map(|((epoch, split, metric), vals)| {
            let (mean, std) = mean_std(&vals)?;
            Ok(Aggregate {
                epoch,
                split,
                metric,
                mean,
                std,
                runs: vals.len(),
            })
        })
        .collect()
}

/// A multi-seed grid over contrastive losses and labeled-set sizes.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub base: TrainConfig,
    pub losses: Vec<ContrastiveLoss>,
    pub n_labeled: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Also fine-tune every pretrained checkpoint (paired with its probe).
    pub compare_finetune: bool,
}

/// Outcome of one `(loss, n_P, seed)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub loss: ContrastiveLoss,
    pub n_labeled: usize,
    pub seed: u64,
    pub prior: f64,
    pub probe_accuracy: f64,
    pub finetune_accuracy: Option<f64>,
    pub metrics: RunMetrics,
}

/// Pretrains, probes (and optionally fine-tunes) one cell.
pub fn run_cell(
    cfg: &TrainConfig,
    train: &BinaryDataset,
    test: &BinaryDataset,
    n_labeled: usize,
    compare_finetune: bool,
) -> Result<CellResult> {
    let pu = crate::data::make_pu(train, n_labeled, cfg.seed)?;
    let pnu;
    let data = match cfg.loss {
        ContrastiveLoss::Scl => {
            pnu = crate::data::make_pnu(train, train.len(), cfg.seed)?;
            TrainData::Pnu(&pnu)
        }
        ContrastiveLoss::PnuPunce => {
            pnu = crate::data::make_pnu(train, n_labeled, cfg.seed)?;
            TrainData::Pnu(&pnu)
        }
        _ => TrainData::Pu(&pu),
    };
    let params = cfg.init_params(train.dim())?;
    let (pretrained, mut metrics) = pretrain(cfg, data, params)?;
    let (probed, m) = probe(cfg, pretrained.clone(), &pu, Some(test))?;
    metrics.extend(m)?;
    let probe_accuracy = evaluate(&probed, test)?.accuracy;
    let finetune_accuracy = if compare_finetune {
        let (tuned, m) = finetune(cfg, pretrained, &pu, Some(test))?;
        metrics.extend(m)?;
        Some(evaluate(&tuned, test)?.accuracy)
    } else {
        None
    };
    Ok(CellResult {
        loss: cfg.loss,
        n_labeled,
        seed: cfg.seed,
        prior: cfg.prior_for(pu.prior())?.pi(),
        probe_accuracy,
        finetune_accuracy,
        metrics,
    })
}

/// Runs every cell of the grid. Cells are independent and run in parallel;
/// results come back in `(loss, n_P, seed)` grid order.
pub fn sweep(cfg: &SweepConfig, train: &BinaryDataset, test: &BinaryDataset) -> Result<Vec<CellResult>> {
    use rayon::prelude::*;
    cfg.base.validate()?;
    if cfg.losses.is_empty() || cfg.n_labeled.is_empty() || cfg.seeds.is_empty() {
        return arg("sweep needs at least one loss, one n_P and one seed");
    }
    let mut cells = Vec::new();
    for &loss in &cfg.losses {
        for &n in &cfg.n_labeled {
            for &seed in &cfg.seeds {
                cells.push((loss, n, seed));
            }
        }
    }
    cells
        .into_par_iter()
        .map(|(loss, n, seed)| {
            let cell_cfg = TrainConfig {
                loss,
                seed,
                ..cfg.base.clone()
            };
            run_cell(&cell_cfg, train, test, n, cfg.compare_finetune)
        })
        .collect()
}

fn fmt_cell(vals: &[f64]) -> Result<String> {
    let (m, s) = mean_std(vals)?;
    Ok(match s {
        Some(s) => format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s),
        None => format!("{:.2}", 100.0 * m),
    })
}

fn grid_keys(results: &[CellResult]) -> (Vec<ContrastiveLoss>, Vec<usize>) {
    let mut losses = Vec::new();
    let mut ns = Vec::new();
    for r in results {
        if !losses.contains(&r.loss) {
            losses.push(r.loss);
        }
        if !ns.contains(&r.n_labeled) {
            ns.push(r.n_labeled);
        }
    }
    (losses, ns)
}

/// Table with one row per `n_P` and one column per loss; cells hold probe
/// accuracy (percent) as `mean±std` over seeds.
pub fn accuracy_table(results: &[CellResult]) -> Result<String> {
    let (losses, ns) = grid_keys(results);
    let mut out = String::from("n_P");
    for l in &losses {
        out.push(',');
        out.push_str(l.name());
    }
    out.push('\n');
    for &n in &ns {
        out.push_str(&n.to_string());
        for &l in &losses {
            let vals: Vec<f64> = results
                .iter()
                .filter(|r| r.loss == l && r.n_labeled == n)
                .map(|r| r.probe_accuracy)
                .collect();
            out.push(',');
            out.push_str(&fmt_cell(&vals)?);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Paired linear-probe vs fine-tune accuracies from the same checkpoints.
pub fn lp_ft_table(results: &[CellResult]) -> Result<String> {
    let (losses, ns) = grid_keys(results);
    let mut out = String::from("loss,n_P,linear_probe,finetune\n");
    for &l in &losses {
        for &n in &ns {
            let cell: Vec<&CellResult> = results.iter().filter(|r| r.loss == l && r.n_labeled == n).collect();
            let lp: Vec<f64> = cell.iter().map(|r| r.probe_accuracy).collect();
            let ft: Option<Vec<f64>> = cell.iter().map(|r| r.finetune_accuracy).collect();
            let Some(ft) = ft else {
                return Err(Error::Argument("sweep ran without fine-tuning".into()));
            };
            out.push_str(&format!("{},{},{},{}\n", l.name(), n, fmt_cell(&lp)?, fmt_cell(&ft)?));
        }
    }
    Ok(out)
}

/// One line per cell with full-precision accuracies.
pub fn cells_csv(results: &[CellResult]) -> String {
    let mut out = String::from("loss,n_P,seed,pi,probe_accuracy,finetune_accuracy\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.loss.name(),
            r.n_labeled,
            r.seed,
            crate::data::fmt_real(r.prior),
            crate::data::fmt_real(r.probe_accuracy),
            r.finetune_accuracy.map(crate::data::fmt_real).unwrap_or_default()
        ));
    }
    out
}

/// Across-epoch variance of test accuracy logged under `split`, a simple
/// stability summary (`"probe_test"` or `"finetune_test"`).
pub fn accuracy_epoch_variance(metrics: &RunMetrics, split: &str) -> Option<f64> {
    let s = metrics.series(split, "accuracy");
    mean_std(&s).ok().and_then(|(_, sd)| sd.map(|v| v * v))
}

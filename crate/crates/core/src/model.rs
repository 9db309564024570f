//! MLP encoder with a projector head and a linear online head.
//!
//! `feat_ext` returns the encoder representation `r`, `encode` runs the
//! projector on `r` (optionally L2-normalizing the result) and `finetune`
//! runs the linear head on `r`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{arg, contract, Error, Result};
use crate::numerics::{gemm, gemm_nt, gemm_tn, row_l2_normalize, streams, Matrix, RngStream};

/// Fully connected layer `y = x·W + b`, optionally followed by ReLU.
/// `weight` is `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.fan_in(), self.fan_out()),
            bias: vec![0.0; self.bias.len()],
            relu: self.relu,
        }
    }

    fn kaiming(fan_in: usize, fan_out: usize, relu: bool, rng: &mut RngStream) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let mut weight = Matrix::zeros(fan_in, fan_out);
        for w in weight.as_mut_slice() {
            *w = std * rng.normal();
        }
        Self {
            weight,
            bias: vec![0.0; fan_out],
            relu,
        }
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut pre = gemm(x, &self.weight)?;
        for i in 0..pre.rows() {
            for (v, b) in pre.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        let out = if self.relu {
            let mut a = pre.clone();
            for v in a.as_mut_slice() {
                *v = v.max(0.0);
            }
            a
        } else {
            pre.clone()
        };
        Ok((pre, out))
    }
}

/// Parameter groups, used for masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Projector,
    Head,
}

/// Encoder, projector and linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Dense>,
    pub projector: Vec<Dense>,
    pub head: Dense,
}

/// Gradients share the parameter layout.
pub type ParamGrads = ModelParams;

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.encoder[0].fan_in()
    }

    pub fn repr_dim(&self) -> usize {
        self.encoder.last().map_or(0, Dense::fan_out)
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.last().map_or(self.repr_dim(), Dense::fan_out)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.iter().map(Dense::zeros_like).collect(),
            projector: self.projector.iter().map(Dense::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = (Group, &Dense)> {
        self.encoder
            .iter()
            .map(|l| (Group::Encoder, l))
            .chain(self.projector.iter().map(|l| (Group::Projector, l)))
            .chain(std::iter::once((Group::Head, &self.head)))
    }

    /// Parameter tensors in manifest order: per layer, weight then bias.
    pub fn tensors(&self) -> Vec<(Group, &[f64])> {
        self.layers()
            .flat_map(|(g, l)| [(g, l.weight.as_slice()), (g, l.bias.as_slice())])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(Group, &mut [f64])> {
        let mut out = Vec::new();
        for (g, layers) in [
            (Group::Encoder, &mut self.encoder),
            (Group::Projector, &mut self.projector),
        ] {
            for l in layers.iter_mut() {
                out.push((g, l.weight.as_mut_slice()));
                out.push((g, l.bias.as_mut_slice()));
            }
        }
        out.push((Group::Head, self.head.weight.as_mut_slice()));
        out.push((Group::Head, self.head.bias.as_mut_slice()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.signature() == other.signature()
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        if !self.same_layout(other) {
            return contract("parameter layouts differ");
        }
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in self.tensors_mut() {
            for v in t {
                *v *= alpha;
            }
        }
    }

    fn signature(&self) -> Vec<(usize, usize, bool)> {
        self.layers()
            .map(|(_, l)| (l.fan_in(), l.fan_out(), l.relu))
            .collect()
    }

    /// FNV-1a over the parameter bits; identifies the parameter state a tape
    /// was recorded against.
    fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.tensors() {
            for v in t {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Kaiming-normal weights (`N(0, 2/fan_in)`) and zero biases.
///
/// `encoder_sizes = [d, h₁, …, r]` (all ReLU); `projector_sizes = [r, …, k]`
/// with ReLU between layers but not after the last. An empty or single-entry
/// projector is the identity. The head maps `r` to one logit.
pub fn init_mlp(encoder_sizes: &[usize], projector_sizes: &[usize], seed: u64) -> Result<ModelParams> {
    if encoder_sizes.len() < 2 {
        return arg("encoder needs at least one layer (two sizes)");
    }
    if encoder_sizes.iter().chain(projector_sizes).any(|&s| s == 0) {
        return arg("layer dimensions must be positive");
    }
    let repr = *encoder_sizes.last().unwrap();
    if projector_sizes.first().is_some_and(|&p| p != repr) {
        return arg(format!(
            "projector input {} does not match encoder output {repr}",
            projector_sizes[0]
        ));
    }
    let mut rng = RngStream::new(seed, streams::INIT);
    let encoder = encoder_sizes
        .windows(2)
        .map(|w| Dense::kaiming(w[0], w[1], true, &mut rng))
        .collect();
    let n_proj = projector_sizes.len().saturating_sub(1);
    let projector = projector_sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| Dense::kaiming(w[0], w[1], i + 1 < n_proj, &mut rng))
        .collect();
    let head = Dense::kaiming(repr, 1, false, &mut rng);
    Ok(ModelParams {
        encoder,
        projector,
        head,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Encode,
    Finetune,
    FeatExt,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Encode => "encode",
            Mode::Finetune => "finetune",
            Mode::FeatExt => "feat_ext",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encode" => Ok(Mode::Encode),
            "finetune" => Ok(Mode::Finetune),
            "feat_ext" => Ok(Mode::FeatExt),
            other => arg(format!("unknown forward mode `{other}`")),
        }
    }
}

/// Whether `encode` L2-normalizes the projector output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormPolicy {
    pub normalize: bool,
}

impl Default for NormPolicy {
    fn default() -> Self {
        Self { normalize: true }
    }
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Matrix,
    pre: Matrix,
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTape {
    mode: Mode,
    /// Per layer, in execution order.
    layers: Vec<LayerCache>,
    /// `(normalized output, row norms)` when the encode path normalized.
    normalized: Option<(Matrix, Vec<f64>)>,
    output_shape: (usize, usize),
    digest: u64,
}

impl ForwardTape {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

fn run_stack(layers: &[Dense], mut x: Matrix, caches: Option<&mut Vec<LayerCache>>) -> Result<Matrix> {
    let mut sink = caches;
    for l in layers {
        let (pre, out) = l.forward(&x)?;
        if let Some(c) = sink.as_deref_mut() {
            c.push(LayerCache { input: x, pre });
        }
        x = out;
    }
    Ok(x)
}

/// Projector applied to an encoder representation.
pub fn apply_projector(params: &ModelParams, r: &Matrix, norm: NormPolicy) -> Result<Matrix> {
    let u = run_stack(&params.projector, r.clone(), None)?;
    if norm.normalize {
        row_l2_normalize(&u)
    } else {
        Ok(u)
    }
}

/// Linear head applied to an encoder representation.
pub fn apply_head(params: &ModelParams, r: &Matrix) -> Result<Matrix> {
    run_stack(std::slice::from_ref(&params.head), r.clone(), None)
}

pub fn forward(
    params: &ModelParams,
    x: &Matrix,
    mode: Mode,
    norm: NormPolicy,
) -> Result<(Matrix, ForwardTape)> {
    if x.cols() != params.input_dim() {
        return arg(format!(
            "input has {} columns, encoder expects {}",
            x.cols(),
            params.input_dim()
        ));
    }
    let mut layers = Vec::new();
    let r = run_stack(&params.encoder, x.clone(), Some(&mut layers))?;
    let mut normalized = None;
    let out = match mode {
        Mode::FeatExt => r,
        Mode::Finetune => run_stack(std::slice::from_ref(&params.head), r, Some(&mut layers))?,
        Mode::Encode => {
            let u = run_stack(&params.projector, r, Some(&mut layers))?;
            if norm.normalize {
                let z = row_l2_normalize(&u)?;
                let norms = (0..u.rows())
                    .map(|i| crate::numerics::dot(u.row(i), u.row(i)).sqrt())
                    .collect();
                normalized = Some((z.clone(), norms));
                z
            } else {
                u
            }
        }
    };
    let tape = ForwardTape {
        mode,
        layers,
        normalized,
        output_shape: out.shape(),
        digest: params.digest(),
    };
    Ok((out, tape))
}

/// Backpropagates `grad_output` through the recorded pass. Returns parameter
/// gradients (zero for layers the mode did not use) and the gradient with
/// respect to the input.
pub fn backward(
    params: &ModelParams,
    tape: &ForwardTape,
    grad_output: &Matrix,
) -> Result<(ParamGrads, Matrix)> {
    if tape.digest != params.digest() {
        return contract("tape was recorded against different parameters");
    }
    if grad_output.shape() != tape.output_shape {
        return contract(format!(
            "grad_output is {:?}, forward produced {:?}",
            grad_output.shape(),
            tape.output_shape
        ));
    }
    let mut grads = params.zeros_like();
    let mut g = grad_output.clone();

    if let Some((z, norms)) = &tape.normalized {
        // d(u/|u|) = (I − z zᵀ) / |u|
        for (i, &norm) in norms.iter().enumerate() {
            let proj = crate::numerics::dot(z.row(i), g.row(i));
            let zi = z.row(i);
            for (gv, &zv) in g.row_mut(i).iter_mut().zip(zi) {
                *gv = (*gv - zv * proj) / norm;
            }
        }
    }

    let n_enc = params.encoder.len();
    let tail: Vec<(&Dense, &mut Dense)> = match tape.mode {
        Mode::FeatExt => Vec::new(),
        Mode::Finetune => vec![(&params.head, &mut grads.head)],
        Mode::Encode => params.projector.iter().zip(grads.projector.iter_mut()).collect(),
    };
    if tape.layers.len() != n_enc + tail.len() {
        return contract("tape does not match the parameter layout");
    }
    let (enc_caches, tail_caches) = tape.layers.split_at(n_enc);

    for ((layer, grad), cache) in tail.into_iter().rev().zip(tail_caches.iter().rev()) {
        g = layer_backward(layer, cache, g, grad)?;
    }
    for ((layer, grad), cache) in params
        .encoder
        .iter()
        .zip(grads.encoder.iter_mut())
        .rev()
        .zip(enc_caches.iter().rev())
    {
        g = layer_backward(layer, cache, g, grad)?;
    }
    Ok((grads, g))
}

fn layer_backward(layer: &Dense, cache: &LayerCache, mut g: Matrix, grad: &mut Dense) -> Result<Matrix> {
    if g.shape() != cache.pre.shape() {
        return contract("gradient shape drifted during backward");
    }
    if layer.relu {
        for (gv, &p) in g.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            if p <= 0.0 {
                *gv = 0.0;
            }
        }
    }
    grad.weight = gemm_tn(&cache.input, &g)?;
    for i in 0..g.rows() {
        for (b, v) in grad.bias.iter_mut().zip(g.row(i)) {
            *b += v;
        }
    }
    gemm_nt(&g, &layer.weight)
}

/// Which parameter groups an optimizer step may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamMask {
    pub encoder: bool,
    pub projector: bool,
    pub head: bool,
}

impl ParamMask {
    pub const ALL: Self = Self {
        encoder: true,
        projector: true,
        head: true,
    };

    pub fn updatable(&self, g: Group) -> bool {
        match g {
            Group::Encoder => self.encoder,
            Group::Projector => self.projector,
            Group::Head => self.head,
        }
    }
}

/// Linear-probe mask: only the head trains.
pub fn freeze_encoder(_params: &ModelParams) -> ParamMask {
    ParamMask {
        encoder: false,
        projector: false,
        head: true,
    }
}

/// Fine-tuning mask: everything trains.
pub fn finetune_mask(_params: &ModelParams) -> ParamMask {
    ParamMask::ALL
}

const CKPT_MAGIC: &[u8; 8] = b"PUNCECKP";
const CKPT_VERSION: u32 = 1;

/// Serializes parameters: magic, version, layer manifest, then every
/// parameter as a little-endian `f64` in manifest order.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * params.num_params());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for stack in [&params.encoder, &params.projector] {
        out.extend_from_slice(&(stack.len() as u32).to_le_bytes());
        for l in stack.iter() {
            out.extend_from_slice(&(l.fan_in() as u32).to_le_bytes());
            out.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
            out.push(u8::from(l.relu));
        }
    }
    out.extend_from_slice(&(params.head.fan_in() as u32).to_le_bytes());
    for (_, t) in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint("truncated file".into()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn params_from_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut stacks = Vec::new();
    for _ in 0..2 {
        let n = c.u32()? as usize;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let fan_in = c.u32()? as usize;
            let fan_out = c.u32()? as usize;
            let relu = match c.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Checkpoint(format!("bad relu flag {b}"))),
            };
            layers.push((fan_in, fan_out, relu));
        }
        stacks.push(layers);
    }
    let head_in = c.u32()? as usize;
    let proj = stacks.pop().unwrap();
    let enc = stacks.pop().unwrap();
    if enc.is_empty() {
        return Err(Error::Checkpoint("encoder has no layers".into()));
    }
    let mut read_layer = |(fan_in, fan_out, relu): (usize, usize, bool)| -> Result<Dense> {
        let w = (0..fan_in * fan_out).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let bias = (0..fan_out).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Dense {
            weight: Matrix::from_vec(fan_in, fan_out, w)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            bias,
            relu,
        })
    };
    let encoder = enc.into_iter().map(&mut read_layer).collect::<Result<Vec<_>>>()?;
    let projector = proj.into_iter().map(&mut read_layer).collect::<Result<Vec<_>>>()?;
    let head = read_layer((head_in, 1, false))?;
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let params = ModelParams {
        encoder,
        projector,
        head,
    };
    let chain_ok = params
        .encoder
        .windows(2)
        .chain(params.projector.windows(2))
        .all(|w| w[0].fan_out() == w[1].fan_in())
        && params
            .projector
            .first()
            .is_none_or(|p| p.fan_in() == params.repr_dim())
        && head_in == params.repr_dim();
    if !chain_ok {
        return Err(Error::Checkpoint("layer dimensions do not chain".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    params_from_checkpoint(&fs::read(path)?)
}

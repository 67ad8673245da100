//! Decoder-only transformer over increment sequences.
//!
//! Token `p` (0-based) carries `Δb_{p+1}`; the prediction at `p` is
//! `Δb̂_{p+2}`. Each block is post-norm: masked multi-head self-attention
//! with an output projection, dropout, residual add, layer norm, then a ReLU
//! feed-forward network with the same wrapping. Every batch is processed as
//! one stacked `(B·S) × d_model` matrix so the dense layers run as large
//! GEMMs; attention is evaluated per sequence and head.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::krylov::{Forecast, IncrementSequence, LanczosSequence};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformerError {
    #[error("sequence of {len} tokens exceeds max_position + 1 = {limit}")]
    SequenceTooLong { len: usize, limit: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("softmax over an entirely masked row")]
    AllMasked,
    #[error("batch sequences must share one length")]
    RaggedBatch,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("target length {target} must exceed the prefix length {prefix}")]
    TargetTooShort { prefix: usize, target: usize },
}

/// Architecture hyperparameters. `Default` is the reference model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_position: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            d_ff: 256,
            dropout: 0.1,
            max_position: 128,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Reference model at a different width, keeping `d_ff = 4 d_model`.
    pub fn with_width(d_model: usize) -> Self {
        Self {
            d_model,
            d_ff: 4 * d_model,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TransformerError> {
        let bad = |m: &str| Err(TransformerError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive");
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Longest token sequence accepted by `forward`.
    pub fn max_len(&self) -> usize {
        self.max_position + 1
    }

    /// `2d + L(4d² + 2 d d_ff + d_ff + 5d) + d + 1`.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        2 * d + self.n_layers * (4 * d * d + 2 * d * f + f + d + 4 * d) + d + 1
    }
}

/// How a tensor is treated by weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
    NormGain,
    NormBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    /// All heads stacked: rows `i·d_k..(i+1)·d_k` belong to head `i`.
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_a: Array2<T>,
    pub w_1: Array2<T>,
    pub b_1: Array1<T>,
    pub w_2: Array2<T>,
    pub b_2: Array1<T>,
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// `d_model × 1` affine token embedding.
    pub w_e: Array2<T>,
    pub b_e: Array1<T>,
    pub layers: Vec<LayerParams<T>>,
    /// `1 × d_model` unembedding.
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
}

/// Read-only view of one named tensor.
pub struct Tensor<'a, T> {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero tensors of the right shapes (norm gains included).
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.d_ff;
        let layer = || LayerParams {
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_a: Array2::zeros((d, d)),
            w_1: Array2::zeros((f, d)),
            b_1: Array1::zeros(f),
            w_2: Array2::zeros((d, f)),
            b_2: Array1::zeros(d),
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
        };
        Self {
            config: config.clone(),
            w_e: Array2::zeros((d, 1)),
            b_e: Array1::zeros(d),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            w_o: Array2::zeros((1, d)),
            b_o: Array1::zeros(1),
        }
    }

    /// Weights `U(-1/√fan_in, 1/√fan_in)`, biases zero, norm gains one.
    /// Draws follow the tensor-table order from a ChaCha8 stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            match t.role {
                TensorRole::Weight => {
                    let fan_in = t.shape[1];
                    let bound = T::one() / T::from_usize_lossy(fan_in).sqrt();
                    for x in t.data.iter_mut() {
                        *x = rng.random_range(-bound..bound);
                    }
                }
                TensorRole::NormGain => t.data.iter_mut().for_each(|x| *x = T::one()),
                TensorRole::Bias | TensorRole::NormBias => {}
            }
        }
        p
    }

    /// Named tensors in a fixed order (the checkpoint and optimizer order).
    pub fn tensors(&self) -> Vec<Tensor<'_, T>> {
        let mut out = vec![
            ref2("embed.weight".into(), TensorRole::Weight, &self.w_e),
            ref1("embed.bias".into(), TensorRole::Bias, &self.b_e),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{i}.{s}");
            out.push(ref2(n("w_q"), TensorRole::Weight, &l.w_q));
            out.push(ref2(n("w_k"), TensorRole::Weight, &l.w_k));
            out.push(ref2(n("w_v"), TensorRole::Weight, &l.w_v));
            out.push(ref2(n("w_a"), TensorRole::Weight, &l.w_a));
            out.push(ref1(n("ln1.gain"), TensorRole::NormGain, &l.ln1_gain));
            out.push(ref1(n("ln1.bias"), TensorRole::NormBias, &l.ln1_bias));
            out.push(ref2(n("ffn.w_1"), TensorRole::Weight, &l.w_1));
            out.push(ref1(n("ffn.b_1"), TensorRole::Bias, &l.b_1));
            out.push(ref2(n("ffn.w_2"), TensorRole::Weight, &l.w_2));
            out.push(ref1(n("ffn.b_2"), TensorRole::Bias, &l.b_2));
            out.push(ref1(n("ln2.gain"), TensorRole::NormGain, &l.ln2_gain));
            out.push(ref1(n("ln2.bias"), TensorRole::NormBias, &l.ln2_bias));
        }
        out.push(ref2("unembed.weight".into(), TensorRole::Weight, &self.w_o));
        out.push(ref1("unembed.bias".into(), TensorRole::Bias, &self.b_o));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let p = self;
        let mut out = Vec::new();
        out.push(mut2("embed.weight".into(), TensorRole::Weight, &mut p.w_e));
        out.push(mut1("embed.bias".into(), TensorRole::Bias, &mut p.b_e));
        for (i, l) in p.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layers.{i}.{s}");
            out.push(mut2(n("w_q"), TensorRole::Weight, &mut l.w_q));
            out.push(mut2(n("w_k"), TensorRole::Weight, &mut l.w_k));
            out.push(mut2(n("w_v"), TensorRole::Weight, &mut l.w_v));
            out.push(mut2(n("w_a"), TensorRole::Weight, &mut l.w_a));
            out.push(mut1(n("ln1.gain"), TensorRole::NormGain, &mut l.ln1_gain));
            out.push(mut1(n("ln1.bias"), TensorRole::NormBias, &mut l.ln1_bias));
            out.push(mut2(n("ffn.w_1"), TensorRole::Weight, &mut l.w_1));
            out.push(mut1(n("ffn.b_1"), TensorRole::Bias, &mut l.b_1));
            out.push(mut2(n("ffn.w_2"), TensorRole::Weight, &mut l.w_2));
            out.push(mut1(n("ffn.b_2"), TensorRole::Bias, &mut l.b_2));
            out.push(mut1(n("ln2.gain"), TensorRole::NormGain, &mut l.ln2_gain));
            out.push(mut1(n("ln2.bias"), TensorRole::NormBias, &mut l.ln2_bias));
        }
        out.push(mut2("unembed.weight".into(), TensorRole::Weight, &mut p.w_o));
        out.push(mut1("unembed.bias".into(), TensorRole::Bias, &mut p.b_o));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, &b) in dst.data.iter_mut().zip(src.data) {
                *a += alpha * b;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

fn ref2<T>(name: String, role: TensorRole, a: &Array2<T>) -> Tensor<'_, T> {
    Tensor {
        name,
        role,
        shape: vec![a.nrows(), a.ncols()],
        data: a.as_slice().expect("parameter tensors are contiguous"),
    }
}

fn ref1<T>(name: String, role: TensorRole, a: &Array1<T>) -> Tensor<'_, T> {
    Tensor {
        name,
        role,
        shape: vec![a.len()],
        data: a.as_slice().expect("parameter tensors are contiguous"),
    }
}

fn mut2<T>(name: String, role: TensorRole, a: &mut Array2<T>) -> TensorMut<'_, T> {
    let shape = vec![a.nrows(), a.ncols()];
    TensorMut {
        name,
        role,
        shape,
        data: a.as_slice_mut().expect("parameter tensors are contiguous"),
    }
}

fn mut1<T>(name: String, role: TensorRole, a: &mut Array1<T>) -> TensorMut<'_, T> {
    let shape = vec![a.len()];
    TensorMut {
        name,
        role,
        shape,
        data: a.as_slice_mut().expect("parameter tensors are contiguous"),
    }
}

/// Attention support restriction applied on top of the causal mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "k", rename_all = "snake_case")]
pub enum MaskPolicy {
    Full,
    /// Keys of the other parity are hidden.
    Parity,
    /// Keys with `n' <= n - k` are hidden.
    LongRange(usize),
    /// Keys with `n' <= k` are hidden.
    Early(usize),
}

pub const DEFAULT_ABLATION_K: usize = 3;

impl MaskPolicy {
    /// The four policies of the ablation study with the default `k`.
    pub fn ablation_set() -> [MaskPolicy; 4] {
        [
            MaskPolicy::Full,
            MaskPolicy::Parity,
            MaskPolicy::LongRange(DEFAULT_ABLATION_K),
            MaskPolicy::Early(DEFAULT_ABLATION_K),
        ]
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPolicy::Full => write!(f, "full"),
            MaskPolicy::Parity => write!(f, "parity"),
            MaskPolicy::LongRange(k) => write!(f, "long_range({k})"),
            MaskPolicy::Early(k) => write!(f, "early({k})"),
        }
    }
}

impl FromStr for MaskPolicy {
    type Err = String;

    /// Accepts `full`, `parity`, `long_range`, `long_range(5)`, `early:2`, ...
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (head, k) = match s.find(['(', ':', '=']) {
            Some(i) => {
                let arg = s[i + 1..].trim_end_matches(')');
                let k = arg.parse::<usize>().map_err(|_| format!("bad mask parameter in `{s}`"))?;
                (&s[..i], Some(k))
            }
            None => (s, None),
        };
        let k = k.unwrap_or(DEFAULT_ABLATION_K);
        match head {
            "full" => Ok(MaskPolicy::Full),
            "parity" => Ok(MaskPolicy::Parity),
            "long_range" | "long-range" => Ok(MaskPolicy::LongRange(k)),
            "early" => Ok(MaskPolicy::Early(k)),
            _ => Err(format!("unknown mask policy `{s}`")),
        }
    }
}

/// Whether query `n` may attend to key `n_prime` (1-based coefficient
/// indices, causal support included).
pub fn ablation_mask(policy: MaskPolicy, n: usize, n_prime: usize) -> bool {
    if n_prime > n {
        return false;
    }
    match policy {
        MaskPolicy::Full => true,
        MaskPolicy::Parity => (n - n_prime).is_multiple_of(2),
        MaskPolicy::LongRange(k) => n_prime + k > n,
        MaskPolicy::Early(k) => n_prime > k,
    }
}

/// `allowed[[p, q]]` for 0-based token positions.
pub fn mask_matrix(policy: MaskPolicy, len: usize) -> Array2<bool> {
    Array2::from_shape_fn((len, len), |(p, q)| ablation_mask(policy, p + 1, q + 1))
}

/// Sinusoidal encoding: `p[2i] = sin(pos / 10000^{2i/d})`, `p[2i+1] = cos(...)`.
pub fn positional_encoding<T: Scalar>(position: usize, d_model: usize) -> Vec<T> {
    (0..d_model)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let angle = position as f64 / 10000f64.powf(i2 / d_model as f64);
            T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

fn positional_table<T: Scalar>(len: usize, d_model: usize) -> Array2<T> {
    let mut table = Array2::zeros((len, d_model));
    for (p, mut row) in table.rows_mut().into_iter().enumerate() {
        for (x, v) in row.iter_mut().zip(positional_encoding::<T>(p, d_model)) {
            *x = v;
        }
    }
    table
}

/// Max-subtracted softmax; `-∞` entries map to exactly zero.
pub fn softmax<T: Scalar>(z: &[T]) -> Result<Vec<T>, TransformerError> {
    let max = z
        .iter()
        .copied()
        .filter(|x| *x > T::neg_infinity())
        .fold(None, |m: Option<T>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or(TransformerError::AllMasked)?;
    let e: Vec<T> = z
        .iter()
        .map(|&x| if x == T::neg_infinity() { T::zero() } else { (x - max).exp() })
        .collect();
    let sum: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / sum).collect())
}

/// Row softmax restricted to `allowed`; rows with empty support become zero.
/// `allowed` is causal, so row `p` is only scanned up to column `p`.
fn masked_softmax_rows<T: Scalar>(scores: &mut Array2<T>, allowed: ArrayView2<'_, bool>) {
    let n = scores.ncols();
    let data = scores.as_slice_mut().expect("fresh score matrix is contiguous");
    for (p, row) in data.chunks_exact_mut(n).enumerate() {
        let ok = allowed.row(p);
        let ok = ok.as_slice().expect("mask rows are contiguous");
        let (support, rest) = row.split_at_mut(p + 1);
        rest.fill(T::zero());
        let mut max = T::neg_infinity();
        for (x, &a) in support.iter().zip(ok) {
            if a && *x > max {
                max = *x;
            }
        }
        if max == T::neg_infinity() {
            support.fill(T::zero());
            continue;
        }
        let mut sum = T::zero();
        for (x, &a) in support.iter_mut().zip(ok) {
            *x = if a { (*x - max).exp() } else { T::zero() };
            sum += *x;
        }
        let inv = T::one() / sum;
        support.iter_mut().for_each(|x| *x *= inv);
    }
}

/// Inverted-dropout multipliers (`0` or `1/(1-p)`) for one forward pass.
#[derive(Clone, Debug)]
pub struct DropoutMasks<T> {
    attention: Vec<Array2<T>>,
    ffn: Vec<Array2<T>>,
}

impl<T: Scalar> DropoutMasks<T> {
    pub fn sample(config: &ModelConfig, rows: usize, rng: &mut impl Rng) -> Self {
        let keep = 1.0 - config.dropout;
        let scale = T::lit(1.0 / keep);
        let mut draw = || {
            Array2::from_shape_simple_fn((rows, config.d_model), || {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
        };
        let mut attention = Vec::with_capacity(config.n_layers);
        let mut ffn = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            attention.push(draw());
            ffn.push(draw());
        }
        Self { attention, ffn }
    }
}

/// Attention weights of one sequence, indexed `[layer][head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState<T> {
    pub layers: Vec<Vec<Array2<T>>>,
}

struct NormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

struct LayerCache<T> {
    input: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// `[sequence * n_heads + head]`, each `S × S`.
    weights: Vec<Array2<T>>,
    concat: Array2<T>,
    norm1: NormCache<T>,
    hidden1: Array2<T>,
    pre_relu: Array2<T>,
    relu: Array2<T>,
    norm2: NormCache<T>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T> {
    batch: usize,
    len: usize,
    tokens: Array2<T>,
    layers: Vec<LayerCache<T>>,
    output_hidden: Array2<T>,
}

/// Predictions for a batch, `batch × len`.
pub struct BatchOutput<T> {
    pub predictions: Array2<T>,
    pub cache: ForwardCache<T>,
}

fn layer_norm<T: Scalar>(x: &Array2<T>, gain: &Array1<T>, bias: &Array1<T>, eps: T) -> (Array2<T>, NormCache<T>) {
    let d = T::from_usize_lossy(x.ncols());
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *s = inv;
    }
    let out = &normalized * gain + bias;
    (out, NormCache { normalized, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &NormCache<T>,
    gain: &Array1<T>,
    dgain: &mut Array1<T>,
    dbias: &mut Array1<T>,
) -> Array2<T> {
    *dgain += &(dy * &cache.normalized).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = T::from_usize_lossy(dy.ncols());
    let mut dx = dy * gain;
    Zip::from(dx.rows_mut())
        .and(cache.normalized.rows())
        .and(&cache.inv_std)
        .for_each(|mut g, xh, &inv| {
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
            Zip::from(&mut g).and(&xh).for_each(|gi, &xi| {
                *gi = inv * (*gi - mean_g - xi * mean_gx);
            });
        });
    dx
}

fn standard<T: Scalar>(a: Array2<T>) -> Array2<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// `scale · A ⊙ (dA - rowsum(dA ⊙ A))`, using the causal support of `A`.
fn softmax_backward<T: Scalar>(a: &Array2<T>, mut da: Array2<T>, scale: T) -> Array2<T> {
    let n = a.ncols();
    let w = a.as_slice().expect("attention weights are contiguous");
    let g = da.as_slice_mut().expect("fresh gradient is contiguous");
    for (p, (grow, wrow)) in g.chunks_exact_mut(n).zip(w.chunks_exact(n)).enumerate() {
        let (support, rest) = grow.split_at_mut(p + 1);
        rest.fill(T::zero());
        let total: T = support.iter().zip(wrow).map(|(&x, &y)| x * y).sum();
        for (x, &y) in support.iter_mut().zip(wrow) {
            *x = scale * y * (*x - total);
        }
    }
    da
}

/// Batched forward pass over `tokens` (`batch × len` increments).
pub fn forward_batch<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &Array2<T>,
    mask: MaskPolicy,
    dropout: Option<&DropoutMasks<T>>,
) -> Result<BatchOutput<T>, TransformerError> {
    let cfg = &params.config;
    let (batch, len) = tokens.dim();
    if batch == 0 || len == 0 {
        return Err(TransformerError::EmptyInput);
    }
    if len > cfg.max_len() {
        return Err(TransformerError::SequenceTooLong {
            len,
            limit: cfg.max_len(),
        });
    }
    let d = cfg.d_model;
    let dk = cfg.d_k();
    let heads = cfg.n_heads;
    let rows = batch * len;
    let eps = T::lit(cfg.layer_norm_eps);
    let scale = T::one() / T::from_usize_lossy(dk).sqrt();
    let allowed = mask_matrix(mask, len);
    let pe = positional_table::<T>(len, d);

    let flat = tokens.to_shape((rows, 1)).expect("contiguous tokens").to_owned();
    let mut h = flat.dot(&params.w_e.t()) + &params.b_e;
    for b in 0..batch {
        let mut block = h.slice_mut(s![b * len..(b + 1) * len, ..]);
        block += &pe;
    }

    let mut caches = Vec::with_capacity(cfg.n_layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let q = h.dot(&lp.w_q.t());
        let k = h.dot(&lp.w_k.t());
        let v = h.dot(&lp.w_v.t());
        let mut concat = Array2::<T>::zeros((rows, d));
        let mut weights = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let r = b * len..(b + 1) * len;
            for hd in 0..heads {
                let c = hd * dk..(hd + 1) * dk;
                let qh = q.slice(s![r.clone(), c.clone()]);
                let kh = k.slice(s![r.clone(), c.clone()]);
                let vh = v.slice(s![r.clone(), c.clone()]);
                let mut a = standard(qh.dot(&kh.t()));
                a.mapv_inplace(|x| x * scale);
                masked_softmax_rows(&mut a, allowed.view());
                concat.slice_mut(s![r.clone(), c]).assign(&a.dot(&vh));
                weights.push(a);
            }
        }
        let mut attn = concat.dot(&lp.w_a.t());
        if let Some(m) = dropout {
            attn *= &m.attention[li];
        }
        let (hidden1, norm1) = layer_norm(&(&h + &attn), &lp.ln1_gain, &lp.ln1_bias, eps);
        let pre_relu = hidden1.dot(&lp.w_1.t()) + &lp.b_1;
        let relu = pre_relu.mapv(|x| x.max(T::zero()));
        let mut ffn = relu.dot(&lp.w_2.t()) + &lp.b_2;
        if let Some(m) = dropout {
            ffn *= &m.ffn[li];
        }
        let (out, norm2) = layer_norm(&(&hidden1 + &ffn), &lp.ln2_gain, &lp.ln2_bias, eps);
        caches.push(LayerCache {
            input: std::mem::replace(&mut h, out),
            q,
            k,
            v,
            weights,
            concat,
            norm1,
            hidden1,
            pre_relu,
            relu,
            norm2,
        });
    }

    let y = h.dot(&params.w_o.t()) + &params.b_o;
    let predictions = y.into_shape_with_order((batch, len)).expect("row-major output");
    Ok(BatchOutput {
        predictions,
        cache: ForwardCache {
            batch,
            len,
            tokens: flat,
            layers: caches,
            output_hidden: h,
        },
    })
}

/// Gradients of `Σ d_predictions ⊙ predictions` with respect to every
/// parameter, for the pass recorded in `cache`.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    d_predictions: &Array2<T>,
    dropout: Option<&DropoutMasks<T>>,
) -> ModelParams<T> {
    let cfg = &params.config;
    let (batch, len) = (cache.batch, cache.len);
    assert_eq!(d_predictions.dim(), (batch, len), "gradient shape mismatch");
    let rows = batch * len;
    let dk = cfg.d_k();
    let heads = cfg.n_heads;
    let scale = T::one() / T::from_usize_lossy(dk).sqrt();
    let mut g = ModelParams::zeros(cfg);

    let dy = d_predictions.to_shape((rows, 1)).expect("contiguous gradient").to_owned();
    g.w_o = standard(dy.t().dot(&cache.output_hidden));
    g.b_o = dy.sum_axis(Axis(0));
    let mut dh = dy.dot(&params.w_o);

    for li in (0..cfg.n_layers).rev() {
        let lp = &params.layers[li];
        let lc = &cache.layers[li];
        let gl = &mut g.layers[li];

        // second sublayer
        let dr2 = layer_norm_backward(&dh, &lc.norm2, &lp.ln2_gain, &mut gl.ln2_gain, &mut gl.ln2_bias);
        let mut dffn = dr2.clone();
        if let Some(m) = dropout {
            dffn *= &m.ffn[li];
        }
        gl.w_2 = standard(dffn.t().dot(&lc.relu));
        gl.b_2 = dffn.sum_axis(Axis(0));
        let mut dz = dffn.dot(&lp.w_2);
        Zip::from(&mut dz).and(&lc.pre_relu).for_each(|g, &z| {
            if z <= T::zero() {
                *g = T::zero();
            }
        });
        gl.w_1 = standard(dz.t().dot(&lc.hidden1));
        gl.b_1 = dz.sum_axis(Axis(0));
        let dh1 = dr2 + dz.dot(&lp.w_1);

        // first sublayer
        let dr1 = layer_norm_backward(&dh1, &lc.norm1, &lp.ln1_gain, &mut gl.ln1_gain, &mut gl.ln1_bias);
        let mut dattn = dr1.clone();
        if let Some(m) = dropout {
            dattn *= &m.attention[li];
        }
        gl.w_a = standard(dattn.t().dot(&lc.concat));
        let dconcat = dattn.dot(&lp.w_a);

        let mut dq = Array2::<T>::zeros((rows, cfg.d_model));
        let mut dkm = Array2::<T>::zeros((rows, cfg.d_model));
        let mut dv = Array2::<T>::zeros((rows, cfg.d_model));
        for b in 0..batch {
            let r = b * len..(b + 1) * len;
            for hd in 0..heads {
                let c = hd * dk..(hd + 1) * dk;
                let a = &lc.weights[b * heads + hd];
                let qh = lc.q.slice(s![r.clone(), c.clone()]);
                let kh = lc.k.slice(s![r.clone(), c.clone()]);
                let vh = lc.v.slice(s![r.clone(), c.clone()]);
                let dout = dconcat.slice(s![r.clone(), c.clone()]);
                let da = standard(dout.dot(&vh.t()));
                dv.slice_mut(s![r.clone(), c.clone()]).assign(&a.t().dot(&dout));
                let ds = softmax_backward(a, da, scale);
                dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kh));
                dkm.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qh));
            }
        }
        gl.w_q = standard(dq.t().dot(&lc.input));
        gl.w_k = standard(dkm.t().dot(&lc.input));
        gl.w_v = standard(dv.t().dot(&lc.input));
        dh = dr1 + dq.dot(&lp.w_q) + dkm.dot(&lp.w_k) + dv.dot(&lp.w_v);
    }

    g.w_e = standard(dh.t().dot(&cache.tokens));
    g.b_e = dh.sum_axis(Axis(0));
    g
}

/// Predictions `Δb̂_{p+2}` at every position `p` of a single sequence.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    increments: &IncrementSequence<T>,
    mask: MaskPolicy,
    capture_attention: bool,
    dropout: Option<&DropoutMasks<T>>,
) -> Result<(Vec<T>, Option<AttentionState<T>>), TransformerError> {
    let tokens = Array2::from_shape_vec((1, increments.len()), increments.values().to_vec()).expect("row vector");
    let out = forward_batch(params, &tokens, mask, dropout)?;
    let attention = capture_attention.then(|| AttentionState {
        layers: out.cache.layers.iter().map(|l| l.weights.clone()).collect(),
    });
    Ok((out.predictions.row(0).to_vec(), attention))
}

/// Autoregressive increment forecast for a batch of equal-length prompts:
/// returns `batch × target_len` increments whose first columns are the prompts.
pub fn extrapolate_increments<T: Scalar>(
    params: &ModelParams<T>,
    prompts: &Array2<T>,
    target_len: usize,
    mask: MaskPolicy,
) -> Result<Array2<T>, TransformerError> {
    let (batch, prefix) = prompts.dim();
    if batch == 0 || prefix == 0 {
        return Err(TransformerError::EmptyInput);
    }
    if target_len <= prefix {
        return Err(TransformerError::TargetTooShort { prefix, target: target_len });
    }
    if target_len - 1 > params.config.max_len() {
        return Err(TransformerError::SequenceTooLong {
            len: target_len - 1,
            limit: params.config.max_len(),
        });
    }
    let mut seq = Array2::<T>::zeros((batch, target_len));
    seq.slice_mut(s![.., ..prefix]).assign(prompts);
    for len in prefix..target_len {
        let window = seq.slice(s![.., ..len]).to_owned();
        let out = forward_batch(params, &window, mask, None)?;
        let next = out.predictions.column(len - 1).to_owned();
        seq.column_mut(len).assign(&next);
    }
    Ok(seq)
}

/// Forecast of `b_1..b_T` from an increment prompt; the prefix is the
/// cumulative sum of the prompt.
pub fn extrapolate<T: Scalar>(
    params: &ModelParams<T>,
    prefix: &IncrementSequence<T>,
    target_len: usize,
    mask: MaskPolicy,
) -> Result<Forecast<T>, TransformerError> {
    let prompt = Array2::from_shape_vec((1, prefix.len()), prefix.values().to_vec()).expect("row vector");
    let inc = extrapolate_increments(params, &prompt, target_len, mask)?;
    let mut acc = T::zero();
    let values = inc
        .row(0)
        .iter()
        .map(|&d| {
            acc += d;
            acc
        })
        .collect();
    Ok(Forecast::new(values, prefix.len()))
}

/// Batched forecasts from exact coefficient prefixes. The first `n_in`
/// coefficients of each result are copied verbatim; later ones accumulate
/// predicted increments onto `b_{n_in}`.
pub fn extrapolate_coefficients<T: Scalar>(
    params: &ModelParams<T>,
    prefixes: &[LanczosSequence<T>],
    target_len: usize,
    mask: MaskPolicy,
) -> Result<Vec<Forecast<T>>, TransformerError> {
    let n_in = prefixes.first().ok_or(TransformerError::EmptyInput)?.len();
    if prefixes.iter().any(|p| p.len() != n_in) {
        return Err(TransformerError::RaggedBatch);
    }
    let mut prompts = Array2::<T>::zeros((prefixes.len(), n_in));
    for (mut row, p) in prompts.rows_mut().into_iter().zip(prefixes) {
        for (x, v) in row.iter_mut().zip(p.to_increments().values()) {
            *x = *v;
        }
    }
    let inc = extrapolate_increments(params, &prompts, target_len, mask)?;
    Ok(prefixes
        .iter()
        .zip(inc.rows())
        .map(|(p, row)| {
            let mut values = p.values().to_vec();
            let mut acc = p.b(n_in);
            for &d in row.iter().skip(n_in) {
                acc += d;
                values.push(acc);
            }
            Forecast::new(values, n_in)
        })
        .collect())
}

/// Per-head attention map averaged over layers and the batch.
pub fn averaged_attention_map<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[IncrementSequence<T>],
    mask: MaskPolicy,
) -> Result<Vec<Array2<T>>, TransformerError> {
    let len = batch.first().ok_or(TransformerError::EmptyInput)?.len();
    if batch.iter().any(|s| s.len() != len) {
        return Err(TransformerError::RaggedBatch);
    }
    let mut tokens = Array2::<T>::zeros((batch.len(), len));
    for (mut row, s) in tokens.rows_mut().into_iter().zip(batch) {
        row.assign(&Array1::from(s.values().to_vec()));
    }
    let out = forward_batch(params, &tokens, mask, None)?;
    let heads = params.config.n_heads;
    let mut maps = vec![Array2::<T>::zeros((len, len)); heads];
    for layer in &out.cache.layers {
        for (i, w) in layer.weights.iter().enumerate() {
            maps[i % heads] += w;
        }
    }
    let count = T::from_usize_lossy(batch.len() * params.config.n_layers);
    for m in &mut maps {
        m.mapv_inplace(|x| x / count);
    }
    Ok(maps)
}

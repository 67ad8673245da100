//! Next-increment regression loss, its exact gradient, AdamW, and the
//! seeded training loop.
//!
//! For a sequence `Δb_1..Δb_T` the model reads the first `T - 1` tokens and
//! the loss is the mean over scored indices `m = n_in..T-1` of
//! `(Δb_{m+1} - Δb̂_{m+1})²`, averaged over the batch.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::krylov::IncrementSequence;
use crate::scalar::Scalar;
use crate::seeding::derive_seed;
use crate::transformer::{backward, forward_batch, DropoutMasks, MaskPolicy, ModelConfig, ModelParams, TensorRole, TransformerError};

/// Sequences per independently evaluated gradient chunk. Fixed so the
/// reduction order, and therefore every bit of the result, does not depend
/// on the thread count.
const CHUNK: usize = 16;

const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_in: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay on weight matrices only.
    pub weight_decay: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 300,
            n_in: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("sequence of length {len} leaves nothing to score with n_in = {n_in}")]
    SequenceTooShort { len: usize, n_in: usize },
    #[error("dataset of {size} sequences is smaller than the batch size {batch}")]
    DatasetTooSmall { size: usize, batch: usize },
    #[error("n_in must be at least 1")]
    ZeroWindow,
    #[error("non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Model(#[from] TransformerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch loss with dropout active.
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: Option<f64>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub n_train: usize,
    pub n_val: usize,
    pub weight_decay: f64,
    /// FNV-1a 64 over the little-endian parameter bytes, hex encoded.
    pub parameter_checksum: String,
}

impl TrainReport {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_loss)
    }
}

/// First-moment and second-moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            m: ModelParams::zeros(config),
            v: ModelParams::zeros(config),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction:
/// `θ ← θ(1 - lr λ) - lr m̂ / (√v̂ + ε)`, where `λ` is applied to weight
/// matrices only.
pub fn adamw_step<T: Scalar>(params: &mut ModelParams<T>, grads: &ModelParams<T>, state: &mut AdamState<T>, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.epsilon);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let decay = T::one() - lr * T::lit(cfg.weight_decay);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        let decayed = p.role == TensorRole::Weight;
        for (((x, &gi), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            if decayed {
                *x *= decay;
            }
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

fn check_lengths<T: Scalar>(batch: &[IncrementSequence<T>], n_in: usize) -> Result<(), TrainError> {
    if n_in == 0 {
        return Err(TrainError::ZeroWindow);
    }
    for s in batch {
        if s.len() <= n_in {
            return Err(TrainError::SequenceTooShort { len: s.len(), n_in });
        }
    }
    Ok(())
}

/// `Σ_b mean_m (Δb̂ - Δb)²` over one equal-length group, with the gradient
/// of `weight ×` that sum when `want_grad`.
fn group_loss<T: Scalar>(
    params: &ModelParams<T>,
    group: &[&IncrementSequence<T>],
    n_in: usize,
    weight: T,
    dropout_seed: Option<u64>,
    want_grad: bool,
) -> Result<(T, Option<ModelParams<T>>), TransformerError> {
    let len = group[0].len() - 1;
    let mut tokens = Array2::<T>::zeros((group.len(), len));
    for (mut row, s) in tokens.rows_mut().into_iter().zip(group) {
        row.iter_mut().zip(s.values()).for_each(|(x, &v)| *x = v);
    }
    let masks = dropout_seed.map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DropoutMasks::sample(&params.config, group.len() * len, &mut rng)
    });
    let out = forward_batch(params, &tokens, MaskPolicy::Full, masks.as_ref())?;
    // positions p = n_in-1 ..= len-1 predict Δb_{p+2} = values[p+1]
    let first = n_in - 1;
    let scored = T::from_usize_lossy(len - first);
    let mut total = T::zero();
    let mut dpred = Array2::<T>::zeros((group.len(), len));
    for (i, s) in group.iter().enumerate() {
        let mut acc = T::zero();
        for p in first..len {
            let err = out.predictions[[i, p]] - s.values()[p + 1];
            acc += err * err;
            dpred[[i, p]] = T::lit(2.0) * err * weight / scored;
        }
        total += acc / scored;
    }
    let grads = want_grad.then(|| backward(params, &out.cache, &dpred, masks.as_ref()));
    Ok((total, grads))
}

fn batch_loss<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[IncrementSequence<T>],
    n_in: usize,
    dropout_seed: Option<u64>,
    want_grad: bool,
) -> Result<(T, Option<ModelParams<T>>), TrainError> {
    check_lengths(batch, n_in)?;
    if batch.is_empty() {
        return Ok((T::zero(), want_grad.then(|| ModelParams::zeros(&params.config))));
    }
    // chunks of equal-length sequences, in input order
    let mut chunks: Vec<Vec<&IncrementSequence<T>>> = Vec::new();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| batch[i].len());
    for &i in &order {
        match chunks.last_mut() {
            Some(c) if c.len() < CHUNK && c[0].len() == batch[i].len() => c.push(&batch[i]),
            _ => chunks.push(vec![&batch[i]]),
        }
    }
    let weight = T::one() / T::from_usize_lossy(batch.len());
    let results: Vec<_> = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, c)| group_loss(params, c, n_in, weight, dropout_seed.map(|s| derive_seed(s, STREAM_DROPOUT, ci as u64)), want_grad))
        .collect();
    let mut loss = T::zero();
    let mut grads = want_grad.then(|| ModelParams::zeros(&params.config));
    for r in results {
        let (l, g) = r?;
        loss += l;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.add_scaled(T::one(), &g);
        }
    }
    Ok((loss * weight, grads))
}

/// Loss with dropout disabled.
pub fn loss<T: Scalar>(params: &ModelParams<T>, batch: &[IncrementSequence<T>], n_in: usize) -> Result<T, TrainError> {
    batch_loss(params, batch, n_in, None, false).map(|(l, _)| l)
}

/// Loss and its exact gradient. With `dropout_seed` the same dropout masks
/// are used for both.
pub fn loss_and_gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[IncrementSequence<T>],
    n_in: usize,
    dropout_seed: Option<u64>,
) -> Result<(T, ModelParams<T>), TrainError> {
    batch_loss(params, batch, n_in, dropout_seed, true).map(|(l, g)| (l, g.expect("gradient requested")))
}

pub fn gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[IncrementSequence<T>],
    n_in: usize,
    dropout_seed: Option<u64>,
) -> Result<ModelParams<T>, TrainError> {
    loss_and_gradients(params, batch, n_in, dropout_seed).map(|(_, g)| g)
}

/// FNV-1a 64 of the little-endian `f64` image of every tensor, in table order.
pub fn parameter_checksum<T: Scalar>(params: &ModelParams<T>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in params.tensors() {
        for x in t.data {
            for byte in x.to_f64_lossy().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    format!("{h:016x}")
}

/// Seeded 90/10-style split: `(train indices, validation indices)`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT, 0)));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Trains a fresh model. `observer` sees each epoch record as it completes.
pub fn train_with_observer<T: Scalar>(
    dataset: &[IncrementSequence<T>],
    test_set: Option<&[IncrementSequence<T>]>,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(ModelParams<T>, TrainReport), TrainError> {
    model_cfg.validate()?;
    if dataset.len() < cfg.batch_size {
        return Err(TrainError::DatasetTooSmall {
            size: dataset.len(),
            batch: cfg.batch_size,
        });
    }
    check_lengths(dataset, cfg.n_in)?;
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.val_fraction, cfg.seed);
    let val: Vec<IncrementSequence<T>> = val_idx.iter().map(|&i| dataset[i].clone()).collect();

    let mut params = ModelParams::<T>::init(model_cfg, derive_seed(cfg.seed, STREAM_INIT, 0));
    let mut state = AdamState::new(model_cfg);
    let mut records = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<IncrementSequence<T>> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let dropout_seed = (model_cfg.dropout > 0.0).then(|| derive_seed(cfg.seed, STREAM_DROPOUT, step));
            let (l, g) = loss_and_gradients(&params, &batch, cfg.n_in, dropout_seed)?;
            adamw_step(&mut params, &g, &mut state, cfg);
            epoch_loss += l.to_f64_lossy();
            batches += 1;
            step += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = if val.is_empty() { f64::NAN } else { loss(&params, &val, cfg.n_in)?.to_f64_lossy() };
        let test_loss = match test_set {
            Some(t) if !t.is_empty() => Some(loss(&params, t, cfg.n_in)?.to_f64_lossy()),
            _ => None,
        };
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            test_loss,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        records.push(record);
    }
    let report = TrainReport {
        epochs: records,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        weight_decay: cfg.weight_decay,
        parameter_checksum: parameter_checksum(&params),
    };
    Ok((params, report))
}

pub fn train<T: Scalar>(
    dataset: &[IncrementSequence<T>],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(ModelParams<T>, TrainReport), TrainError> {
    train_with_observer(dataset, None, cfg, model_cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            max_position: 16,
            layer_norm_eps: 1e-5,
        }
    }

    fn seq(v: &[f64]) -> IncrementSequence<f64> {
        IncrementSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn adamw_single_step_on_a_bias() {
        let cfg = TrainConfig::default();
        let mut p = ModelParams::<f64>::zeros(&tiny());
        let mut g = ModelParams::<f64>::zeros(&tiny());
        g.b_o[0] = 1.0;
        let mut st = AdamState::new(&tiny());
        adamw_step(&mut p, &g, &mut st, &cfg);
        // m̂ = v̂ = 1 after bias correction
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p.b_o[0] - expected).abs() < 1e-18);
        assert!((p.b_o[0] + 0.000_999_999).abs() < 1e-9);
    }

    #[test]
    fn adamw_zero_gradient() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = ModelParams::<f64>::init(&tiny(), 3);
        let before = p.clone();
        let g = ModelParams::zeros(&tiny());
        let mut st = AdamState::new(&tiny());
        adamw_step(&mut p, &g, &mut st, &cfg);
        assert_eq!(p, before);

        let cfg = TrainConfig::default();
        adamw_step(&mut p, &g, &mut st, &cfg);
        let factor = 1.0 - 1e-3 * 0.01;
        assert_eq!(p.layers[0].w_q[[0, 0]], before.layers[0].w_q[[0, 0]] * factor);
        assert_eq!(p.layers[0].ln1_gain, before.layers[0].ln1_gain);
        assert_eq!(p.layers[0].b_1, before.layers[0].b_1);
    }

    #[test]
    fn loss_of_a_constant_model() {
        let mut p = ModelParams::<f64>::init(&tiny(), 1);
        p.w_o.fill(0.0);
        p.b_o[0] = 0.0;
        let s = seq(&[0.5, 0.3, 1.0, 1.0, 1.0]);
        assert!((loss(&p, std::slice::from_ref(&s), 2).unwrap() - 1.0).abs() < 1e-15);
        p.b_o[0] = 1.0;
        assert_eq!(loss(&p, &[s], 2).unwrap(), 0.0);
    }

    #[test]
    fn duplicated_batch_has_the_same_gradient() {
        let p = ModelParams::<f64>::init(&tiny(), 2);
        let s = seq(&[0.5, 0.3, 0.7, 0.9, 1.4, 0.2]);
        let g1 = gradients(&p, std::slice::from_ref(&s), 2, None).unwrap();
        let g2 = gradients(&p, &[s.clone(), s], 2, None).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((x - y).abs() < 1e-14 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn too_short_sequences_are_rejected() {
        let p = ModelParams::<f64>::init(&tiny(), 2);
        assert!(matches!(
            loss(&p, &[seq(&[1.0, 2.0])], 2),
            Err(TrainError::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn split_is_a_partition() {
        let (a, b) = split_indices(100, 0.1, 5);
        assert_eq!(a.len(), 90);
        assert_eq!(b.len(), 10);
        let mut all: Vec<_> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.1, 5), (a, b));
    }
}

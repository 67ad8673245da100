//! Coefficient and observable error curves for extrapolation methods, and
//! the transformer-versus-baseline comparison report.

use std::io::{self, Write};

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{baseline_forecast, BaselineError, FitForm};
use crate::krylov::{build_tridiagonal, observables, Forecast, LanczosSequence};
use crate::scalar::Scalar;
use crate::trainer::parameter_checksum;
use crate::transformer::{extrapolate_coefficients, MaskPolicy, ModelParams, TransformerError};

/// Which side of the train/test divide a dataset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction {sample} differs from the truth at prefix index {index}")]
    PrefixMismatch { sample: usize, index: usize },
    #[error("{truth} truth sequences but {pred} predictions")]
    CountMismatch { truth: usize, pred: usize },
    #[error("sample {sample}: truth has length {truth}, prediction {pred}")]
    LengthMismatch { sample: usize, truth: usize, pred: usize },
    #[error("no sequences to evaluate")]
    Empty,
    #[error("dataset `{0}` is tagged as training data")]
    DataLeak(String),
    #[error("prefix length {n_in} leaves no extrapolated index below {len}")]
    NothingToExtrapolate { n_in: usize, len: usize },
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Model(#[from] TransformerError),
}

/// Per-index error curve over the extrapolated indices `n_in + 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseCurve<T> {
    pub indices: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> RmseCurve<T> {
    pub fn at(&self, n: usize) -> Option<T> {
        self.indices.iter().position(|&i| i == n).map(|k| self.values[k])
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::from_usize_lossy(self.values.len().max(1))
    }
}

impl<T> AsRef<[T]> for Forecast<T>
where
    T: Scalar,
{
    fn as_ref(&self) -> &[T] {
        self.values()
    }
}

impl<T: Scalar> AsRef<[T]> for LanczosSequence<T> {
    fn as_ref(&self) -> &[T] {
        self.values()
    }
}

fn check_pairs<T: Scalar, P: AsRef<[T]>>(truth: &[LanczosSequence<T>], pred: &[P], n_in: usize) -> Result<usize, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::CountMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    let first = truth.first().ok_or(EvalError::Empty)?;
    let len = first.len();
    for (i, (t, p)) in truth.iter().zip(pred).enumerate() {
        let p = p.as_ref();
        if t.len() != len || p.len() != len {
            return Err(EvalError::LengthMismatch {
                sample: i,
                truth: t.len(),
                pred: p.len(),
            });
        }
        if let Some(k) = (0..n_in.min(len)).find(|&k| t.values()[k] != p[k]) {
            return Err(EvalError::PrefixMismatch { sample: i, index: k + 1 });
        }
    }
    Ok(len)
}

/// `RMSE(n) = sqrt(mean_i (b_n^(i) - b̂_n^(i))²)` for `n = n_in + 1..=T`.
pub fn rmse_per_index<T: Scalar, P: AsRef<[T]>>(truth: &[LanczosSequence<T>], pred: &[P], n_in: usize) -> Result<RmseCurve<T>, EvalError> {
    let len = check_pairs(truth, pred, n_in)?;
    let count = T::from_usize_lossy(truth.len());
    let indices: Vec<usize> = (n_in + 1..=len).collect();
    let values = indices
        .iter()
        .map(|&n| {
            let sq: T = truth
                .iter()
                .zip(pred)
                .map(|(t, p)| {
                    let e = t.b(n) - p.as_ref()[n - 1];
                    e * e
                })
                .sum();
            (sq / count).sqrt()
        })
        .collect();
    Ok(RmseCurve { indices, values })
}

/// `|ΔK(t)|` and `|ΔC(t)|`: root-mean-square differences of the observables
/// reconstructed from truth and prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableErrors<T> {
    pub times: Vec<T>,
    pub complexity: Vec<T>,
    pub autocorrelation: Vec<T>,
    /// Predictions that needed clamping before a chain could be built.
    pub clamped_sequences: usize,
}

/// Observable errors. Predicted coefficients that are not positive are
/// clamped (see [`Forecast::clamped`]) and counted.
pub fn observable_errors<T: Scalar>(truth: &[LanczosSequence<T>], pred: &[Forecast<T>], times: &[T]) -> Result<ObservableErrors<T>, EvalError> {
    check_pairs(truth, pred, 0)?;
    let per_sample: Vec<(Vec<T>, Vec<T>, bool)> = truth
        .par_iter()
        .zip(pred.par_iter())
        .map(|(t, p)| {
            let a = observables(&build_tridiagonal(t), times);
            let b = observables(&build_tridiagonal(&p.clamped()), times);
            let dk = a.complexity.iter().zip(&b.complexity).map(|(x, y)| (*x - *y) * (*x - *y)).collect();
            let dc = a
                .autocorrelation
                .iter()
                .zip(&b.autocorrelation)
                .map(|(x, y): (&Complex<T>, &Complex<T>)| (x - y).norm_sqr())
                .collect();
            (dk, dc, !p.nonpositive().is_empty())
        })
        .collect();
    let count = T::from_usize_lossy(truth.len());
    let mut k = vec![T::zero(); times.len()];
    let mut c = vec![T::zero(); times.len()];
    let mut clamped = 0;
    for (dk, dc, was_clamped) in per_sample {
        k.iter_mut().zip(dk).for_each(|(a, x)| *a += x);
        c.iter_mut().zip(dc).for_each(|(a, x)| *a += x);
        clamped += was_clamped as usize;
    }
    Ok(ObservableErrors {
        times: times.to_vec(),
        complexity: k.into_iter().map(|x| (x / count).sqrt()).collect(),
        autocorrelation: c.into_iter().map(|x| (x / count).sqrt()).collect(),
        clamped_sequences: clamped,
    })
}

/// A labelled evaluation set.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a, T> {
    pub id: &'a str,
    pub split: Split,
    /// Lattice size of the generating model, if any.
    pub system_size: Option<usize>,
    pub sequences: &'a [LanczosSequence<T>],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub dataset_id: String,
    pub model_checksum: String,
    pub n_test: usize,
    pub n_in: usize,
    pub target_len: usize,
    pub fit_form: FitForm,
    pub mask: MaskPolicy,
    pub train_system_size: Option<usize>,
    pub eval_system_size: Option<usize>,
    pub zero_shot: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<T> {
    pub metadata: EvalMetadata,
    pub transformer_rmse: RmseCurve<T>,
    pub baseline_rmse: RmseCurve<T>,
    /// Transformer RMSE over baseline RMSE, index by index.
    pub ratio: RmseCurve<T>,
    pub transformer_observables: ObservableErrors<T>,
    pub baseline_observables: ObservableErrors<T>,
}

impl<T: Scalar> EvalReport<T> {
    /// Share of extrapolated indices where the transformer is strictly better.
    pub fn fraction_transformer_better(&self) -> f64 {
        let wins = self
            .transformer_rmse
            .values
            .iter()
            .zip(&self.baseline_rmse.values)
            .filter(|(a, b)| a < b)
            .count();
        wins as f64 / self.transformer_rmse.values.len().max(1) as f64
    }

    /// Writes `method,n,rmse` rows for both methods and their ratio.
    pub fn write_rmse_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "method,n,rmse")?;
        for (name, curve) in [("transformer", &self.transformer_rmse), ("baseline", &self.baseline_rmse), ("ratio", &self.ratio)] {
            for (n, v) in curve.indices.iter().zip(&curve.values) {
                writeln!(w, "{name},{n},{v:e}")?;
            }
        }
        Ok(())
    }

    /// Writes `method,t,abs_delta_k,abs_delta_c` rows.
    pub fn write_observables_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "method,t,abs_delta_k,abs_delta_c")?;
        for (name, o) in [("transformer", &self.transformer_observables), ("baseline", &self.baseline_observables)] {
            for ((t, k), c) in o.times.iter().zip(&o.complexity).zip(&o.autocorrelation) {
                writeln!(w, "{name},{t},{k:e},{c:e}")?;
            }
        }
        Ok(())
    }
}

/// Baseline forecasts for every sequence of a set.
pub fn baseline_forecasts<T: Scalar>(sequences: &[LanczosSequence<T>], n_in: usize, form: FitForm) -> Result<Vec<Forecast<T>>, EvalError> {
    sequences
        .iter()
        .map(|b| Ok(baseline_forecast(b, n_in, b.len(), form)?.1))
        .collect()
}

/// Transformer forecasts for every sequence of a set, batched.
pub fn transformer_forecasts<T: Scalar>(
    params: &ModelParams<T>,
    sequences: &[LanczosSequence<T>],
    n_in: usize,
    mask: MaskPolicy,
) -> Result<Vec<Forecast<T>>, EvalError> {
    let len = sequences.first().ok_or(EvalError::Empty)?.len();
    let prefixes: Vec<_> = sequences.iter().map(|b| b.prefix(n_in)).collect();
    Ok(extrapolate_coefficients(params, &prefixes, len, mask)?)
}

/// Runs both methods on an unseen test set.
pub fn compare_methods<T: Scalar>(
    test: EvalSet<'_, T>,
    params: &ModelParams<T>,
    train_system_size: Option<usize>,
    fit_form: FitForm,
    n_in: usize,
    times: &[T],
    mask: MaskPolicy,
) -> Result<EvalReport<T>, EvalError> {
    if test.split != Split::Test {
        return Err(EvalError::DataLeak(test.id.to_string()));
    }
    let truth = test.sequences;
    let len = truth.first().ok_or(EvalError::Empty)?.len();
    if n_in >= len {
        return Err(EvalError::NothingToExtrapolate { n_in, len });
    }
    let model = transformer_forecasts(params, truth, n_in, mask)?;
    let base = baseline_forecasts(truth, n_in, fit_form)?;
    let transformer_rmse = rmse_per_index(truth, &model, n_in)?;
    let baseline_rmse = rmse_per_index(truth, &base, n_in)?;
    let ratio = RmseCurve {
        indices: transformer_rmse.indices.clone(),
        values: transformer_rmse
            .values
            .iter()
            .zip(&baseline_rmse.values)
            .map(|(&a, &b)| if a == b { T::one() } else { a / b })
            .collect(),
    };
    let zero_shot = matches!((train_system_size, test.system_size), (Some(a), Some(b)) if a != b);
    Ok(EvalReport {
        metadata: EvalMetadata {
            dataset_id: test.id.to_string(),
            model_checksum: parameter_checksum(params),
            n_test: truth.len(),
            n_in,
            target_len: len,
            fit_form,
            mask,
            train_system_size,
            eval_system_size: test.system_size,
            zero_shot,
        },
        transformer_observables: observable_errors(truth, &model, times)?,
        baseline_observables: observable_errors(truth, &base, times)?,
        transformer_rmse,
        baseline_rmse,
        ratio,
    })
}

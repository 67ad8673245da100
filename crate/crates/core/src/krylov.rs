//! Lanczos sequences and the Krylov-chain picture of operator dynamics.
//!
//! A sequence `b_1..b_T` defines a tight-binding chain on sites `0..=T` with
//! hopping `b_n` between sites `n - 1` and `n`. The operator wavefunction
//! obeys `-i dφ_n/dt = b_n φ_{n-1} + b_{n+1} φ_{n+1}` with `φ_n(0) = δ_{n0}`;
//! the chain is cut with a hard wall after the last known coefficient.

use ndarray::Array2;
use num_complex::Complex;
use thiserror::Error;

use crate::linalg::{symmetric_tridiagonal_eigen, TridiagonalEigen};
use crate::scalar::Scalar;

/// Longest sequence for which the moment recursion is expected to round-trip
/// to 1e-6 relative accuracy. The recursion loses digits geometrically.
pub const MOMENT_RECURSION_LIMIT: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KrylovError {
    #[error("a Lanczos sequence needs at least one coefficient")]
    Empty,
    #[error("coefficient b_{index} = {value} is not strictly positive")]
    NonPositiveCoefficient { index: usize, value: f64 },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("moment recursion produced b_{index}^2 = {value}")]
    NonPositiveSquare { index: usize, value: f64 },
    #[error("moment sequence must start with mu_0 = 1, got {0}")]
    Unnormalized(f64),
}

/// Positive hopping amplitudes `b_1..b_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct LanczosSequence<T>(Vec<T>);

impl<T: Scalar> LanczosSequence<T> {
    pub fn new(values: Vec<T>) -> Result<Self, KrylovError> {
        if values.is_empty() {
            return Err(KrylovError::Empty);
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(KrylovError::NonFinite {
                    index: i + 1,
                    value: v.to_f64_lossy(),
                });
            }
            if v <= T::zero() {
                return Err(KrylovError::NonPositiveCoefficient {
                    index: i + 1,
                    value: v.to_f64_lossy(),
                });
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `b_n` with the 1-based index used throughout the literature.
    pub fn b(&self, n: usize) -> T {
        self.0[n - 1]
    }

    /// First `n` coefficients. Panics when `n` is zero or exceeds the length.
    pub fn prefix(&self, n: usize) -> Self {
        assert!(n >= 1 && n <= self.len(), "prefix length {n} out of range");
        Self(self.0[..n].to_vec())
    }

    pub fn to_increments(&self) -> IncrementSequence<T> {
        to_increments(self)
    }
}

/// Differences `Δb_n = b_n - b_{n-1}` with `b_0 = 0`.
///
/// Positivity of the partial sums is checked when the sequence is turned back
/// into coefficients, since model forecasts are free to violate it.
#[derive(Clone, Debug, PartialEq)]
pub struct IncrementSequence<T>(Vec<T>);

impl<T: Scalar> IncrementSequence<T> {
    pub fn new(values: Vec<T>) -> Result<Self, KrylovError> {
        if values.is_empty() {
            return Err(KrylovError::Empty);
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(KrylovError::NonFinite {
                index: i + 1,
                value: v.to_f64_lossy(),
            });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn prefix(&self, n: usize) -> Self {
        assert!(n >= 1 && n <= self.len(), "prefix length {n} out of range");
        Self(self.0[..n].to_vec())
    }
}

pub fn to_increments<T: Scalar>(b: &LanczosSequence<T>) -> IncrementSequence<T> {
    let mut prev = T::zero();
    let diffs = b
        .values()
        .iter()
        .map(|&x| {
            let d = x - prev;
            prev = x;
            d
        })
        .collect();
    IncrementSequence(diffs)
}

/// Cumulative sum. Fails on the first partial sum that is not strictly positive.
pub fn from_increments<T: Scalar>(d: &IncrementSequence<T>) -> Result<LanczosSequence<T>, KrylovError> {
    let mut acc = T::zero();
    let mut out = Vec::with_capacity(d.len());
    for (i, &x) in d.values().iter().enumerate() {
        acc += x;
        if acc <= T::zero() {
            return Err(KrylovError::NonPositiveCoefficient {
                index: i + 1,
                value: acc.to_f64_lossy(),
            });
        }
        out.push(acc);
    }
    Ok(LanczosSequence(out))
}

/// Smallest hopping substituted for a non-positive forecast coefficient when
/// a chain has to be built from it.
pub const CLAMP_FLOOR: f64 = 1e-8;

/// An extrapolated coefficient sequence: the first `prefix_len` entries are
/// the exact inputs, the rest are predictions and may be non-positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast<T> {
    values: Vec<T>,
    prefix_len: usize,
}

impl<T: Scalar> Forecast<T> {
    pub fn new(values: Vec<T>, prefix_len: usize) -> Self {
        assert!(prefix_len <= values.len(), "prefix longer than forecast");
        Self { values, prefix_len }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    /// 1-based indices whose value is not a valid hopping (`<= 0` or non-finite).
    pub fn nonpositive(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| !(**v > T::zero()) || !v.is_finite())
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// The forecast as a validated sequence, failing on the first bad value.
    pub fn sequence(&self) -> Result<LanczosSequence<T>, KrylovError> {
        LanczosSequence::new(self.values.clone())
    }

    /// Every invalid entry replaced by [`CLAMP_FLOOR`], for chain reconstruction.
    pub fn clamped(&self) -> LanczosSequence<T> {
        let floor = T::lit(CLAMP_FLOOR);
        let values = self
            .values
            .iter()
            .map(|&v| if v > T::zero() && v.is_finite() { v } else { floor })
            .collect();
        LanczosSequence(values)
    }
}

/// Zero-diagonal symmetric tridiagonal Liouvillian in the Krylov basis.
#[derive(Clone, Debug, PartialEq)]
pub struct TridiagonalLiouvillian<T> {
    offdiagonal: Vec<T>,
}

impl<T: Scalar> TridiagonalLiouvillian<T> {
    /// Number of chain sites, `T + 1`.
    pub fn dimension(&self) -> usize {
        self.offdiagonal.len() + 1
    }

    pub fn offdiagonal(&self) -> &[T] {
        &self.offdiagonal
    }

    pub fn entry(&self, i: usize, j: usize) -> T {
        if i + 1 == j {
            self.offdiagonal[i]
        } else if j + 1 == i {
            self.offdiagonal[j]
        } else {
            T::zero()
        }
    }

    pub fn to_dense(&self) -> Array2<T> {
        let n = self.dimension();
        Array2::from_shape_fn((n, n), |(i, j)| self.entry(i, j))
    }

    /// `L v` for a real vector on the chain.
    pub fn apply(&self, v: &[T]) -> Vec<T> {
        let n = self.dimension();
        assert_eq!(v.len(), n);
        let b = &self.offdiagonal;
        (0..n)
            .map(|i| {
                let mut acc = T::zero();
                if i > 0 {
                    acc += b[i - 1] * v[i - 1];
                }
                if i + 1 < n {
                    acc += b[i] * v[i + 1];
                }
                acc
            })
            .collect()
    }
}

pub fn build_tridiagonal<T: Scalar>(b: &LanczosSequence<T>) -> TridiagonalLiouvillian<T> {
    TridiagonalLiouvillian {
        offdiagonal: b.values().to_vec(),
    }
}

/// Chain amplitudes `φ_0..φ_T` at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct KrylovWavefunction<T> {
    pub amplitudes: Vec<Complex<T>>,
    pub time: T,
}

impl<T: Scalar> KrylovWavefunction<T> {
    /// The initial condition `φ_n = δ_{n0}`.
    pub fn origin(sites: usize) -> Self {
        let mut amplitudes = vec![Complex::new(T::zero(), T::zero()); sites];
        amplitudes[0] = Complex::new(T::one(), T::zero());
        Self {
            amplitudes,
            time: T::zero(),
        }
    }

    pub fn norm_squared(&self) -> T {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }
}

pub fn krylov_complexity<T: Scalar>(phi: &KrylovWavefunction<T>) -> T {
    phi.amplitudes
        .iter()
        .enumerate()
        .map(|(n, a)| T::from_usize_lossy(n) * a.norm_sqr())
        .sum()
}

/// `C(t) = φ_0(t)`. The imaginary part vanishes analytically for a
/// zero-diagonal chain; it is returned as computed.
pub fn autocorrelation<T: Scalar>(phi: &KrylovWavefunction<T>) -> Complex<T> {
    phi.amplitudes[0]
}

/// Spectral propagator `exp(i L t) e_0` of one chain, reusable across times.
#[derive(Clone, Debug)]
pub struct KrylovPropagator<T> {
    eigen: TridiagonalEigen<T>,
}

impl<T: Scalar> KrylovPropagator<T> {
    pub fn new(l: &TridiagonalLiouvillian<T>) -> Self {
        let diag = vec![T::zero(); l.dimension()];
        Self {
            eigen: symmetric_tridiagonal_eigen(&diag, l.offdiagonal()),
        }
    }

    pub fn sites(&self) -> usize {
        self.eigen.eigenvalues.len()
    }

    pub fn evolve(&self, t: T) -> KrylovWavefunction<T> {
        let n = self.sites();
        if t == T::zero() {
            return KrylovWavefunction::origin(n);
        }
        let v = &self.eigen.eigenvectors;
        // c_k = exp(i λ_k t) (V^T e_0)_k
        let weights: Vec<Complex<T>> = (0..n)
            .map(|k| {
                let phase = self.eigen.eigenvalues[k] * t;
                Complex::new(phase.cos(), phase.sin()) * v[[0, k]]
            })
            .collect();
        let amplitudes = (0..n)
            .map(|i| {
                let mut acc = Complex::new(T::zero(), T::zero());
                for (k, w) in weights.iter().enumerate() {
                    acc += w * v[[i, k]];
                }
                acc
            })
            .collect();
        KrylovWavefunction { amplitudes, time: t }
    }
}

pub fn evolve<T: Scalar>(l: &TridiagonalLiouvillian<T>, t: T) -> KrylovWavefunction<T> {
    KrylovPropagator::new(l).evolve(t)
}

/// `K(t)` and `C(t)` sampled on a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservableSeries<T> {
    pub times: Vec<T>,
    pub complexity: Vec<T>,
    pub autocorrelation: Vec<Complex<T>>,
}

pub fn observables<T: Scalar>(l: &TridiagonalLiouvillian<T>, times: &[T]) -> ObservableSeries<T> {
    let propagator = KrylovPropagator::new(l);
    let mut complexity = Vec::with_capacity(times.len());
    let mut autocorr = Vec::with_capacity(times.len());
    for &t in times {
        let phi = propagator.evolve(t);
        complexity.push(krylov_complexity(&phi));
        autocorr.push(autocorrelation(&phi));
    }
    ObservableSeries {
        times: times.to_vec(),
        complexity,
        autocorrelation: autocorr,
    }
}

/// Uniform grid of `points` times on `[0, t_max]`.
pub fn time_grid<T: Scalar>(t_max: T, points: usize) -> Vec<T> {
    match points {
        0 => Vec::new(),
        1 => vec![T::zero()],
        _ => {
            let step = t_max / T::from_usize_lossy(points - 1);
            (0..points).map(|i| step * T::from_usize_lossy(i)).collect()
        }
    }
}

/// Even spectral moments `μ_0, μ_2, .., μ_{2M}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSequence<T>(Vec<T>);

impl<T: Scalar> MomentSequence<T> {
    pub fn new(values: Vec<T>) -> Result<Self, KrylovError> {
        let first = *values.first().ok_or(KrylovError::Empty)?;
        if (first - T::one()).abs() > T::lit(1e-12) {
            return Err(KrylovError::Unnormalized(first.to_f64_lossy()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    /// `M`, the highest moment index divided by two.
    pub fn order(&self) -> usize {
        self.0.len() - 1
    }
}

/// `μ_{2k} = (e_0, L^{2k} e_0) = |L^k e_0|²` for `k = 0..=M`.
pub fn moments_from_tridiagonal<T: Scalar>(l: &TridiagonalLiouvillian<T>, order: usize) -> MomentSequence<T> {
    let mut v = vec![T::zero(); l.dimension()];
    v[0] = T::one();
    let mut out = Vec::with_capacity(order + 1);
    out.push(T::one());
    for _ in 0..order {
        v = l.apply(&v);
        out.push(v.iter().map(|&x| x * x).sum());
    }
    MomentSequence(out)
}

/// Moment-to-Lanczos recursion
/// `M_k^(n) = M_k^(n-1) / b_{n-1}^2 - M_{k-1}^(n-2) / b_{n-2}^2`,
/// `M_k^(0) = μ_{2k}`, `M_k^(-1) = 0`, `b_{-1} = b_0 = 1`, `b_n^2 = M_n^(n)`.
///
/// Stops early, returning the coefficients found so far, when `b_n^2`
/// vanishes to within rounding of the two subtracted terms: the moments then
/// come from a finite chain. A clearly negative square is an error.
pub fn moments_to_lanczos<T: Scalar>(mu: &MomentSequence<T>) -> Result<LanczosSequence<T>, KrylovError> {
    let order = mu.order();
    if order == 0 {
        return Err(KrylovError::Empty);
    }
    let rel_tol = T::lit(1e-10);
    // level n-2 and n-1 of M_k, indexed by k
    let mut prev2 = vec![T::zero(); order + 1];
    let mut prev1: Vec<T> = mu.values().to_vec();
    let mut bsq_prev2 = T::one();
    let mut bsq_prev1 = T::one();
    let mut out = Vec::with_capacity(order);

    for n in 1..=order {
        let mut cur = vec![T::zero(); order + 1];
        let mut scale = T::zero();
        for k in n..=order {
            let first = prev1[k] / bsq_prev1;
            let second = prev2[k - 1] / bsq_prev2;
            cur[k] = first - second;
            if k == n {
                scale = first.abs() + second.abs();
            }
        }
        let bsq = cur[n];
        if !bsq.is_finite() {
            return Err(KrylovError::NonFinite {
                index: n,
                value: bsq.to_f64_lossy(),
            });
        }
        if bsq.abs() <= rel_tol * scale {
            if n == 1 {
                return Err(KrylovError::NonPositiveSquare {
                    index: n,
                    value: bsq.to_f64_lossy(),
                });
            }
            break;
        }
        if bsq < T::zero() {
            return Err(KrylovError::NonPositiveSquare {
                index: n,
                value: bsq.to_f64_lossy(),
            });
        }
        out.push(bsq.sqrt());
        prev2 = prev1;
        prev1 = cur;
        bsq_prev2 = bsq_prev1;
        bsq_prev1 = bsq;
    }
    LanczosSequence::new(out)
}

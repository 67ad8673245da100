//! Lanczos recursion with full reorthogonalization over an abstract operator
//! space. The quantum (commutator) and classical (Poisson bracket) generators
//! both plug in through [`KrylovSpace`].

use ndarray::Array2;
use num_complex::Complex;
use thiserror::Error;

use crate::krylov::LanczosSequence;
use crate::scalar::Scalar;

/// Whether the Liouvillian is self-adjoint or anti-self-adjoint under the
/// space's inner product. Fixes the sign of the three-term step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Symmetry {
    Hermitian,
    AntiHermitian,
}

/// An operator Hilbert space together with its Liouvillian.
pub trait KrylovSpace<T: Scalar> {
    type Vector: Clone;

    /// `𝓛 v`.
    fn apply(&self, v: &Self::Vector) -> Self::Vector;

    /// `(a|b)`, antilinear in `a`.
    fn inner(&self, a: &Self::Vector, b: &Self::Vector) -> Complex<T>;

    /// `y += alpha x`.
    fn axpy(&self, alpha: Complex<T>, x: &Self::Vector, y: &mut Self::Vector);

    fn scale(&self, v: &mut Self::Vector, factor: T);

    fn symmetry(&self) -> Symmetry {
        Symmetry::Hermitian
    }

    fn norm(&self, v: &Self::Vector) -> T {
        self.inner(v, v).re.max(T::zero()).sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LanczosOptions<T> {
    /// `b_n` below this is treated as an exhausted Krylov space.
    pub breakdown_threshold: T,
    /// Classical Gram-Schmidt passes against every stored basis vector.
    pub reorthogonalization_passes: usize,
}

impl<T: Scalar> Default for LanczosOptions<T> {
    fn default() -> Self {
        Self {
            breakdown_threshold: T::lit(1e-10),
            reorthogonalization_passes: 2,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LanczosError {
    #[error("initial operator has norm^2 {0}, expected 1")]
    Unnormalized(f64),
    #[error("at least one Lanczos step is required")]
    NoSteps,
    /// The Krylov space closed before `T` steps. `partial` holds `b_1..b_{step-1}`.
    #[error("Lanczos breakdown at step {step}: b = {value:e}")]
    Breakdown {
        step: usize,
        value: f64,
        partial: Vec<f64>,
    },
}

/// Coefficients plus the orthonormal Krylov basis `O_0..O_T`.
#[derive(Clone, Debug)]
pub struct LanczosRun<T, V> {
    pub coefficients: LanczosSequence<T>,
    pub basis: Vec<V>,
}

/// Runs `steps` Lanczos iterations from a unit-norm `initial` operator:
///
/// ```text
/// A_n = 𝓛 O_{n-1} ∓ b_{n-1} O_{n-2},   b_n = sqrt((A_n|A_n)),   O_n = A_n / b_n
/// ```
///
/// After the three-term step each `A_n` is re-projected against every
/// stored basis vector (`reorthogonalization_passes` times).
pub fn lanczos<T, S>(
    space: &S,
    initial: S::Vector,
    steps: usize,
    options: &LanczosOptions<T>,
) -> Result<LanczosRun<T, S::Vector>, LanczosError>
where
    T: Scalar,
    S: KrylovSpace<T>,
{
    if steps == 0 {
        return Err(LanczosError::NoSteps);
    }
    let norm2 = space.inner(&initial, &initial).re;
    if (norm2 - T::one()).abs() > T::lit(1e-10) {
        return Err(LanczosError::Unnormalized(norm2.to_f64_lossy()));
    }
    let step_sign = match space.symmetry() {
        Symmetry::Hermitian => -T::one(),
        Symmetry::AntiHermitian => T::one(),
    };

    let mut basis = Vec::with_capacity(steps + 1);
    basis.push(initial);
    let mut b: Vec<T> = Vec::with_capacity(steps);

    for n in 1..=steps {
        let mut a = space.apply(&basis[n - 1]);
        if n >= 2 {
            space.axpy(Complex::new(step_sign * b[n - 2], T::zero()), &basis[n - 2], &mut a);
        }
        for _ in 0..options.reorthogonalization_passes {
            for o in &basis {
                let overlap = space.inner(o, &a);
                space.axpy(-overlap, o, &mut a);
            }
        }
        let bn = space.norm(&a);
        if !(bn >= options.breakdown_threshold) {
            return Err(LanczosError::Breakdown {
                step: n,
                value: bn.to_f64_lossy(),
                partial: b.iter().map(|x| x.to_f64_lossy()).collect(),
            });
        }
        space.scale(&mut a, T::one() / bn);
        b.push(bn);
        basis.push(a);
    }

    let coefficients = LanczosSequence::new(b).expect("coefficients above breakdown threshold are positive");
    Ok(LanczosRun { coefficients, basis })
}

/// `max_{ij} |(O_i|O_j) - δ_ij|`.
pub fn orthonormality_defect<T, S>(space: &S, basis: &[S::Vector]) -> T
where
    T: Scalar,
    S: KrylovSpace<T>,
{
    let mut worst = T::zero();
    for (i, a) in basis.iter().enumerate() {
        for (j, b) in basis.iter().enumerate().skip(i) {
            let mut g = space.inner(a, b);
            if i == j {
                g -= Complex::new(T::one(), T::zero());
            }
            worst = worst.max(g.norm());
        }
    }
    worst
}

/// Matrix elements `(O_m|𝓛|O_n)` of the Liouvillian projected on the basis.
pub fn projected_liouvillian<T, S>(space: &S, basis: &[S::Vector]) -> Array2<Complex<T>>
where
    T: Scalar,
    S: KrylovSpace<T>,
{
    let n = basis.len();
    let images: Vec<S::Vector> = basis.iter().map(|o| space.apply(o)).collect();
    Array2::from_shape_fn((n, n), |(m, k)| space.inner(&basis[m], &images[k]))
}

//! Transverse-field Ising chain with a longitudinal field, and the Lanczos
//! recursion for its commutator Liouvillian.
//!
//! `H = Σ_{i<L} J Z_i Z_{i+1} + Σ_i (g X_i + h Z_i)` with open boundaries.
//! Operators are dense `2^L × 2^L` matrices (a `4^L` dimensional vector
//! space) with the infinite-temperature product `(A|B) = Tr(A†B) / 2^L`.
//! Site 1 is the most significant bit of a basis index, and `Z|0> = +|0>`.

use ndarray::{Array2, Zip};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::krylov::LanczosSequence;
use crate::lanczos::{lanczos, KrylovSpace, LanczosError, LanczosOptions};
use crate::scalar::Scalar;

/// Largest chain handled by the dense backend unless raised explicitly.
pub const DEFAULT_MAX_SITES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantumError {
    #[error("{sites} sites exceed the dense limit of {max}")]
    DimensionTooLarge { sites: usize, max: usize },
    #[error("a chain needs at least one site")]
    NoSites,
    #[error("operator dimension {operator} does not match Hamiltonian dimension {hamiltonian}")]
    DimensionMismatch { operator: usize, hamiltonian: usize },
    #[error(transparent)]
    Lanczos(#[from] LanczosError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfimParams<T> {
    #[serde(rename = "L")]
    pub sites: usize,
    #[serde(rename = "J")]
    pub coupling: T,
    #[serde(rename = "g")]
    pub transverse: T,
    #[serde(rename = "h")]
    pub longitudinal: T,
}

/// Draws `g ~ U[1, 2]` and `h ~ U[0.1, 1]` with `J = 1`.
pub fn sample_tfim<T: Scalar>(seed: u64, sites: usize) -> TfimParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transverse = rng.random_range(T::lit(1.0)..=T::lit(2.0));
    let longitudinal = rng.random_range(T::lit(0.1)..=T::lit(1.0));
    TfimParams {
        sites,
        coupling: T::one(),
        transverse,
        longitudinal,
    }
}

/// Dense Hermitian Hamiltonian.
#[derive(Clone, Debug, PartialEq)]
pub struct Hamiltonian<T> {
    matrix: Array2<Complex<T>>,
}

impl<T: Scalar> Hamiltonian<T> {
    pub fn matrix(&self) -> &Array2<Complex<T>> {
        &self.matrix
    }

    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }
}

/// A flattened operator. Stored in its natural square shape.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorVector<T> {
    matrix: Array2<Complex<T>>,
}

impl<T: Scalar> OperatorVector<T> {
    pub fn from_matrix(matrix: Array2<Complex<T>>) -> Self {
        assert_eq!(matrix.nrows(), matrix.ncols(), "operators are square");
        Self {
            matrix: matrix.as_standard_layout().into_owned(),
        }
    }

    pub fn matrix(&self) -> &Array2<Complex<T>> {
        &self.matrix
    }

    /// Side length of the square matrix, `2^L`.
    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    /// Row-major flattening, length `4^L`.
    pub fn entries(&self) -> &[Complex<T>] {
        self.matrix.as_slice().expect("standard layout")
    }

    /// `Tr(A†B) / Tr(I)`.
    pub fn inner(&self, other: &Self) -> Complex<T> {
        let sum: Complex<T> = self
            .entries()
            .iter()
            .zip(other.entries())
            .map(|(a, b)| a.conj() * b)
            .sum();
        sum / T::from_usize_lossy(self.dimension())
    }

    /// Pauli `Z` on `site` (0-based) of an `sites`-site chain.
    pub fn pauli_z(site: usize, sites: usize) -> Self {
        let dim = 1usize << sites;
        let bit = sites - 1 - site;
        let mut m = Array2::zeros((dim, dim));
        for s in 0..dim {
            let sign = if (s >> bit) & 1 == 0 { T::one() } else { -T::one() };
            m[[s, s]] = Complex::new(sign, T::zero());
        }
        Self { matrix: m }
    }

    /// Pauli `X` on `site` (0-based).
    pub fn pauli_x(site: usize, sites: usize) -> Self {
        let dim = 1usize << sites;
        let bit = sites - 1 - site;
        let mut m = Array2::zeros((dim, dim));
        for s in 0..dim {
            m[[s ^ (1 << bit), s]] = Complex::new(T::one(), T::zero());
        }
        Self { matrix: m }
    }

    /// Pauli `Y` on `site` (0-based): `Y|0> = i|1>`, `Y|1> = -i|0>`.
    pub fn pauli_y(site: usize, sites: usize) -> Self {
        let dim = 1usize << sites;
        let bit = sites - 1 - site;
        let mut m = Array2::zeros((dim, dim));
        for s in 0..dim {
            let flipped = s ^ (1 << bit);
            let amp = if (s >> bit) & 1 == 0 { T::one() } else { -T::one() };
            m[[flipped, s]] = Complex::new(T::zero(), amp);
        }
        Self { matrix: m }
    }
}

pub fn build_hamiltonian<T: Scalar>(p: &TfimParams<T>) -> Result<Hamiltonian<T>, QuantumError> {
    build_hamiltonian_with_limit(p, DEFAULT_MAX_SITES)
}

pub fn build_hamiltonian_with_limit<T: Scalar>(
    p: &TfimParams<T>,
    max_sites: usize,
) -> Result<Hamiltonian<T>, QuantumError> {
    let l = p.sites;
    if l == 0 {
        return Err(QuantumError::NoSites);
    }
    if l > max_sites {
        return Err(QuantumError::DimensionTooLarge { sites: l, max: max_sites });
    }
    let dim = 1usize << l;
    let z = |s: usize, site: usize| -> T {
        if (s >> (l - 1 - site)) & 1 == 0 {
            T::one()
        } else {
            -T::one()
        }
    };
    let mut m = Array2::<Complex<T>>::zeros((dim, dim));
    for s in 0..dim {
        let mut diag = T::zero();
        for i in 0..l {
            diag += p.longitudinal * z(s, i);
            if i + 1 < l {
                diag += p.coupling * z(s, i) * z(s, i + 1);
            }
        }
        m[[s, s]] = Complex::new(diag, T::zero());
        for i in 0..l {
            let flipped = s ^ (1 << (l - 1 - i));
            m[[flipped, s]] += Complex::new(p.transverse, T::zero());
        }
    }
    Ok(Hamiltonian { matrix: m })
}

/// `[H, O] = HO - OH`.
pub fn liouvillian_apply<T: Scalar>(
    h: &Hamiltonian<T>,
    o: &OperatorVector<T>,
) -> Result<OperatorVector<T>, QuantumError> {
    if h.dimension() != o.dimension() {
        return Err(QuantumError::DimensionMismatch {
            operator: o.dimension(),
            hamiltonian: h.dimension(),
        });
    }
    Ok(commutator(h, o))
}

fn commutator<T: Scalar>(h: &Hamiltonian<T>, o: &OperatorVector<T>) -> OperatorVector<T> {
    let mut out = h.matrix.dot(&o.matrix);
    out -= &o.matrix.dot(&h.matrix);
    OperatorVector { matrix: out }
}

/// Operator space of a fixed Hamiltonian, for the generic recursion.
pub struct CommutatorSpace<'a, T> {
    hamiltonian: &'a Hamiltonian<T>,
}

impl<'a, T: Scalar> CommutatorSpace<'a, T> {
    pub fn new(hamiltonian: &'a Hamiltonian<T>) -> Self {
        Self { hamiltonian }
    }
}

impl<T: Scalar> KrylovSpace<T> for CommutatorSpace<'_, T> {
    type Vector = OperatorVector<T>;

    fn apply(&self, v: &OperatorVector<T>) -> OperatorVector<T> {
        commutator(self.hamiltonian, v)
    }

    fn inner(&self, a: &OperatorVector<T>, b: &OperatorVector<T>) -> Complex<T> {
        a.inner(b)
    }

    fn axpy(&self, alpha: Complex<T>, x: &OperatorVector<T>, y: &mut OperatorVector<T>) {
        Zip::from(&mut y.matrix).and(&x.matrix).for_each(|yi, &xi| *yi += alpha * xi);
    }

    fn scale(&self, v: &mut OperatorVector<T>, factor: T) {
        v.matrix.mapv_inplace(|x| x * factor);
    }
}

/// Orthonormal Krylov basis `O_0..O_T`.
#[derive(Clone, Debug)]
pub struct KrylovBasis<T> {
    pub vectors: Vec<OperatorVector<T>>,
}

/// Lanczos coefficients of `initial` under the TFIM Liouvillian, with two
/// passes of full reorthogonalization per step.
pub fn lanczos_generate<T: Scalar>(
    p: &TfimParams<T>,
    initial: &OperatorVector<T>,
    steps: usize,
) -> Result<(LanczosSequence<T>, KrylovBasis<T>), QuantumError> {
    let h = build_hamiltonian(p)?;
    lanczos_generate_with(&h, initial, steps, &LanczosOptions::default())
}

pub fn lanczos_generate_with<T: Scalar>(
    h: &Hamiltonian<T>,
    initial: &OperatorVector<T>,
    steps: usize,
    options: &LanczosOptions<T>,
) -> Result<(LanczosSequence<T>, KrylovBasis<T>), QuantumError> {
    if h.dimension() != initial.dimension() {
        return Err(QuantumError::DimensionMismatch {
            operator: initial.dimension(),
            hamiltonian: h.dimension(),
        });
    }
    let space = CommutatorSpace::new(h);
    let run = lanczos(&space, initial.clone(), steps, options)?;
    Ok((run.coefficients, KrylovBasis { vectors: run.basis }))
}

/// `b_1..b_steps` of `Z_1`, discarding the basis.
pub fn tfim_coefficients<T: Scalar>(p: &TfimParams<T>, steps: usize) -> Result<LanczosSequence<T>, QuantumError> {
    let h = build_hamiltonian(p)?;
    lanczos_generate_with(&h, &initial_operator(p.sites), steps, &LanczosOptions::default()).map(|(b, _)| b)
}

/// The fixed starting operator `Z_1`, already unit norm.
pub fn initial_operator<T: Scalar>(sites: usize) -> OperatorVector<T> {
    OperatorVector::pauli_z(0, sites)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lanczos::{orthonormality_defect, projected_liouvillian};

    fn params(sites: usize, g: f64, h: f64) -> TfimParams<f64> {
        TfimParams {
            sites,
            coupling: 1.0,
            transverse: g,
            longitudinal: h,
        }
    }

    #[test]
    fn zz_spectrum() {
        let p = TfimParams {
            sites: 2,
            coupling: 1.0,
            transverse: 0.0,
            longitudinal: 0.0,
        };
        let h = build_hamiltonian(&p).unwrap();
        // Z⊗Z is diagonal: (+1, -1, -1, +1)
        let diag: Vec<f64> = (0..4).map(|i| h.matrix()[[i, i]].re).collect();
        assert_eq!(diag, vec![1.0, -1.0, -1.0, 1.0]);
        let mut sorted = diag.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(sorted, vec![-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn hamiltonian_is_traceless_and_hermitian() {
        let h = build_hamiltonian(&params(4, 1.3, 0.4)).unwrap();
        let m = h.matrix();
        let trace: Complex<f64> = (0..16).map(|i| m[[i, i]]).sum();
        assert!(trace.norm() < 1e-12);
        for i in 0..16 {
            for j in 0..16 {
                assert!((m[[i, j]] - m[[j, i]].conj()).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn size_limit() {
        assert_eq!(
            build_hamiltonian(&params(11, 1.0, 0.5)),
            Err(QuantumError::DimensionTooLarge { sites: 11, max: 10 })
        );
    }

    #[test]
    fn single_site_commutator() {
        // H = gX, [gX, Z] = -2ig Y
        let g = 1.7;
        let p = TfimParams {
            sites: 1,
            coupling: 1.0,
            transverse: g,
            longitudinal: 0.0,
        };
        let h = build_hamiltonian(&p).unwrap();
        let out = liouvillian_apply(&h, &OperatorVector::pauli_z(0, 1)).unwrap();
        let y = OperatorVector::<f64>::pauli_y(0, 1);
        for (a, b) in out.entries().iter().zip(y.entries()) {
            assert!((a - b * Complex::new(0.0, -2.0 * g)).norm() < 1e-14);
        }
    }

    #[test]
    fn hamiltonian_commutes_with_itself() {
        let h = build_hamiltonian(&params(3, 1.2, 0.3)).unwrap();
        let as_op = OperatorVector::from_matrix(h.matrix().clone());
        let out = liouvillian_apply(&h, &as_op).unwrap();
        assert!(out.entries().iter().all(|x| x.norm() < 1e-13));
    }

    #[test]
    fn first_coefficient_is_twice_the_transverse_field() {
        for &(g, hz) in &[(1.0, 0.1), (1.5, 0.7), (2.0, 1.0)] {
            let (b, _) = lanczos_generate(&params(2, g, hz), &initial_operator(2), 3).unwrap();
            assert!((b.b(1) - 2.0 * g).abs() < 1e-12, "g={g}: {}", b.b(1));
        }
    }

    #[test]
    fn basis_is_orthonormal_and_tridiagonalizes() {
        let p = sample_tfim::<f64>(7, 4);
        let h = build_hamiltonian(&p).unwrap();
        let (b, basis) = lanczos_generate(&p, &initial_operator(4), 20).unwrap();
        let space = CommutatorSpace::new(&h);
        assert!(orthonormality_defect(&space, &basis.vectors) < 1e-10);
        let proj = projected_liouvillian(&space, &basis.vectors);
        let tri = crate::krylov::build_tridiagonal(&b);
        for m in 0..=20 {
            for n in 0..=20 {
                let d = (proj[[m, n]] - Complex::new(tri.entry(m, n), 0.0)).norm();
                assert!(d < 1e-8, "({m},{n}) off by {d}");
            }
        }
    }

    #[test]
    fn oversized_chain_is_refused_before_allocation() {
        let p = sample_tfim::<f64>(0, 40);
        assert!(matches!(tfim_coefficients(&p, 4), Err(QuantumError::DimensionTooLarge { sites: 40, .. })));
    }

    #[test]
    fn sampling_ranges_and_determinism() {
        for seed in 0..200 {
            let p = sample_tfim::<f64>(seed, 6);
            assert!((1.0..=2.0).contains(&p.transverse));
            assert!((0.1..=1.0).contains(&p.longitudinal));
            assert_eq!(p.coupling, 1.0);
            assert_eq!(p, sample_tfim(seed, 6));
        }
        assert_ne!(sample_tfim::<f64>(1, 6), sample_tfim::<f64>(2, 6));
    }
}

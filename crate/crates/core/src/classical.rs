//! Classical XYZ top `H = J_x x² + J_y y² + J_z z²` on the unit sphere with
//! brackets `{x, y} = z`, `{y, z} = x`, `{z, x} = y` and the normalized
//! sphere average as inner product.
//!
//! Two representations are provided:
//!
//! * [`SpherePolynomial`]: exact monomial algebra reduced modulo
//!   `x² + y² + z² = 1`, with Poisson brackets by the Leibniz rule and inner
//!   products from closed-form sphere moments. Well suited to symbolic
//!   checks and short recursions.
//! * [`HarmonicSpace`]: coefficients in the orthonormal basis
//!   `√(4π) Y_l^m`, where the Hermitian Liouvillian `i{H, ·}` is a sparse
//!   ladder operator. Monomial coefficients of high-degree orthonormal
//!   polynomials cancel catastrophically in floating point, so long
//!   sequences (`T = 100`) are generated here.

use std::collections::BTreeMap;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::krylov::LanczosSequence;
use crate::lanczos::{lanczos, KrylovSpace, LanczosError, LanczosOptions, LanczosRun, Symmetry};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassicalError {
    #[error(transparent)]
    Lanczos(#[from] LanczosError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct XyzParams<T> {
    #[serde(rename = "Jx")]
    pub jx: T,
    #[serde(rename = "Jy")]
    pub jy: T,
    #[serde(rename = "Jz")]
    pub jz: T,
}

/// Three independent `U[0, 1]` couplings.
pub fn sample_xyz<T: Scalar>(seed: u64) -> XyzParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || rng.random_range(T::zero()..=T::one());
    XyzParams {
        jx: draw(),
        jy: draw(),
        jz: draw(),
    }
}

/// Exponents `(a, b, c)` of `x^a y^b z^c`; canonical terms have `c <= 1`.
pub type Monomial = (u32, u32, u32);

const PRUNE: f64 = 1e-15;

/// Real polynomial on the sphere in reduced-monomial canonical form.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SpherePolynomial<T> {
    terms: BTreeMap<Monomial, T>,
}

impl<T: Scalar> SpherePolynomial<T> {
    pub fn zero() -> Self {
        Self { terms: BTreeMap::new() }
    }

    pub fn constant(c: T) -> Self {
        Self::from_terms([((0, 0, 0), c)])
    }

    pub fn x() -> Self {
        Self::from_terms([((1, 0, 0), T::one())])
    }

    pub fn y() -> Self {
        Self::from_terms([((0, 1, 0), T::one())])
    }

    pub fn z() -> Self {
        Self::from_terms([((0, 0, 1), T::one())])
    }

    /// Builds and canonicalizes a polynomial from arbitrary monomials.
    pub fn from_terms(terms: impl IntoIterator<Item = (Monomial, T)>) -> Self {
        let mut acc = BTreeMap::new();
        for (m, c) in terms {
            *acc.entry(m).or_insert_with(T::zero) += c;
        }
        Self::canonical(acc)
    }

    /// Rewrites `z^c` with `c >= 2` as `z^{c-2} (1 - x² - y²)` until none
    /// remain, then drops coefficients below `1e-15`.
    fn canonical(mut raw: BTreeMap<Monomial, T>) -> Self {
        loop {
            let high: Vec<(Monomial, T)> = raw
                .iter()
                .filter(|((_, _, c), _)| *c >= 2)
                .map(|(&m, &v)| (m, v))
                .collect();
            if high.is_empty() {
                break;
            }
            for ((a, b, c), v) in high {
                raw.remove(&(a, b, c));
                *raw.entry((a, b, c - 2)).or_insert_with(T::zero) += v;
                *raw.entry((a + 2, b, c - 2)).or_insert_with(T::zero) -= v;
                *raw.entry((a, b + 2, c - 2)).or_insert_with(T::zero) -= v;
            }
        }
        raw.retain(|_, v| v.abs() >= T::lit(PRUNE));
        Self { terms: raw }
    }

    pub fn terms(&self) -> impl Iterator<Item = (Monomial, T)> + '_ {
        self.terms.iter().map(|(&m, &v)| (m, v))
    }

    pub fn coefficient(&self, m: Monomial) -> T {
        self.terms.get(&m).copied().unwrap_or_else(T::zero)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree of the canonical representative.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|&(a, b, c)| a + b + c).max().unwrap_or(0)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.axpy(T::one(), other)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpy(-T::one(), other)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: T, other: &Self) -> Self {
        let mut acc = self.terms.clone();
        for (&m, &v) in &other.terms {
            *acc.entry(m).or_insert_with(T::zero) += alpha * v;
        }
        acc.retain(|_, v| v.abs() >= T::lit(PRUNE));
        Self { terms: acc }
    }

    pub fn scale(&self, factor: T) -> Self {
        let mut out = self.clone();
        out.terms.values_mut().for_each(|v| *v *= factor);
        out.terms.retain(|_, v| v.abs() >= T::lit(PRUNE));
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut acc = BTreeMap::new();
        for (&(a1, b1, c1), &v1) in &self.terms {
            for (&(a2, b2, c2), &v2) in &other.terms {
                *acc.entry((a1 + a2, b1 + b2, c1 + c2)).or_insert_with(T::zero) += v1 * v2;
            }
        }
        Self::canonical(acc)
    }

    /// Partial derivative of the representative in the ambient `R³`.
    fn partial(&self, axis: usize) -> BTreeMap<Monomial, T> {
        let mut out = BTreeMap::new();
        for (&(a, b, c), &v) in &self.terms {
            let (power, reduced) = match axis {
                0 => (a, (a.wrapping_sub(1), b, c)),
                1 => (b, (a, b.wrapping_sub(1), c)),
                _ => (c, (a, b, c.wrapping_sub(1))),
            };
            if power > 0 {
                *out.entry(reduced).or_insert_with(T::zero) += v * T::from_u32(power).unwrap();
            }
        }
        out
    }

    /// Exact sphere average of the function.
    pub fn average(&self) -> T {
        self.terms
            .iter()
            .map(|(&(a, b, c), &v)| v * sphere_moment::<T>(a, b, c))
            .sum()
    }
}

fn product(f: &BTreeMap<Monomial, f64>, g: &BTreeMap<Monomial, f64>) -> BTreeMap<Monomial, f64> {
    let mut acc = BTreeMap::new();
    for (&(a1, b1, c1), &v1) in f {
        for (&(a2, b2, c2), &v2) in g {
            *acc.entry((a1 + a2, b1 + b2, c1 + c2)).or_insert(0.0) += v1 * v2;
        }
    }
    acc
}

/// `{f, g}` by the Leibniz rule on the spin brackets:
/// `z(f_x g_y - f_y g_x) + x(f_y g_z - f_z g_y) + y(f_z g_x - f_x g_z)`.
///
/// `x² + y² + z²` is a Casimir, so the bracket of canonical representatives
/// is well defined on the sphere.
pub fn poisson_bracket<T: Scalar>(f: &SpherePolynomial<T>, g: &SpherePolynomial<T>) -> SpherePolynomial<T> {
    let to64 = |m: BTreeMap<Monomial, T>| -> BTreeMap<Monomial, f64> {
        m.into_iter().map(|(k, v)| (k, v.to_f64_lossy())).collect()
    };
    let fd: Vec<_> = (0..3).map(|i| to64(f.partial(i))).collect();
    let gd: Vec<_> = (0..3).map(|i| to64(g.partial(i))).collect();
    // (multiplier axis, i, j): multiplier * (f_i g_j - f_j g_i)
    let cyclic = [(2usize, 0usize, 1usize), (0, 1, 2), (1, 2, 0)];
    let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
    for &(k, i, j) in &cyclic {
        let plus = product(&fd[i], &gd[j]);
        let minus = product(&fd[j], &gd[i]);
        let shift = |(a, b, c): Monomial| match k {
            0 => (a + 1, b, c),
            1 => (a, b + 1, c),
            _ => (a, b, c + 1),
        };
        for (m, v) in plus {
            *acc.entry(shift(m)).or_insert(0.0) += v;
        }
        for (m, v) in minus {
            *acc.entry(shift(m)).or_insert(0.0) -= v;
        }
    }
    SpherePolynomial::canonical(acc.into_iter().map(|(m, v)| (m, T::lit(v))).collect())
}

/// `⟨x^a y^b z^c⟩` over the unit sphere: zero unless all exponents are even,
/// otherwise `(a-1)!! (b-1)!! (c-1)!! / (a+b+c+1)!!`.
pub fn sphere_moment<T: Scalar>(a: u32, b: u32, c: u32) -> T {
    if a % 2 == 1 || b % 2 == 1 || c % 2 == 1 {
        return T::zero();
    }
    let odd_factors = |e: u32| (1..e).step_by(2).map(|k| k as f64);
    let numerator: Vec<f64> = odd_factors(a).chain(odd_factors(b)).chain(odd_factors(c)).collect();
    let denominator: Vec<f64> = (1..=a + b + c + 1).step_by(2).map(|k| k as f64).collect();
    // interleave so the running value stays O(1)
    let mut value = 1.0f64;
    for i in 0..numerator.len().max(denominator.len()) {
        if let Some(&n) = numerator.get(i) {
            value *= n;
        }
        if let Some(&d) = denominator.get(i) {
            value /= d;
        }
    }
    T::lit(value)
}

/// `(f|g) = (1/4π) ∫ f g dΩ`.
pub fn sphere_inner<T: Scalar>(f: &SpherePolynomial<T>, g: &SpherePolynomial<T>) -> T {
    let mut acc = T::zero();
    for (&(a1, b1, c1), &v1) in &f.terms {
        for (&(a2, b2, c2), &v2) in &g.terms {
            acc += v1 * v2 * sphere_moment::<T>(a1 + a2, b1 + b2, c1 + c2);
        }
    }
    acc
}

pub fn xyz_hamiltonian<T: Scalar>(p: &XyzParams<T>) -> SpherePolynomial<T> {
    SpherePolynomial::from_terms([((2, 0, 0), p.jx), ((0, 2, 0), p.jy), ((0, 0, 2), p.jz)])
}

/// `O_0 = √3 z`, unit norm because `(z|z) = 1/3`.
pub fn initial_polynomial<T: Scalar>() -> SpherePolynomial<T> {
    SpherePolynomial::z().scale(T::lit(3.0).sqrt())
}

/// Monomial operator space with `𝓛 = {H, ·}` (anti-self-adjoint).
pub struct MonomialSpace<T> {
    hamiltonian: SpherePolynomial<T>,
}

impl<T: Scalar> MonomialSpace<T> {
    pub fn new(p: &XyzParams<T>) -> Self {
        Self {
            hamiltonian: xyz_hamiltonian(p),
        }
    }
}

impl<T: Scalar> KrylovSpace<T> for MonomialSpace<T> {
    type Vector = SpherePolynomial<T>;

    fn apply(&self, v: &SpherePolynomial<T>) -> SpherePolynomial<T> {
        poisson_bracket(&self.hamiltonian, v)
    }

    fn inner(&self, a: &SpherePolynomial<T>, b: &SpherePolynomial<T>) -> Complex<T> {
        Complex::new(sphere_inner(a, b), T::zero())
    }

    fn axpy(&self, alpha: Complex<T>, x: &SpherePolynomial<T>, y: &mut SpherePolynomial<T>) {
        *y = y.axpy(alpha.re, x);
    }

    fn scale(&self, v: &mut SpherePolynomial<T>, factor: T) {
        *v = v.scale(factor);
    }

    fn symmetry(&self) -> Symmetry {
        Symmetry::AntiHermitian
    }
}

/// Lanczos in the monomial representation. Exact in structure but limited to
/// short sequences (roughly `T <= 12`) by cancellation in the coefficients.
pub fn lanczos_generate_classical_monomial<T: Scalar>(
    p: &XyzParams<T>,
    steps: usize,
) -> Result<LanczosRun<T, SpherePolynomial<T>>, ClassicalError> {
    let space = MonomialSpace::new(p);
    Ok(lanczos(&space, initial_polynomial(), steps, &LanczosOptions::default())?)
}

/// Coefficients on the orthonormal basis `e_{l,m} = √(4π) Y_l^m`
/// (Condon-Shortley phases), stored at index `l² + l + m` up to the highest
/// populated `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicVector<T> {
    coeffs: Vec<Complex<T>>,
}

#[inline]
fn harmonic_index(l: usize, m: i64) -> usize {
    ((l * l + l) as i64 + m) as usize
}

impl<T: Scalar> HarmonicVector<T> {
    pub fn zeros(lmax: usize) -> Self {
        Self {
            coeffs: vec![Complex::new(T::zero(), T::zero()); (lmax + 1) * (lmax + 1)],
        }
    }

    /// The unit vector `e_{l,m}`.
    pub fn basis(l: usize, m: i64) -> Self {
        let mut v = Self::zeros(l);
        v.coeffs[harmonic_index(l, m)] = Complex::new(T::one(), T::zero());
        v
    }

    pub fn coefficient(&self, l: usize, m: i64) -> Complex<T> {
        self.coeffs
            .get(harmonic_index(l, m))
            .copied()
            .unwrap_or_else(|| Complex::new(T::zero(), T::zero()))
    }

    /// Highest `l` stored.
    pub fn capacity_degree(&self) -> usize {
        (self.coeffs.len() as f64).sqrt() as usize - 1
    }

    /// Highest `l` carrying a nonzero coefficient (the polynomial degree).
    pub fn degree(&self) -> usize {
        let last = self.coeffs.iter().rposition(|c| c.norm_sqr() > T::zero());
        match last {
            None => 0,
            Some(i) => (i as f64).sqrt() as usize,
        }
    }

    fn grow(&mut self, lmax: usize) {
        let len = (lmax + 1) * (lmax + 1);
        if self.coeffs.len() < len {
            self.coeffs.resize(len, Complex::new(T::zero(), T::zero()));
        }
    }
}

/// Hermitian Liouvillian `i{H, ·} = 2 Σ_i J_i x_i L_i` on harmonic
/// coefficients, written with ladder operators as
/// `½[(J_x - J_y)(x₊L₊ + x₋L₋) + (J_x + J_y)(x₊L₋ + x₋L₊)] + 2 J_z z L_z`.
pub struct HarmonicSpace<T> {
    params: XyzParams<T>,
}

impl<T: Scalar> HarmonicSpace<T> {
    pub fn new(params: &XyzParams<T>) -> Self {
        Self { params: *params }
    }
}

fn ratio_sqrt<T: Scalar>(num: i64, den: i64) -> T {
    if num <= 0 || den <= 0 {
        T::zero()
    } else {
        (T::from_i64(num).unwrap() / T::from_i64(den).unwrap()).sqrt()
    }
}

/// Adds `c · z e_{l,m}` to `out`.
fn mul_z<T: Scalar>(out: &mut [Complex<T>], l: i64, m: i64, c: Complex<T>) {
    let up: T = ratio_sqrt((l + 1) * (l + 1) - m * m, (2 * l + 1) * (2 * l + 3));
    out[harmonic_index((l + 1) as usize, m)] += c * up;
    if l >= 1 && m.abs() < l {
        let down: T = ratio_sqrt(l * l - m * m, (2 * l - 1) * (2 * l + 1));
        out[harmonic_index((l - 1) as usize, m)] += c * down;
    }
}

/// Adds `c · (x + iy) e_{l,m}` to `out`.
fn mul_x_plus<T: Scalar>(out: &mut [Complex<T>], l: i64, m: i64, c: Complex<T>) {
    let up: T = ratio_sqrt((l + m + 1) * (l + m + 2), (2 * l + 1) * (2 * l + 3));
    out[harmonic_index((l + 1) as usize, m + 1)] -= c * up;
    if l >= 1 && (m + 1).abs() < l {
        let down: T = ratio_sqrt((l - m) * (l - m - 1), (2 * l - 1) * (2 * l + 1));
        out[harmonic_index((l - 1) as usize, m + 1)] += c * down;
    }
}

/// Adds `c · (x - iy) e_{l,m}` to `out`.
fn mul_x_minus<T: Scalar>(out: &mut [Complex<T>], l: i64, m: i64, c: Complex<T>) {
    let up: T = ratio_sqrt((l - m + 1) * (l - m + 2), (2 * l + 1) * (2 * l + 3));
    out[harmonic_index((l + 1) as usize, m - 1)] += c * up;
    if l >= 1 && (m - 1).abs() < l {
        let down: T = ratio_sqrt((l + m) * (l + m - 1), (2 * l - 1) * (2 * l + 1));
        out[harmonic_index((l - 1) as usize, m - 1)] -= c * down;
    }
}

impl<T: Scalar> KrylovSpace<T> for HarmonicSpace<T> {
    type Vector = HarmonicVector<T>;

    fn apply(&self, v: &HarmonicVector<T>) -> HarmonicVector<T> {
        let lmax = v.capacity_degree();
        let mut out = HarmonicVector::zeros(lmax + 1);
        let p = &self.params;
        let half = T::lit(0.5);
        let anti = (p.jx - p.jy) * half;
        let sym = (p.jx + p.jy) * half;
        let zz = p.jz * T::lit(2.0);
        for l in 0..=lmax as i64 {
            let ll = l * (l + 1);
            for m in -l..=l {
                let c = v.coeffs[harmonic_index(l as usize, m)];
                if c.norm_sqr() == T::zero() {
                    continue;
                }
                if m != 0 {
                    mul_z(&mut out.coeffs, l, m, c * (zz * T::from_i64(m).unwrap()));
                }
                if m < l {
                    // L₊ e_{l,m} = √(l(l+1) - m(m+1)) e_{l,m+1}
                    let raised = c * ratio_sqrt::<T>(ll - m * (m + 1), 1);
                    mul_x_plus(&mut out.coeffs, l, m + 1, raised * anti);
                    mul_x_minus(&mut out.coeffs, l, m + 1, raised * sym);
                }
                if m > -l {
                    let lowered = c * ratio_sqrt::<T>(ll - m * (m - 1), 1);
                    mul_x_minus(&mut out.coeffs, l, m - 1, lowered * anti);
                    mul_x_plus(&mut out.coeffs, l, m - 1, lowered * sym);
                }
            }
        }
        out
    }

    fn inner(&self, a: &HarmonicVector<T>, b: &HarmonicVector<T>) -> Complex<T> {
        a.coeffs.iter().zip(&b.coeffs).map(|(x, y)| x.conj() * y).sum()
    }

    fn axpy(&self, alpha: Complex<T>, x: &HarmonicVector<T>, y: &mut HarmonicVector<T>) {
        y.grow(x.capacity_degree());
        for (yi, xi) in y.coeffs.iter_mut().zip(&x.coeffs) {
            *yi += alpha * xi;
        }
    }

    fn scale(&self, v: &mut HarmonicVector<T>, factor: T) {
        v.coeffs.iter_mut().for_each(|c| *c *= factor);
    }
}

/// `O_0 = √3 z = e_{1,0}` in the harmonic basis.
pub fn initial_harmonic<T: Scalar>() -> HarmonicVector<T> {
    HarmonicVector::basis(1, 0)
}

/// Lanczos coefficients `b_1..b_T` of `√3 z` under the XYZ top, with full
/// reorthogonalization, together with the harmonic Krylov basis.
pub fn lanczos_generate_classical_with_basis<T: Scalar>(
    p: &XyzParams<T>,
    steps: usize,
) -> Result<LanczosRun<T, HarmonicVector<T>>, ClassicalError> {
    let space = HarmonicSpace::new(p);
    Ok(lanczos(&space, initial_harmonic(), steps, &LanczosOptions::default())?)
}

pub fn lanczos_generate_classical<T: Scalar>(
    p: &XyzParams<T>,
    steps: usize,
) -> Result<LanczosSequence<T>, ClassicalError> {
    lanczos_generate_classical_with_basis(p, steps).map(|run| run.coefficients)
}

//! Asymptotic growth fits with even-odd staggering,
//! `b_n = α f(n) + γ + γ* (-1)^n` with `f(n) = n` or `f(n) = n / ln n`,
//! and their extrapolation past the fitted window.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::krylov::{Forecast, LanczosSequence};
use crate::linalg::least_squares;
use crate::scalar::Scalar;

/// Growth law of the fit. `LogLinear` is the one-dimensional form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitForm {
    Linear,
    #[serde(rename = "loglinear")]
    LogLinear,
}

impl FitForm {
    /// First index admitted to the fit window: `n / ln n` is singular at 1.
    pub fn first_index(self) -> usize {
        match self {
            FitForm::Linear => 1,
            FitForm::LogLinear => 2,
        }
    }

    /// `f(n)`; `None` for the log-linear form at `n = 1`.
    pub fn growth<T: Scalar>(self, n: usize) -> Option<T> {
        let x = T::from_usize_lossy(n);
        match self {
            FitForm::Linear => Some(x),
            FitForm::LogLinear if n >= 2 => Some(x / x.ln()),
            FitForm::LogLinear => None,
        }
    }
}

impl std::str::FromStr for FitForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(FitForm::Linear),
            "loglinear" => Ok(FitForm::LogLinear),
            other => Err(format!("unknown fit form `{other}` (expected linear or loglinear)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitParams<T> {
    pub alpha: T,
    pub gamma: T,
    pub gamma_star: T,
    pub form: FitForm,
    /// Sum of squared residuals over the fit window.
    pub residual: T,
}

impl<T: Scalar> FitParams<T> {
    /// Closed-form value at index `n`, `None` where the growth law is undefined.
    pub fn evaluate(&self, n: usize) -> Option<T> {
        let stagger = if n.is_multiple_of(2) { T::one() } else { -T::one() };
        self.form
            .growth::<T>(n)
            .map(|f| self.alpha * f + self.gamma + self.gamma_star * stagger)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("fit window of {rows} points cannot determine 3 parameters")]
    SingularDesign { rows: usize },
}

/// Ordinary least squares on the columns `[f(n), 1, (-1)^n]` over the prefix
/// (from `n = 2` for the log-linear form).
pub fn fit_baseline<T: Scalar>(prefix: &LanczosSequence<T>, form: FitForm) -> Result<FitParams<T>, BaselineError> {
    let first = form.first_index();
    let rows = prefix.len().saturating_sub(first - 1);
    if prefix.len() < 4 {
        return Err(BaselineError::SingularDesign { rows });
    }
    let indices: Vec<usize> = (first..=prefix.len()).collect();
    let design = Array2::from_shape_fn((indices.len(), 3), |(r, c)| {
        let n = indices[r];
        match c {
            0 => form.growth::<T>(n).expect("window starts where the growth law is defined"),
            1 => T::one(),
            _ => {
                if n.is_multiple_of(2) {
                    T::one()
                } else {
                    -T::one()
                }
            }
        }
    });
    let target: Vec<T> = indices.iter().map(|&n| prefix.b(n)).collect();
    let sol = least_squares(&design, &target).ok_or(BaselineError::SingularDesign { rows })?;
    Ok(FitParams {
        alpha: sol.coefficients[0],
        gamma: sol.coefficients[1],
        gamma_star: sol.coefficients[2],
        form,
        residual: sol.residual,
    })
}

/// Length-`n_max` forecast: the prefix verbatim, then the closed form for
/// `n > prefix.len()`.
pub fn extrapolate_baseline<T: Scalar>(p: &FitParams<T>, prefix: &LanczosSequence<T>, n_max: usize) -> Forecast<T> {
    assert!(n_max >= 1, "forecast length must be positive");
    let keep = prefix.len().min(n_max);
    let mut values = prefix.values()[..keep].to_vec();
    values.extend((keep + 1..=n_max).map(|n| {
        p.evaluate(n)
            .expect("indices past a non-empty prefix are at least 2")
    }));
    Forecast::new(values, keep)
}

/// Fit on the first `n_in` coefficients of `b` and forecast to `n_max`.
pub fn baseline_forecast<T: Scalar>(
    b: &LanczosSequence<T>,
    n_in: usize,
    n_max: usize,
    form: FitForm,
) -> Result<(FitParams<T>, Forecast<T>), BaselineError> {
    let prefix = b.prefix(n_in);
    let p = fit_baseline(&prefix, form)?;
    let forecast = extrapolate_baseline(&p, &prefix, n_max);
    Ok((p, forecast))
}

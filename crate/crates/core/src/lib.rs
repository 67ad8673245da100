//! Lanczos-coefficient generation, Krylov-chain dynamics and a small
//! decoder-only transformer that extrapolates Lanczos sequences.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the concrete instantiations.

pub mod baseline;
pub mod classical;
pub mod eval;
pub mod krylov;
pub mod lanczos;
pub mod linalg;
pub mod quantum;
pub mod scalar;
pub mod seeding;
pub mod trainer;
pub mod transformer;

pub use scalar::Scalar;

pub type LanczosSequence64 = krylov::LanczosSequence<f64>;
pub type IncrementSequence64 = krylov::IncrementSequence<f64>;
pub type Forecast64 = krylov::Forecast<f64>;
pub type TfimParams64 = quantum::TfimParams<f64>;
pub type XyzParams64 = classical::XyzParams<f64>;
pub type FitParams64 = baseline::FitParams<f64>;
pub type ModelParams64 = transformer::ModelParams<f64>;
pub type ModelParams32 = transformer::ModelParams<f32>;

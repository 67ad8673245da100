//! Invariants checked on random inputs.

use krylov_core::baseline::{baseline_forecast, fit_baseline, FitForm, FitParams};
use krylov_core::classical::{poisson_bracket, SpherePolynomial};
use krylov_core::eval::rmse_per_index;
use krylov_core::krylov::{
    autocorrelation, build_tridiagonal, evolve, from_increments, krylov_complexity, moments_from_tridiagonal, moments_to_lanczos,
    IncrementSequence, LanczosSequence,
};
use krylov_core::lanczos::orthonormality_defect;
use krylov_core::quantum::{build_hamiltonian, initial_operator, lanczos_generate, sample_tfim, CommutatorSpace};
use krylov_core::seeding::derive_seed;
use krylov_core::transformer::{extrapolate_coefficients, forward, mask_matrix, softmax, MaskPolicy, ModelConfig, ModelParams};
use proptest::prelude::*;

fn coefficients(max_len: usize) -> impl Strategy<Value = LanczosSequence<f64>> {
    prop::collection::vec(0.1f64..4.0, 1..=max_len).prop_map(|v| LanczosSequence::new(v).unwrap())
}

fn polynomial() -> impl Strategy<Value = SpherePolynomial<f64>> {
    prop::collection::vec(((0u32..3, 0u32..3, 0u32..2), -2.0f64..2.0), 0..6).prop_map(SpherePolynomial::from_terms)
}

fn close(a: &SpherePolynomial<f64>, b: &SpherePolynomial<f64>, tol: f64) -> bool {
    a.sub(b).terms().all(|(_, c)| c.abs() < tol)
}

fn mask() -> impl Strategy<Value = MaskPolicy> {
    prop_oneof![
        Just(MaskPolicy::Full),
        Just(MaskPolicy::Parity),
        (1usize..6).prop_map(MaskPolicy::LongRange),
        (0usize..6).prop_map(MaskPolicy::Early),
    ]
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        dropout: 0.0,
        max_position: 32,
        layer_norm_eps: 1e-5,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chain_evolution_is_unitary(b in coefficients(40), t in 0.0f64..30.0) {
        let phi = evolve(&build_tridiagonal(&b), t);
        let norm: f64 = phi.amplitudes.iter().map(|a| a.norm_sqr()).sum();
        prop_assert!((norm - 1.0).abs() < 1e-9);
        prop_assert!(autocorrelation(&phi).im.abs() < 1e-9);
        let k = krylov_complexity(&phi);
        prop_assert!(k >= -1e-12 && k <= b.len() as f64 + 1e-9);
    }

    #[test]
    fn moments_round_trip(b in prop::collection::vec(0.5f64..2.5, 1..=10)) {
        let b = LanczosSequence::new(b).unwrap();
        let back = moments_to_lanczos(&moments_from_tridiagonal(&build_tridiagonal(&b), b.len())).unwrap();
        prop_assert_eq!(back.len(), b.len());
        for (x, y) in back.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() / y < 1e-6);
        }
    }

    #[test]
    fn increments_round_trip(b in coefficients(60)) {
        let d = b.to_increments();
        prop_assert_eq!(d.values()[0], b.b(1));
        let back = from_increments(&d).unwrap();
        for (x, y) in back.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn tfim_basis_is_orthonormal(seed in any::<u64>(), sites in 2usize..=4) {
        let p = sample_tfim::<f64>(seed, sites);
        let h = build_hamiltonian(&p).unwrap();
        if let Ok((b, basis)) = lanczos_generate(&p, &initial_operator(sites), 8) {
            prop_assert!(b.values().iter().all(|&x| x > 0.0));
            prop_assert!(orthonormality_defect(&CommutatorSpace::new(&h), &basis.vectors) < 1e-10);
        }
    }

    #[test]
    fn poisson_bracket_is_a_lie_bracket(f in polynomial(), g in polynomial(), h in polynomial()) {
        let fg = poisson_bracket(&f, &g);
        prop_assert!(close(&fg, &poisson_bracket(&g, &f).scale(-1.0), 1e-10));
        let jacobi = poisson_bracket(&f, &poisson_bracket(&g, &h))
            .add(&poisson_bracket(&g, &poisson_bracket(&h, &f)))
            .add(&poisson_bracket(&h, &fg));
        prop_assert!(close(&jacobi, &SpherePolynomial::zero(), 1e-8));
        let leibniz = poisson_bracket(&f, &g.mul(&h));
        let expanded = poisson_bracket(&f, &g).mul(&h).add(&g.mul(&poisson_bracket(&f, &h)));
        prop_assert!(close(&leibniz, &expanded, 1e-8));
    }

    #[test]
    fn baseline_recovers_exact_staggered_laws(
        alpha in 0.1f64..3.0, gamma in -1.0f64..1.0, gamma_star in -0.5f64..0.5,
        len in 6usize..40, log in any::<bool>(),
    ) {
        let form = if log { FitForm::LogLinear } else { FitForm::Linear };
        let truth = FitParams { alpha, gamma, gamma_star, form, residual: 0.0 };
        // b_1 is arbitrary for the log-linear law; clipping keeps every entry positive
        let b: Vec<f64> = (1..=len).map(|n| truth.evaluate(n).unwrap_or(1.0).abs().max(1e-3)).collect();
        let b = LanczosSequence::new(b).unwrap();
        let p = fit_baseline(&b, form).unwrap();
        let exact = (1..=len).filter(|&n| n >= form.first_index()).all(|n| (truth.evaluate(n).unwrap() - b.b(n)).abs() < 1e-15);
        if exact {
            prop_assert!((p.alpha - alpha).abs() < 1e-7 && (p.gamma - gamma).abs() < 1e-7 && (p.gamma_star - gamma_star).abs() < 1e-7);
        }
    }

    #[test]
    fn baseline_is_a_least_squares_minimum(b in prop::collection::vec(0.5f64..5.0, 6..30), log in any::<bool>(), which in 0usize..3, sign in prop_oneof![Just(-1.0), Just(1.0)]) {
        let form = if log { FitForm::LogLinear } else { FitForm::Linear };
        let b = LanczosSequence::new(b).unwrap();
        let p = fit_baseline(&b, form).unwrap();
        let residual = |q: &FitParams<f64>| (form.first_index()..=b.len()).map(|n| (q.evaluate(n).unwrap() - b.b(n)).powi(2)).sum::<f64>();
        prop_assert!((residual(&p) - p.residual).abs() <= 1e-9 * (1.0 + p.residual));
        let mut q = p;
        match which {
            0 => q.alpha += sign * 1e-3,
            1 => q.gamma += sign * 1e-3,
            _ => q.gamma_star += sign * 1e-3,
        }
        prop_assert!(residual(&q) >= p.residual - 1e-12);
    }

    #[test]
    fn forecasts_keep_the_prefix(b in prop::collection::vec(0.5f64..5.0, 12..30), n_in in 5usize..10) {
        let b = LanczosSequence::new(b).unwrap();
        let (_, f) = baseline_forecast(&b, n_in, b.len(), FitForm::Linear).unwrap();
        prop_assert_eq!(&f.values()[..n_in], &b.values()[..n_in]);
        prop_assert_eq!(f.len(), b.len());
        let params = ModelParams::<f64>::init(&small_model(), 3);
        let t = extrapolate_coefficients(&params, &[b.prefix(n_in)], b.len(), MaskPolicy::Full).unwrap();
        prop_assert_eq!(&t[0].values()[..n_in], &b.values()[..n_in]);
        prop_assert_eq!(t[0].len(), b.len());
    }

    #[test]
    fn masks_never_look_ahead(policy in mask(), len in 1usize..20) {
        let m = mask_matrix(policy, len);
        for p in 0..len {
            for q in p + 1..len {
                prop_assert!(!m[[p, q]]);
            }
        }
        prop_assert_eq!(mask_matrix(MaskPolicy::LongRange(len), len), mask_matrix(MaskPolicy::Full, len));
    }

    #[test]
    fn predictions_are_causal(policy in mask(), seed in 0u64..1000, tokens in prop::collection::vec(-1.0f64..2.0, 2..16), at in any::<prop::sample::Index>(), delta in 0.01f64..1.0) {
        let params = ModelParams::<f64>::init(&small_model(), seed);
        let base = IncrementSequence::new(tokens.clone()).unwrap();
        let p = at.index(tokens.len());
        let mut changed = tokens;
        changed[p] += delta;
        let (a, _) = forward(&params, &base, policy, false, None).unwrap();
        let (b, _) = forward(&params, &IncrementSequence::new(changed).unwrap(), policy, false, None).unwrap();
        for q in 0..p {
            prop_assert_eq!(a[q].to_bits(), b[q].to_bits());
        }
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let s = softmax(&z).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn rmse_ignores_sample_order(seqs in prop::collection::vec(prop::collection::vec(0.5f64..3.0, 8), 2..8), rotate in 1usize..8) {
        let truth: Vec<_> = seqs.iter().map(|v| LanczosSequence::new(v.clone()).unwrap()).collect();
        let pred: Vec<Vec<f64>> = seqs.iter().map(|v| v.iter().enumerate().map(|(i, x)| if i < 3 { *x } else { x * 1.1 + 0.05 }).collect()).collect();
        let a = rmse_per_index(&truth, &pred, 3).unwrap();
        let k = rotate % truth.len();
        let mut t2 = truth.clone();
        t2.rotate_left(k);
        let mut p2 = pred.clone();
        p2.rotate_left(k);
        let b = rmse_per_index(&t2, &p2, 3).unwrap();
        prop_assert_eq!(&a.indices, &b.indices);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1e-300));
        }
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct(master in any::<u64>(), stream in 0u64..8, i in 0u64..1_000_000) {
        prop_assert_eq!(derive_seed(master, stream, i), derive_seed(master, stream, i));
        prop_assert_ne!(derive_seed(master, stream, i), derive_seed(master, stream, i + 1));
        prop_assert_ne!(derive_seed(master, stream, i), derive_seed(master, stream + 1, i));
    }
}

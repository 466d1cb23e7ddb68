use driftlab_core::bound_envelope::{envelope_exponents, fit_tail_decay, general_bound_rhs, r_exponents, BoundInputs};
use driftlab_core::coefficient_approx::{approx_coefficients, gauss_legendre, make_cutoff, ApproximationScheme};
use driftlab_core::density_lab::{compare_densities, solve_fokker_planck, Boundary, FdConfig, Region, SpaceGrid};
use driftlab_core::grid::ShellGrid;
use driftlab_core::linalg;
use driftlab_core::lyapunov::{
    derive_static, derive_time_dependent, RateFunction, StaticLyapunov, TimeDependentLyapunov,
};
use driftlab_core::operator_model::{
    check_hypotheses, fd_step, make_polynomial, ornstein_uhlenbeck, BaseDiffusion, CoefficientField, CoercivityRate,
    GrowthParams,
};
use driftlab_core::regularity_calc::{bootstrap_exponents_exact, hest_exponent, moser_sequence, moser_threshold};
use driftlab_core::sde_engine::{simulate_paths, Scheme, SimulationPlan};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use proptest::prelude::*;
use std::sync::OnceLock;

fn params(m: f64, p: f64) -> GrowthParams {
    GrowthParams::new(m, p, 1.0, 1.0, 1.0, CoercivityRate::constant(1.0)).unwrap()
}

fn unit_field(m: f64, p: f64, d: usize) -> CoefficientField {
    make_polynomial(d, &params(m, p), BaseDiffusion::scaled_identity(d, 1.0)).unwrap()
}

/// `(V, W)` for the quartic example at `α = 2.5`.
fn quartic_weights() -> &'static (StaticLyapunov, TimeDependentLyapunov) {
    static CELL: OnceLock<(StaticLyapunov, TimeDependentLyapunov)> = OnceLock::new();
    CELL.get_or_init(|| {
        let p = params(0.0, 3.0);
        let f = unit_field(0.0, 3.0, 1);
        let g = ShellGrid::uniform(1, 0.0, 0.99, 0.01, 10.0, 0.05).unwrap();
        let v = derive_static(&f, &p, 0.8, &g).unwrap();
        let w = derive_time_dependent(&v, &f, &p, 1.0, 0.5, 2.5, &g).unwrap();
        (v, w)
    })
}

fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn vector(d: usize, max: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-max..max, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drift_is_exactly_coercive(m in 0.0..2.0f64, dp in 0.1..2.0f64, b in 0.5..3.0f64, x in (1usize..4).prop_flat_map(|d| vector(d, 30.0))) {
        let p = (m - 1.0).max(1.0) + dp;
        let pr = GrowthParams::new(m, p, 1.0, 1.0, 1.0, CoercivityRate::constant(b)).unwrap();
        let f = make_polynomial(x.len(), &pr, BaseDiffusion::scaled_identity(x.len(), 1.0)).unwrap();
        let fx = f.drift(0.3, &x).unwrap();
        let r = linalg::norm(&x);
        let expect = -b * r.powf(p + 1.0);
        prop_assert!((linalg::dot(&fx, &x) - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
    }

    #[test]
    fn analytic_and_difference_divergence_agree(x in vector(2, 10.0), i in 0usize..2, j in 0usize..2, k in 0usize..2) {
        // Cubic entries: third derivatives are bounded by 6.
        let q = |x: &[f64], out: &mut [f64]| {
            let s = 2.0 + x[0].powi(3) * 1e-3 + x[0] * x[1] * x[1] * 1e-3;
            out.copy_from_slice(&[s + 1.0, 0.1 * x[0] * x[1], 0.1 * x[0] * x[1], s]);
        };
        let grad = |x: &[f64], i: usize, j: usize, k: usize| -> f64 {
            let ds = if k == 0 { 3e-3 * x[0] * x[0] + 1e-3 * x[1] * x[1] } else { 2e-3 * x[0] * x[1] };
            if i == j { ds } else if k == 0 { 0.1 * x[1] } else { 0.1 * x[0] }
        };
        let f = CoefficientField::new(2, 1.0, move |_, x, out| q(x, out), |_, _, out| out.fill(0.0))
            .with_diffusion_grad(move |_, x, i, j, k| grad(x, i, j, k));
        let a = f.diffusion_derivative(0.0, &x, i, j, k);
        let b = f.diffusion_derivative_fd(0.0, &x, i, j, k);
        let h = fd_step(&x);
        let qmax = f.diffusion(0.0, &x).unwrap().max_abs();
        prop_assert!((a - b).abs() <= 10.0 * h * h * 6e-3 + 64.0 * f64::EPSILON * qmax / h, "{a} vs {b}");
    }

    #[test]
    fn generator_bound_increases_with_lambda(lambda in 1.0..3.0f64, extra in 0.0..2.0f64, rmax in 2.0..8.0f64) {
        let f = unit_field(0.0, 3.0, 1);
        let g = ShellGrid::uniform(1, 0.0, 0.5, 0.25, rmax, 0.1).unwrap();
        let probes = vec![vec![1.0], vec![-1.0]];
        let mk = |l: f64| GrowthParams::new(0.0, 3.0, l, 1.0, 1.0, CoercivityRate::constant(1.0)).unwrap();
        let base = check_hypotheses(&f, &mk(lambda), &g, &probes);
        let larger = check_hypotheses(&f, &mk(lambda + extra), &g, &probes);
        let small = ShellGrid::uniform(1, 0.0, 0.25, 0.25, rmax / 2.0, 0.1).unwrap();
        let shrunk = check_hypotheses(&f, &mk(lambda), &small, &probes);
        if base.pass {
            prop_assert!(larger.pass);
            prop_assert!(shrunk.pass);
        }
    }

    #[test]
    fn time_weight_below_static_weight(s in 0.0..1.0f64, x in -12.0..12.0f64) {
        let (v, w) = quartic_weights();
        let x = [x];
        prop_assume!(v.profile.value_at(&x) >= 0.0);
        let ratio = w.epsilon / v.delta;
        prop_assert!(w.log_value(s, &x) <= ratio * v.log_value(&x) + 1e-12);
        prop_assert!(ratio * v.log_value(&x) <= v.log_value(&x));
    }

    #[test]
    fn time_derivative_of_weight(s in 0.0..0.95f64, x in -5.0..5.0f64) {
        let (_, w) = quartic_weights();
        let x = [x];
        let h = 1e-6;
        let fd = (w.log_value(s + h, &x) - w.log_value(s - h, &x)) / (2.0 * h);
        let closed = w.ds_ratio(s, &x);
        let upsilon = w.profile.value_at(&x);
        prop_assert!((closed + w.epsilon * w.alpha * (1.0 - s).powf(w.alpha - 1.0) * upsilon).abs() <= 1e-12 * (1.0 + closed.abs()));
        prop_assert!((fd - closed).abs() <= 1e-6 * (1.0 + closed.abs()));
        if upsilon >= 0.0 {
            prop_assert!(closed <= 0.0);
        }
    }

    #[test]
    fn analytic_rate_integral(m in 0.0..2.0f64, dp in 0.2..2.0f64, extra in 0.05..1.5f64, c in 0.1..5.0f64, a in 0.0..0.9f64) {
        let p = (m - 1.0).max(1.0) + dp;
        let beta = p + 1.0 - m;
        let alpha = beta / (p - 1.0) + extra;
        let gamma = alpha - (2.0 * beta + m - 2.0) / (beta + m - 2.0);
        let finite = alpha > beta / (beta + m - 2.0);
        prop_assert_eq!(finite, gamma > -1.0);
        let rate = RateFunction::Analytic { constant: c, exponent: gamma, horizon: 1.0 };
        let closed = rate.integral(a, 1.0);
        prop_assert_eq!(closed.is_finite(), finite);
        if finite {
            // s = 1 − v^k turns the integrand into the polynomial c·k·v^{k(γ+1)−1}.
            let k = 3.0 / (gamma + 1.0);
            let (nodes, weights) = gauss_legendre(8);
            let hi = (1.0 - a).powf(1.0 / k);
            let quad: f64 = nodes.iter().zip(&weights).map(|(z, wt)| {
                let v = 0.5 * hi * (z + 1.0);
                0.5 * hi * wt * c * k * v.powf(k * (gamma + 1.0) - 1.0)
            }).sum();
            prop_assert!((quad - closed).abs() <= 1e-8 * closed.abs().max(1.0), "{quad} vs {closed}");
        }
    }

    #[test]
    fn truncation_is_identity_below_level(n in 2u64..5000, s in 0.0..0.99f64, x in -8.0..8.0f64) {
        let (_, w) = quartic_weights();
        let base = unit_field(2.0, 3.0, 1);
        let scheme = ApproximationScheme::new(n, base.clone(), w.clone()).unwrap();
        let qn = approx_coefficients(&scheme, s, &[x]).unwrap();
        if w.log_value(s, &[x]) <= (n as f64).ln() {
            prop_assert_eq!(qn.clone(), base.diffusion(s, &[x]).unwrap());
        }
        prop_assert!(qn.is_symmetric());
        prop_assert!(qn.get(0, 0) >= base.eta() * (1.0 - 1e-12));
    }

    #[test]
    fn truncation_preserves_ellipticity_in_the_plane(n in 2u64..500, s in 0.0..0.99f64, x in vector(2, 8.0)) {
        let (_, w) = quartic_weights();
        let q0 = linalg::Matrix::from_row_major(2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let base = make_polynomial(2, &params(2.0, 3.0), BaseDiffusion::constant(q0, 0.75)).unwrap();
        let scheme = ApproximationScheme::new(n, base.clone(), w.clone()).unwrap();
        let qn = approx_coefficients(&scheme, s, &x).unwrap();
        prop_assert!(qn.is_symmetric());
        for a in [0.0f64, 0.7, 1.6, 2.9] {
            let xi = [a.cos(), a.sin()];
            prop_assert!(qn.quad_form(&xi) >= base.eta() * (1.0 - 1e-12));
        }
    }

    #[test]
    fn exponents_decrease_in_k(m in 0.0..2.0f64, dp in 0.1..2.0f64, extra in 0.05..2.0f64, k in 3.1..10.0f64, dk in 0.01..5.0f64) {
        let p = (m - 1.0).max(1.0) + dp;
        let alpha = (p + 1.0 - m) / (p - 1.0) + extra;
        let (e1, e2) = envelope_exponents(p, m, alpha, k, 1).unwrap();
        let (f1, f2) = envelope_exponents(p, m, alpha, k + dk, 1).unwrap();
        prop_assert!(f1 < e1 && f2 < e2);
    }

    #[test]
    fn bound_rhs_is_monotone(c in prop::array::uniform8(0.0..3.0f64), z in prop::array::uniform3(0.0..2.0f64), gap in 0.01..1.0f64, big in 0.1..3.0f64, which in 0usize..12, bump in 0.0..1.0f64) {
        let base = BoundInputs { c, k: 4.0, b0_minus_b: gap, sup_zeta1: z[0], int_zeta1: z[1], int_zeta2: z[2], big_c: big };
        let mut up = base;
        match which {
            0..=7 => up.c[which] += bump,
            8 => up.sup_zeta1 += bump,
            9 => up.int_zeta1 += bump,
            10 => up.int_zeta2 += bump,
            _ => up.big_c += bump,
        }
        let lo = general_bound_rhs(&base).unwrap().total;
        let hi = general_bound_rhs(&up).unwrap().total;
        prop_assert!(hi >= lo * (1.0 - 1e-14));
    }

    #[test]
    fn r_table_for_zero_m(alpha in 1.0..4.0f64, p in 1.1..5.0f64, k in 3.0..8.0f64) {
        let r = r_exponents(alpha, 0.0, p, k);
        prop_assert_eq!(r[3], 1.0);
        prop_assert!((r[5] - alpha * k * p / (p + 1.0)).abs() <= 1e-14 * r[5]);
        for j in [0usize, 1, 2, 4, 6, 7] {
            prop_assert_eq!(r[j], 0.0);
        }
    }

    #[test]
    fn tail_fit_exact_on_matching_profile(delta in 0.05..3.0f64, beta in 1.5..4.5f64, c in -3.0..3.0f64) {
        let grid = SpaceGrid::cube(1, (20.0 / delta).powf(1.0 / beta), 321).unwrap();
        let rho: Vec<f64> = grid.axis(0).iter().map(|y| (c - delta * y.abs().powf(beta)).exp()).collect();
        let fit = fit_tail_decay(&grid, &rho, beta, None).unwrap();
        prop_assert!(fit.residual <= 1e-10);
        prop_assert!((fit.delta_hat - delta).abs() <= 1e-9 * delta);
    }

    #[test]
    fn bootstrap_recursion_exact(d in 1usize..5, kn in 11i64..80, num in 1i64..99) {
        let k = ratio(kn, 10);
        // r1 strictly inside (1, (d+2)/(d+1)).
        let width = ratio(1, (d + 1) as i64);
        let r1 = ratio(1, 1) + width * ratio(num, 100);
        let target = ratio(5, 1);
        let dp2 = ratio((d + 2) as i64, 1);
        let limit = (dp2.clone() - k.clone()) / dp2.clone();
        let one = ratio(1, 1);
        prop_assert_eq!(limit.clone() * (one.clone() - k.recip()) + k.recip() - dp2.recip(), limit.clone());
        match bootstrap_exponents_exact(d, &k, &r1, &target) {
            Ok(tr) => {
                let inv: Vec<BigRational> = tr.inv_r.iter().map(|s| s.parse().unwrap()).collect();
                for w in inv.windows(2) {
                    if w[1] > ratio(0, 1) {
                        prop_assert_eq!(w[1].clone(), w[0].clone() * (one.clone() - k.recip()) + k.recip() - dp2.recip());
                    }
                    prop_assert!(w[1] < w[0]);
                }
                prop_assert!(*tr.r.last().unwrap() >= 5.0);
            }
            Err(e) => {
                prop_assert!(limit > ratio(0, 1) && target.recip() <= limit);
                prop_assert!(e.to_string().contains("unreachable"));
            }
        }
    }

    #[test]
    fn moser_converges_below_threshold(nu in 0.1..10.0f64, alpha in 0.1..2.0f64, frac in 0.0..1.0f64) {
        let th = moser_threshold(nu, alpha).unwrap();
        let y0 = (frac * th.y0_star).min(1.0);
        let tr = moser_sequence(nu, alpha, y0, 60).unwrap();
        prop_assert!(tr.converged, "{tr:?}");
        // The threshold is a repelling fixed point of the ratio map, so probe just below it.
        let at_threshold = moser_sequence(nu, alpha, th.y0_star * (1.0 - 1e-9), 60).unwrap();
        prop_assert!(at_threshold.converged);
    }

    #[test]
    fn calculators_match_exact_arithmetic(rn in 101i64..1000, kn in 101i64..1000, nu in 0.1..10.0f64, alpha in 0.1..2.0f64) {
        let (r, k) = (ratio(rn, 100), ratio(kn, 100));
        let exact = (r.clone() * k.clone() / (r.clone() + k.clone() - ratio(1, 1))).to_f64().unwrap();
        let p = hest_exponent(rn as f64 / 100.0, kn as f64 / 100.0).unwrap();
        prop_assert!((p - exact).abs() <= 1e-12 * exact);
        let th = moser_threshold(nu, alpha).unwrap();
        // log-domain recomputation of the threshold
        let ell = (((1.0 + 1.0 / alpha) * 2f64.ln() + 0.5 * nu.ln()).exp()).max(1.0);
        let log_y = -(4.0 * nu).ln() / alpha + 2.0 * ell.ln() / alpha - 4f64.ln() / (alpha * alpha);
        prop_assert!((th.ell_bar - ell).abs() <= 1e-12 * ell);
        prop_assert!((th.y0_star.ln() - log_y).abs() <= 1e-12 * log_y.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn ensembles_ignore_thread_count(seed in any::<u64>(), scheme in prop::sample::select(vec![Scheme::TamedEuler, Scheme::Euler, Scheme::SemiImplicitDrift])) {
        let plan = SimulationPlan {
            field: unit_field(0.0, 3.0, 2),
            start: 0.5,
            horizon: 1.0,
            x0: vec![0.5, -1.0],
            paths: 5000,
            dt: 0.01,
            scheme,
            seed,
        };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| simulate_paths(&plan).unwrap())
        };
        let (a, b) = (run(1), run(3));
        prop_assert_eq!(a.terminal.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.terminal.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn fd_slices_are_nonnegative(theta in 0.0..3.0f64, q in 0.2..2.0f64, x0 in -1.5..1.5f64, gap in 0.05..0.6f64, reflect in any::<bool>()) {
        let field = ornstein_uhlenbeck(1, theta, q);
        let boundary = if reflect { Boundary::Reflecting } else { Boundary::Absorbing };
        let cfg = FdConfig { grid: SpaceGrid::cube(1, 5.0, 201).unwrap(), dt: None, boundary };
        let rho = solve_fokker_planck(&field, 1.0 - gap, 1.0, &[x0], &cfg).unwrap();
        prop_assert!(rho.min_value() >= 0.0);
        let other = solve_fokker_planck(&ornstein_uhlenbeck(1, theta + 0.5, q), 1.0 - gap, 1.0, &[x0], &cfg).unwrap();
        let ab = compare_densities(&rho, &other, Region::everywhere(), false).unwrap();
        let ba = compare_densities(&other, &rho, Region::everywhere(), false).unwrap();
        prop_assert_eq!(ab.sup, ba.sup);
        prop_assert_eq!(ab.l1, ba.l1);
    }
}

#[test]
fn cutoff_slope_product_stays_below_two() {
    let c = make_cutoff();
    assert!(c.slope_bound < 2.0);
    let mut prev = 1.0;
    for i in 0..=3000 {
        let tau = i as f64 * 1e-3;
        let v = c.value(tau);
        assert!(v <= prev + 1e-15 && (0.0..=1.0).contains(&v));
        assert!(c.slope_product(tau).abs() <= c.slope_bound + 1e-15);
        prev = v;
    }
    assert_eq!(c.value(1.0), 1.0);
    assert_eq!(c.value(2.0), 0.0);
}

use fracou::control::{thickness_check, GramianOperator, OmegaShape, OmegaSpec, ThickSetSpec};
use fracou::field::{dft, idft, l2_inner, l2_norm, white_noise, Field, Grid};
use fracou::kalman::analyze_structure;
use fracou::matops::{gramian, mat_exp, psd_sqrt, SquareMatrix};
use fracou::propagator::{build_plan, Mode, Model, PlanOptions};
use nalgebra::DMatrix;
use proptest::prelude::*;
use std::f64::consts::PI;
use std::path::Path;

fn small_matrix(n: usize) -> impl Strategy<Value = SquareMatrix> {
    prop::collection::vec(-3i32..=3, n * n)
        .prop_map(move |v| SquareMatrix::from_row_major(n, &v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>()).unwrap())
}

/// `(B, Q)` with integer `B` and `Q = c c^T` for an integer vector `c`.
fn rank_one_pair() -> impl Strategy<Value = (SquareMatrix, SquareMatrix)> {
    (2usize..=3).prop_flat_map(|n| {
        (small_matrix(n), prop::collection::vec(-2i32..=2, n)).prop_map(move |(b, c)| {
            let q: Vec<f64> = (0..n * n).map(|k| f64::from(c[k / n] * c[k % n])).collect();
            (b, SquareMatrix::from_row_major(n, &q).unwrap())
        })
    })
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn rel_diff(a: &Field, b: &Field) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b).unwrap();
    l2_norm(&d) / l2_norm(b).max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn matrix_exponential_is_a_group(a in (2usize..=4).prop_flat_map(small_matrix), s in 0.0..0.8f64, t in 0.0..0.8f64) {
        let a = a.scaled(0.5);
        let sum = mat_exp(&a, s + t).unwrap();
        let prod = mat_exp(&a, s).unwrap().mul(&mat_exp(&a, t).unwrap()).unwrap();
        prop_assert!(close(prod.as_dmatrix(), sum.as_dmatrix()) <= 1e-12);
        let back = mat_exp(&a, t).unwrap().mul(&mat_exp(&a, -t).unwrap()).unwrap();
        prop_assert!(close(back.as_dmatrix(), &DMatrix::identity(a.dim(), a.dim())) <= 1e-12);
    }

    #[test]
    fn gramian_is_psd_and_nonsingular_iff_kalman((b, q) in rank_one_pair(), t in 0.3..1.5f64) {
        let q = psd_sqrt(&q).unwrap();
        let g = gramian(&b, &q, t, 16).unwrap();
        let lmax = g.max_eigenvalue();
        prop_assert!(g.min_eigenvalue() >= -1e-12 * lmax.max(1.0));
        let ks = analyze_structure(&b, &q, None).unwrap();
        if lmax > 0.0 {
            let conditioning = g.min_eigenvalue() / lmax;
            prop_assert_eq!(conditioning > 1e-12, ks.holds, "lambda_min / lambda_max {}", conditioning);
        } else {
            prop_assert!(!ks.holds);
        }
    }

    #[test]
    fn kalman_projections_are_nested_orthogonal_projections((b, q) in rank_one_pair()) {
        let ks = analyze_structure(&b, &psd_sqrt(&q).unwrap(), None).unwrap();
        prop_assert!(ks.check_invariants().unwrap() <= 1e-10);
        for k in 0..ks.levels() {
            let p = ks.projection(k).as_dmatrix();
            prop_assert!(close(&(p * p), p) <= 1e-10);
            prop_assert!(close(&p.transpose(), p) <= 1e-12);
        }
    }

    #[test]
    fn dft_round_trip_and_plancherel(seed in any::<u64>(), nx in 3u32..6, ny in 2u32..5) {
        let grid = Grid::new(vec![6.0, 3.5], vec![1 << nx, 1 << ny]).unwrap();
        let u = white_noise(&grid, seed);
        let s = dft(&u);
        prop_assert!(rel_diff(&idft(&s), &u) <= 1e-13);
        let energy = s.norm_sq() / (2.0 * PI).powi(2);
        prop_assert!((energy - l2_norm(&u).powi(2)).abs() <= 1e-12 * energy);
    }

    #[test]
    fn normalized_evolution_contracts((b, q) in rank_one_pair(), s in 0.3..2.0f64, t in 0.01..0.6f64, seed in any::<u64>()) {
        let n = b.dim();
        let q = SquareMatrix::from_dmatrix(q.as_dmatrix() + DMatrix::identity(n, n) * 0.1).unwrap();
        let model = Model::new(b.scaled(0.3), &q, s).unwrap();
        let counts = if n == 2 { vec![32, 32] } else { vec![16, 16, 16] };
        let grid = Grid::new(vec![8.0; n], counts).unwrap();
        let plan = build_plan(&model, t, &grid, Mode::Normalized, &PlanOptions::default()).unwrap();
        prop_assert!(plan.decay().iter().all(|&d| d > 0.0 && d <= 1.0));
        let u = white_noise(&grid, seed);
        prop_assert!(l2_norm(&plan.propagate(&u).unwrap()) <= l2_norm(&u) * (1.0 + 1e-8));
    }

    #[test]
    fn normalization_is_a_scalar_change_of_variables(b in small_matrix(2), t in 0.05..0.5f64, seed in any::<u64>()) {
        let b = b.scaled(0.3);
        let model = Model::new(b.clone(), &SquareMatrix::identity(2), 0.75).unwrap();
        let grid = Grid::new(vec![10.0, 10.0], vec![32, 32]).unwrap();
        let u = white_noise(&grid, seed);
        let opts = PlanOptions::default();
        let forward = build_plan(&model, t, &grid, Mode::Forward, &opts).unwrap().propagate(&u).unwrap();
        let normalized = build_plan(&model, t, &grid, Mode::Normalized, &opts).unwrap().propagate(&u).unwrap();
        let expected = forward.scaled((-0.5 * b.trace() * t).exp());
        prop_assert!(rel_diff(&normalized, &expected) <= 1e-12);
    }

    #[test]
    fn growing_a_set_never_thins_it(seed in any::<u64>(), p in 0.1..0.9f64, gamma in 0.05..0.6f64, side in 1.0..4.0f64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(vec![10.0, 10.0], vec![32, 32]).unwrap();
        let ind: Vec<bool> = (0..grid.len()).map(|_| rng.random_bool(p)).collect();
        let grown: Vec<bool> = ind.iter().map(|&b| b || rng.random_bool(0.3)).collect();
        let before = thickness_check(&ThickSetSpec::new(grid.clone(), ind, gamma, vec![side, side]).unwrap());
        let after = thickness_check(&ThickSetSpec::new(grid, grown, gamma, vec![side, side]).unwrap());
        prop_assert!(after.min_fraction >= before.min_fraction);
        prop_assert!(!before.thick || after.thick);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn gramian_operator_is_symmetric_psd_and_dual(s in 0.55..1.5f64, period in 3usize..12, width in 1usize..3, seeds in (any::<u64>(), any::<u64>())) {
        let grid = Grid::new(vec![12.0], vec![128]).unwrap();
        let h = grid.spacing(0);
        let omega = OmegaSpec {
            shape: OmegaShape::Stripes { axis: 0, period: period as f64 * h * 4.0, width: width as f64 * h * 4.0, offset: 0.0 },
            gamma: 0.05,
            a: vec![1.0],
        }
        .build(&grid, Path::new("."))
        .unwrap();
        let lambda = GramianOperator::new(&Model::heat(1, s).unwrap(), 0.5, &omega, 16, &PlanOptions::default()).unwrap();
        let f = white_noise(&grid, seeds.0);
        let g = white_noise(&grid, seeds.1);
        let lf = lambda.apply(&f).unwrap();
        let lg = lambda.apply(&g).unwrap();
        let scale = l2_norm(&lf) * l2_norm(&g) + l2_norm(&f) * l2_norm(&lg);
        prop_assert!((l2_inner(&lf, &g).unwrap() - l2_inner(&f, &lg).unwrap()).norm() <= 1e-12 * scale);
        let quad = l2_inner(&lf, &f).unwrap();
        prop_assert!(quad.re >= -1e-14 * l2_norm(&lf) * l2_norm(&f));
        prop_assert!(quad.im.abs() <= 1e-12 * l2_norm(&lf) * l2_norm(&f));
        let energy = lambda.observed_energy(&f).unwrap();
        prop_assert!((energy - quad.re).abs() <= 1e-6 * energy.max(f64::MIN_POSITIVE));
    }
}

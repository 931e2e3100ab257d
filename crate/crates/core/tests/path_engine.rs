use pathvar::path_engine::{
    cm_norm_sq, ito_integral, make_grid, pi_tau, sample_brownian, CameronMartinPath, Projection, RngStream,
    SamplePath, StreamBlock,
};
use pathvar::stats::mean_se;
use proptest::prelude::*;

#[test]
fn grid_of_four_steps() {
    let g = make_grid(4).unwrap();
    assert_eq!(g.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(g.dt(), 0.25);
    assert!(make_grid(0).is_err());
}

#[test]
fn terminal_moments_and_quadratic_variation() {
    let g = make_grid(64).unwrap();
    let block = StreamBlock::new(11, 0);
    let n = 20_000;
    let mut term = Vec::with_capacity(n);
    let mut sq = Vec::with_capacity(n);
    let mut qv = Vec::with_capacity(n);
    for i in 0..n {
        let p = sample_brownian(&block.stream(i), g, 1);
        let x = p.terminal()[0];
        term.push(x);
        sq.push(x * x);
        qv.push(p.increments().iter().map(|d| d * d).sum::<f64>());
    }
    assert!(mean_se(&term).within(0.0, 3.0, 0.0));
    assert!(mean_se(&sq).within(1.0, 3.0, 0.0));
    assert!(mean_se(&qv).within(1.0, 3.0, 0.0));
}

#[test]
fn ito_of_path_against_itself_is_centered() {
    // E ∫ β dβ = 0 with left-point sums; pathwise it is (β(1)² - Σ Δβ²) / 2.
    let g = make_grid(32).unwrap();
    let block = StreamBlock::new(5, 0);
    let mut vals = Vec::new();
    for i in 0..10_000 {
        let p = sample_brownian(&block.stream(i), g, 1);
        let dot: Vec<f64> = (0..32).map(|k| p.row(k)[0]).collect();
        let u = CameronMartinPath::from_dot(g, 1, dot).unwrap();
        let v = ito_integral(&u, &p).unwrap();
        let b1 = p.terminal()[0];
        let qv: f64 = p.increments().iter().map(|d| d * d).sum();
        assert!((v - 0.5 * (b1 * b1 - qv)).abs() < 1e-12);
        vals.push(v);
    }
    assert!(mean_se(&vals).within(0.0, 3.0, 0.0));
}

#[test]
fn ito_of_constant_is_scaled_endpoint() {
    let g = make_grid(16).unwrap();
    let p = sample_brownian(&RngStream::new(3, 9), g, 2);
    let u = CameronMartinPath::constant(g, &[2.0, -1.0]);
    let v = ito_integral(&u, &p).unwrap();
    let end = p.terminal();
    assert!((v - (2.0 * end[0] - end[1])).abs() < 1e-12);
}

#[test]
fn norm_examples() {
    let g = make_grid(8).unwrap();
    assert_eq!(cm_norm_sq(&CameronMartinPath::constant(g, &[1.0])), 1.0);
    assert_eq!(cm_norm_sq(&CameronMartinPath::zeros(g, 3)), 0.0);
    assert!((cm_norm_sq(&CameronMartinPath::constant(g, &[3.0, 4.0])) - 25.0).abs() < 1e-12);
}

#[test]
fn projection_at_half() {
    let g = make_grid(4).unwrap();
    let u = CameronMartinPath::constant(g, &[1.0]);
    let before = pi_tau(&u, 2, Projection::BeforeTau).unwrap();
    let after = pi_tau(&u, 2, Projection::AfterTau).unwrap();
    assert_eq!(before.dot, vec![1.0, 1.0, 0.0, 0.0]);
    assert_eq!(after.dot, vec![0.0, 0.0, 1.0, 1.0]);
    assert!(after.is_zero_before(2));
    assert_eq!(before.integrate().terminal(), &[0.5]);
}

#[test]
fn same_stream_reproduces_path() {
    let g = make_grid(128).unwrap();
    let a = sample_brownian(&RngStream::new(42, 7), g, 3);
    let b = sample_brownian(&RngStream::new(42, 7), g, 3);
    let c = sample_brownian(&RngStream::new(42, 8), g, 3);
    assert_eq!(a, b);
    assert!(a.sup_distance(&c) > 0.0);
}

proptest! {
    #[test]
    fn projections_sum_to_identity(dot in proptest::collection::vec(-3.0f64..3.0, 16), idx in 0usize..=16) {
        let g = make_grid(16).unwrap();
        let u = CameronMartinPath::from_dot(g, 1, dot).unwrap();
        let a = pi_tau(&u, idx, Projection::BeforeTau).unwrap();
        let b = pi_tau(&u, idx, Projection::AfterTau).unwrap();
        let s = a.add(&b).unwrap();
        prop_assert_eq!(&s.dot, &u.dot);
        prop_assert!((cm_norm_sq(&a) + cm_norm_sq(&b) - cm_norm_sq(&u)).abs() < 1e-9);
    }

    #[test]
    fn increments_round_trip(incs in proptest::collection::vec(-2.0f64..2.0, 24)) {
        let g = make_grid(12).unwrap();
        let p = SamplePath::from_increments(g, &[0.5, -1.0], &incs);
        let back = p.increments();
        for (x, y) in back.iter().zip(&incs) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn ito_isometry() {
    // E (∫ h dβ)² = |h|²_H for deterministic h.
    let g = make_grid(32).unwrap();
    let dot: Vec<f64> = (0..32).map(|k| (k as f64 * 0.2).sin() + 0.5).collect();
    let u = CameronMartinPath::from_dot(g, 1, dot).unwrap();
    let block = StreamBlock::new(21, 0);
    let sq: Vec<f64> = (0..20_000)
        .map(|i| ito_integral(&u, &sample_brownian(&block.stream(i), g, 1)).unwrap().powi(2))
        .collect();
    assert!(mean_se(&sq).within(cm_norm_sq(&u), 3.0, 0.0));
}

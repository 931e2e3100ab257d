use pathvar::conditioning::{bayes_conditional, binned_means, Partition, StoppingRule};
use pathvar::functional::Functional;
use pathvar::models::{MeasureModel, Model};
use pathvar::path_engine::{make_grid, sample_brownian, StreamBlock};
use pathvar::policy::DriftPolicy;
use pathvar::variational::{direct_value, duality_gap, entropy_form_value, objective};

fn wiener() -> Model {
    Model::new(MeasureModel::Wiener { dim: 1 }).unwrap()
}

fn linear() -> Functional {
    Functional::TerminalLinear { weights: vec![1.0] }
}

#[test]
fn stopping_rules_on_a_path() {
    let g = make_grid(64).unwrap();
    let p = sample_brownian(&StreamBlock::new(1, 0).stream(0), g, 1);
    assert_eq!(StoppingRule::Deterministic { t: 0.5 }.evaluate(&p, None).unwrap(), 32);
    assert_eq!(StoppingRule::degenerate().evaluate(&p, None).unwrap(), 0);
    let k = StoppingRule::FirstExit { radius: 0.3 }.evaluate(&p, None).unwrap();
    assert!(k == 64 || p.row(k)[0].abs() >= 0.3);
    assert!((0..k).all(|j| p.row(j)[0].abs() < 0.3));
}

#[test]
fn martingale_conditional_mean() {
    // E[β(1) | β(½)] = β(½), compared cellwise with the cell average of β(½).
    let g = make_grid(32).unwrap();
    let block = StreamBlock::new(2, 0);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for i in 0..20_000 {
        let p = sample_brownian(&block.stream(i), g, 1);
        x.push(p.row(16)[0]);
        y.push(p.terminal()[0]);
    }
    let part = Partition::quantiles(&x, 10);
    let got = binned_means(&x, &y, &part).unwrap();
    let want = binned_means(&x, &x, &part).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!((a.estimate - b.estimate).abs() <= 4.0 * a.se, "{a:?} {b:?}");
    }
}

#[test]
fn tilted_conditional_mean() {
    // Under dQ = e^{β(1) - ½} dP, E_Q[β(1) | β(½)] = β(½) + ½.
    let g = make_grid(32).unwrap();
    let block = StreamBlock::new(3, 0);
    let (mut x, mut y, mut l) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..20_000 {
        let p = sample_brownian(&block.stream(i), g, 1);
        x.push(p.row(16)[0]);
        y.push(p.terminal()[0]);
        l.push((p.terminal()[0] - 0.5).exp());
    }
    let part = Partition::quantiles(&x, 8);
    let got = bayes_conditional(&x, &y, &l, &part).unwrap();
    let shifted: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
    let want = bayes_conditional(&x, &shifted, &l, &part).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!((a.estimate - b.estimate).abs() <= 4.0 * a.se, "{a:?} {b:?}");
    }
}

#[test]
fn unit_density_matches_plain_binning() {
    let xs: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
    let fs: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
    let part = Partition::quantiles(&xs, 5);
    let a = binned_means(&xs, &fs, &part).unwrap();
    let b = bayes_conditional(&xs, &fs, &vec![1.0; xs.len()], &part).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert!((p.estimate - q.estimate).abs() < 1e-12);
    }
}

#[test]
fn constant_functional_values() {
    let g = make_grid(16).unwrap();
    let f = Functional::Constant { value: 2.5 };
    let d = direct_value(&wiener(), &f, &StoppingRule::degenerate(), 1, g, StreamBlock::new(1, 0), 1000).unwrap();
    assert!((d.overall.mean - 2.5).abs() < 1e-12);
    let j = objective(&wiener(), &f, &DriftPolicy::Zero, &StoppingRule::degenerate(), 1, g, StreamBlock::new(1, 0), 1000)
        .unwrap();
    assert!((j.overall.mean - 2.5).abs() < 1e-12);
}

#[test]
fn linear_terminal_value_is_attained() {
    // -log E e^{-β(1)} = -½, attained by u̇ ≡ -1.
    let g = make_grid(32).unwrap();
    let tau = StoppingRule::degenerate();
    let d = direct_value(&wiener(), &linear(), &tau, 1, g, StreamBlock::new(4, 0), 20_000).unwrap();
    assert!(d.overall.within(-0.5, 3.0, 0.0));
    let opt = DriftPolicy::constant(&[-1.0]);
    let j = objective(&wiener(), &linear(), &opt, &tau, 1, g, StreamBlock::new(5, 0), 20_000).unwrap();
    assert!(j.overall.within(-0.5, 3.0, 0.0));
}

#[test]
fn weak_duality_for_suboptimal_drift() {
    let g = make_grid(32).unwrap();
    let tau = StoppingRule::Deterministic { t: 0.5 };
    let r = duality_gap(
        &wiener(),
        &linear(),
        &DriftPolicy::constant(&[0.5]).vanish_before(tau.clone()),
        &tau,
        5,
        g,
        StreamBlock::new(6, 0),
        20_000,
    )
    .unwrap();
    assert!(r.weak_duality_holds(4.0));
    // Given β(½) = x: J = x + ¼ + 1/16 and the conditional value is x - ¼.
    // Averaging e^{-x} over a cell only lowers the cell value, so 0.5625 is a floor.
    for c in r.cells.iter().filter(|c| !c.flagged) {
        assert!(c.gap >= 0.5625 - 4.0 * c.se, "{c:?}");
    }
    // Overall the objective is compared with the unconditional value -½.
    assert!(r.gap.within(0.8125, 4.0, 0.0), "{:?}", r.gap);
}

#[test]
fn entropy_form_agrees_with_objective() {
    let g = make_grid(32).unwrap();
    let tau = StoppingRule::degenerate();
    // dθ/dν = ρ(-δ_β v) = e^{-β(1) - ½} ∝ e^{-f} for v ≡ 1.
    let v = DriftPolicy::constant(&[1.0]);
    let r = entropy_form_value(&wiener(), &linear(), &v, &tau, 1, g, StreamBlock::new(7, 0), 20_000).unwrap();
    assert!(r.value.within(-0.5, 4.0, 0.0));
    assert!(r.excess.within(0.0, 4.0, 0.0));
}

use memport::fixtures;
use memport::simulate::{
    mc_cameron_martin, mc_growth_rate, mc_ldp_probability, CmComponent, CmProblem, NoiseSimulator, PathConfig,
    WealthSimulator, WealthStrategy, XiScheme,
};
use memport::strategy::{benchmark_threshold, nearly_optimal_sequence, rate_function_i};
use nalgebra::DVector;

#[test]
fn merton_growth_rate_from_simulation() {
    let (params, curves) = fixtures::merton(2, 0.01, &[0.3, 0.2]).unwrap();
    let alpha = 0.5;
    let (t, x) = (20.0, 2.0f64);
    let sigma_t_inv = curves.sigma(0.0).transpose().try_inverse().unwrap();
    let lam = DVector::from_column_slice(&[0.3, 0.2]);
    let pi = &sigma_t_inv * &lam / (1.0 - alpha);
    let merton = move |_t: f64, _xi: &[f64]| Ok(pi.clone());
    let sim = NoiseSimulator::new(&params, &PathConfig::new(t, 1 << 10, 100_000, 8)).unwrap();
    let out = WealthSimulator::new(&sim, &curves, x).unwrap().run(&[WealthStrategy::Custom(&merton)]).unwrap();
    let g = mc_growth_rate(&out[0].log_wealth, alpha, t, 200, 0.95, 3).unwrap();
    let expected = 0.01 + (0.09 + 0.04) / (2.0 * (1.0 - alpha)) + x.ln() / t;
    assert!(g.ci_low <= expected && expected <= g.ci_high, "{g:?} vs {expected}");
    assert!((g.estimate - expected).abs() <= 3.0 * g.std_error);
    assert!(g.jensen_bias < 0.0);
}

#[test]
fn log_optimal_outperforms_thresholds_below_benchmark() {
    let (params, curves) = fixtures::two_asset();
    let c_bar = benchmark_threshold(&params, &curves).unwrap();
    let t = 100.0;
    let cfg = PathConfig::new(t, 2000, 2000, 21).with_scheme(XiScheme::Exact);
    let sim = NoiseSimulator::new(&params, &cfg).unwrap();
    let out = WealthSimulator::new(&sim, &curves, 1.0).unwrap().run(&[WealthStrategy::LogOptimal]).unwrap();
    let e = mc_ldp_probability(&out[0].log_wealth, c_bar - 0.1, t).unwrap();
    assert!(e.probability > 0.99 && e.rate > -1e-4, "{e:?}");
    let lower = mc_ldp_probability(&out[0].log_wealth, -50.0, t).unwrap();
    assert_eq!((lower.probability, lower.rate), (1.0, 0.0));
}

#[test]
fn nearly_optimal_rate_above_benchmark_approaches_i() {
    let (params, curves) = fixtures::two_asset();
    let c_bar = benchmark_threshold(&params, &curves).unwrap();
    let c = c_bar + 0.02;
    let (_, policy) = nearly_optimal_sequence(&params, &curves, c, 100).unwrap();
    let t = 100.0;
    let cfg = PathConfig::new(t, 2000, 20_000, 22).with_scheme(XiScheme::Exact);
    let sim = NoiseSimulator::new(&params, &cfg).unwrap();
    let out = WealthSimulator::new(&sim, &curves, 1.0)
        .unwrap()
        .with_checkpoints(&[25.0])
        .unwrap()
        .run(&[WealthStrategy::Stationary(&policy)])
        .unwrap();
    let i_c = rate_function_i(&params, &curves, c).unwrap().rate;
    let late = mc_ldp_probability(&out[0].log_wealth, c, t).unwrap();
    let early = mc_ldp_probability(&out[0].checkpoints[0].log_wealth, c, 25.0).unwrap();
    assert!(late.warning.is_none() && early.warning.is_none());
    assert!(late.rate <= 0.0 && i_c < 0.0);
    // the finite-horizon shortfall below I(c) shrinks like T^{-1/2}
    let (gap_early, gap_late) = (i_c - early.rate, i_c - late.rate);
    assert!(gap_late > 0.0 && gap_late < 0.75 * gap_early, "gaps {gap_early} -> {gap_late}");
}

#[test]
fn cameron_martin_step_halving() {
    let prob = CmProblem {
        components: vec![CmComponent::constant(0.3, -0.5, 0.7, 0.8, 0.2)],
        start: 0.0,
        horizon: 1.5,
        xi_start: vec![0.4],
    };
    let coarse = mc_cameron_martin(&prob, 384, 100_000, 9).unwrap();
    let fine = mc_cameron_martin(&prob, 768, 100_000, 9).unwrap();
    assert!((coarse.mean - fine.mean).abs() < coarse.std_error, "{coarse:?} {fine:?}");
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (params, curves) = fixtures::two_asset();
    let cfg = PathConfig::new(2.0, 128, 257, 5).with_scheme(XiScheme::Exact);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let sim = NoiseSimulator::new(&params, &cfg).unwrap();
            let out = WealthSimulator::new(&sim, &curves, 1.0).unwrap().run(&[WealthStrategy::LogOptimal]).unwrap();
            let g = mc_growth_rate(&out[0].log_wealth, 0.3, 2.0, 50, 0.9, 1).unwrap();
            serde_json::to_string(&g).unwrap()
        })
    };
    assert_eq!(run(1), run(3));
}

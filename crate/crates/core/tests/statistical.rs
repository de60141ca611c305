//! Large-sample checks of the simulator, the scaled score, forecast metrics
//! and standard errors.

use tvtp::dynamics::gas_score;
use tvtp::estimate::SeOutcome;
use tvtp::evaluation::forecast_metrics;
use tvtp::mc::{run_scenario, McScenario};
use tvtp::{
    dgp_preset, estimate, run_filter, simulate, standard_errors, Coefficients, Dataset, Dynamics, ModelSpec,
    Parameterization, Params, VarianceStructure,
};

#[test]
fn dgp1_transition_frequencies_match_the_design() {
    let (spec, params) = dgp_preset(1).unwrap();
    let sim = simulate(&spec, &params, 10_000, 100, 11, None).unwrap();
    let mut counts = [[0usize; 2]; 2];
    for w in sim.z.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    let stay = |i: usize| counts[i][i] as f64 / (counts[i][0] + counts[i][1]) as f64;
    assert!((stay(0) - 0.80).abs() < 0.05, "{}", stay(0));
    assert!((stay(1) - 0.90).abs() < 0.05, "{}", stay(1));
}

/// The conditional Fisher matrix of a K-regime model has rank at most K - 1,
/// so the whitened score has unit variance along that range and none
/// elsewhere: its expected squared length equals the rank.
#[test]
fn scaled_score_has_unit_variance_on_the_fisher_range() {
    let (spec, params) = dgp_preset(4).unwrap();
    let sim = simulate(&spec, &params, 10_000, 200, 17, None).unwrap();
    let data = sim.dataset("dgp4");
    let out = run_filter(&data, &spec, &params, 0).unwrap();
    let uniform = vec![0.5; 2];
    let mut sum_sq = 0.0;
    let mut per_element = [0.0; 2];
    for t in 0..data.len() {
        let prev = if t == 0 { &uniform } else { &out.xi_filt[t - 1] };
        let sc = gas_score(data.y[t], prev, &out.f_path[t], &params, &spec).unwrap();
        sum_sq += sc.s.iter().map(|v| v * v).sum::<f64>();
        for (acc, v) in per_element.iter_mut().zip(&sc.s) {
            *acc += v * v;
        }
    }
    let n = data.len() as f64;
    let rank = (spec.k - 1) as f64;
    assert!((sum_sq / n - rank).abs() < 0.15, "E|s|^2 = {}", sum_sq / n);
    // The two diagonal logits load with opposite signs on a single direction.
    for v in per_element {
        assert!((v / n - 0.5).abs() < 0.15, "{}", v / n);
    }
}

#[test]
fn standardized_absolute_error_of_a_gaussian() {
    let spec = ModelSpec::new(2, Parameterization::Diagonal, VarianceStructure::Common, Dynamics::Constant).unwrap();
    let params = Params {
        mu: vec![0.3, 0.3],
        sigma2: vec![2.0],
        f0: vec![1.0, 1.0],
        coef: Coefficients::None,
    };
    let sim = simulate(&spec, &params, 20_000, 0, 5, None).unwrap();
    let out = run_filter(&sim.dataset("g"), &spec, &params, 0).unwrap();
    let m = forecast_metrics(&out, &sim.y, 0).unwrap();
    let expected = (2.0 / std::f64::consts::PI).sqrt();
    assert!((m.masfe - expected).abs() < 0.02, "{}", m.masfe);
    assert!((m.mssfe - 1.0).abs() < 0.05, "{}", m.mssfe);
}

#[test]
fn symmetric_design_gives_symmetric_standard_errors() {
    let spec = ModelSpec::new(2, Parameterization::Diagonal, VarianceStructure::Common, Dynamics::Constant).unwrap();
    let stay = (0.85f64 / 0.15).ln();
    let truth = Params {
        mu: vec![-1.0, 1.0],
        sigma2: vec![0.5],
        f0: vec![stay, stay],
        coef: Coefficients::None,
    };
    let sim = simulate(&spec, &truth, 4_000, 100, 23, None).unwrap();
    let data: Dataset = sim.dataset("sym");
    let fit = estimate(&data, &spec, 4, 3, 10).unwrap();
    assert!(fit.converged);
    let SeOutcome::Available(se) = standard_errors(&data, &spec, &fit.params_hat, 10).unwrap() else {
        panic!("Hessian not positive definite");
    };
    let (a, b) = (se.se.mu[0], se.se.mu[1]);
    assert!((a / b - 1.0).abs() < 0.10, "{a} vs {b}");
}

#[test]
fn dgp1_forecast_and_filtered_probability_levels() {
    let s = McScenario {
        replications: 50,
        ..McScenario::paper(1, 500)
    };
    let res = run_scenario(&s).unwrap();
    let f = res.tables.forecast_for(1, 500, Dynamics::Constant).unwrap();
    assert!((f.mafe - 0.795).abs() < 0.03, "MAFE {}", f.mafe);
    // Squared error at the true parameters over a long path; the fitted
    // model cannot beat it by more than sampling noise.
    let (spec, truth) = dgp_preset(1).unwrap();
    let long = simulate(&spec, &truth, 200_000, 100, 99, None).unwrap();
    let out = run_filter(&long.dataset("long"), &spec, &truth, 0).unwrap();
    let oracle = forecast_metrics(&out, &long.y, 0).unwrap();
    assert!((f.msfe - oracle.msfe).abs() < 0.03, "MSFE {} vs {}", f.msfe, oracle.msfe);
    assert!((f.mafe - oracle.mafe).abs() < 0.03, "MAFE {} vs {}", f.mafe, oracle.mafe);
    let p = res.tables.filtprob_for(1, 500).unwrap();
    assert!(p.mse < 0.01, "filtered-probability MSE {}", p.mse);
}

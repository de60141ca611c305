//! Independent oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use tvtp::{Coefficients, ModelSpec, Parameterization, Params};

/// Transition matrix from the transition parameters, written out directly.
pub fn oracle_matrix(spec: &ModelSpec, f: &[f64]) -> Vec<Vec<f64>> {
    let k = spec.k;
    match spec.parameterization {
        Parameterization::Diagonal => {
            let stay = |v: f64| 1.0 / (1.0 + (-v).exp());
            vec![vec![stay(f[0]), 1.0 - stay(f[0])], vec![1.0 - stay(f[1]), stay(f[1])]]
        }
        Parameterization::OffDiagonal => (0..k)
            .map(|i| {
                let logits: Vec<f64> = (0..k)
                    .map(|j| match j.cmp(&i) {
                        std::cmp::Ordering::Equal => 0.0,
                        std::cmp::Ordering::Less => f[i * (k - 1) + j],
                        std::cmp::Ordering::Greater => f[i * (k - 1) + j - 1],
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                logits.iter().map(|l| l.exp() / z).collect()
            })
            .collect(),
    }
}

pub fn normal_pdf(y: f64, mu: f64, var: f64) -> f64 {
    (-(y - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Marginal density of `y[..n]` by summing over all `K^(n+1)` paths started
/// from a uniform regime.
pub fn brute_force_density(spec: &ModelSpec, p: &Params, y: &[f64], x: Option<&[f64]>, n: usize) -> f64 {
    let k = spec.k;
    let matrices: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|t| {
            let f: Vec<f64> = match (&p.coef, t) {
                (Coefficients::Lagged { theta }, t) if t > 0 => {
                    p.f0.iter().zip(theta).map(|(a, b)| a + b * y[t - 1]).collect()
                }
                (Coefficients::Exogenous { gamma }, t) if t > 0 => {
                    let x = x.unwrap();
                    p.f0.iter().zip(gamma).map(|(a, b)| a + b * x[t - 1]).collect()
                }
                _ => p.f0.clone(),
            };
            oracle_matrix(spec, &f)
        })
        .collect();
    let paths = k.pow(n as u32 + 1);
    let mut total = 0.0;
    for code in 0..paths {
        let mut c = code;
        let mut z = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            z.push(c % k);
            c /= k;
        }
        let mut w = 1.0 / k as f64;
        for t in 0..n {
            w *= matrices[t][z[t]][z[t + 1]] * normal_pdf(y[t], p.mu[z[t + 1]], p.sigma2_of(z[t + 1]));
        }
        total += w;
    }
    total
}

/// One-step predictive log density of `y` given the previous filtered
/// distribution and the transition parameters `f`.
pub fn log_predictive(spec: &ModelSpec, p: &Params, xi_prev: &[f64], f: &[f64], y: f64) -> f64 {
    let m = oracle_matrix(spec, f);
    (0..spec.k)
        .map(|j| {
            let w: f64 = (0..spec.k).map(|i| xi_prev[i] * m[i][j]).sum();
            w * normal_pdf(y, p.mu[j], p.sigma2_of(j))
        })
        .sum::<f64>()
        .ln()
}

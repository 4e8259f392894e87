//! Quick invariant checks behind `slim selftest`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::critvals::{rs_critical_value, TABLE_ALPHAS, TABLE_MAX_ELL};
use crate::dist::{chi2_cdf, chi2_quantile};
use crate::error::Result;
use crate::harness::{run_experiment, ExperimentConfig};
use crate::inference::RandomScalingState;
use crate::model::easi::generate_easi;
use crate::model::linear_iv::generate_linear_iv;
use crate::model::{jacobian_fd_error, EasiDgpConfig, EasiModel, LinearIvDesign, LinearIvModel};
use crate::oracle::{linear_iv_gmm, solve_full_gmm};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Relative error of the recursive `V_t` against the double sum, worst over
/// random walks and all prefixes.
pub fn rs_recursion_error(streams: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..streams {
        let len = rng.random_range(1..=500);
        let ell = rng.random_range(1..=3);
        let d = ell + 1;
        let r = DMatrix::from_fn(ell, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = DVector::<f64>::zeros(d);
        let mut sum = DVector::<f64>::zeros(d);
        let mut bars: Vec<DVector<f64>> = Vec::with_capacity(len);
        let mut st = RandomScalingState::new(r.clone());
        for t in 1..=len {
            for v in x.iter_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            sum += &x;
            let bar = &sum / t as f64;
            st.update(&bar);
            bars.push(bar);
            let last = &r * &bars[t - 1];
            let mut direct = DMatrix::zeros(ell, ell);
            for (s, b) in bars.iter().enumerate() {
                let dev = &r * b - &last;
                direct += &dev * dev.transpose() * ((s + 1) as f64).powi(2);
            }
            direct /= (t as f64).powi(2);
            let scale = direct.amax().max(f64::MIN_POSITIVE);
            let err = (st.v() - &direct).amax();
            if direct.amax() > 0.0 {
                worst = worst.max(err / scale);
            } else {
                worst = worst.max(err);
            }
        }
    }
    worst
}

/// Worst finite-difference Jacobian error of both built-in models over
/// `points` random records and parameters.
pub fn jacobian_check(points: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let design = LinearIvDesign::default();
    let iv = LinearIvModel::from_design(&design)?;
    let data = generate_linear_iv(&design, points, seed)?;
    for i in 0..points {
        let theta = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        worst = worst.max(jacobian_fd_error(&iv, data.row(i), &theta, 1e-6)?);
    }
    let cfg = EasiDgpConfig::reduced_default();
    let easi = EasiModel::from_config(&cfg)?;
    let data = generate_easi(&cfg, points, seed)?;
    let truth = cfg.theta_true()?;
    for i in 0..points {
        let theta = DVector::from_iterator(truth.len(), truth.iter().map(|v| v + rng.random_range(-0.05..0.05)));
        worst = worst.max(jacobian_fd_error(&easi, data.row(i), &theta, 1e-6)?);
    }
    Ok(worst)
}

const TINY_RUN: &str = r#"
seed = 1
n = 1000
reps = 4
pipeline = "second_order"
N = 300
T = 600
B_g = 8
B_G0 = 8
M_MB = 100
gamma0 = 0.1
inference = ["random_scaling", "plugin"]
jtests = ["debiased", "online"]

[dgp]
kind = "linear_iv"
theta_o = [1.0, -0.5]
d_g = 4
"#;

pub fn run_selftest() -> Vec<Check> {
    vec![
        check("random-scaling recursion matches double sum", Ok({
            let e = rs_recursion_error(20, 7);
            (e <= 1e-10, format!("max relative error {e:.2e}"))
        })),
        check("analytic Jacobians match finite differences", jacobian_check(20, 3).map(|e| {
            (e <= 1e-5, format!("max relative error {e:.2e}"))
        })),
        check("Gauss-Newton reaches closed-form linear GMM", (|| {
            let design = LinearIvDesign::default();
            let model = LinearIvModel::from_design(&design)?;
            let data = generate_linear_iv(&design, 2000, 1)?;
            let w = DMatrix::identity(4, 4);
            let closed = linear_iv_gmm(&model, &data, &w)?;
            let r = solve_full_gmm(&model, &data, &w, &DVector::zeros(2), 50, 1e-12)?;
            let e = (&r.theta_hat - &closed).amax();
            Ok((e <= 1e-10, format!("max difference {e:.2e}")))
        })()),
        check("chi-square quantile inverts the cdf", (|| {
            let mut worst: f64 = 0.0;
            for df in [1.0, 2.0, 5.0, 24.0] {
                for p in [0.01, 0.5, 0.95, 0.999] {
                    worst = worst.max((chi2_cdf(chi2_quantile(p, df)?, df) - p).abs());
                }
            }
            Ok((worst <= 1e-9, format!("max cdf error {worst:.2e}")))
        })()),
        check("critical-value table is complete and monotone", (|| {
            let mut prev = 0.0;
            for ell in 1..=TABLE_MAX_ELL {
                let cvs = TABLE_ALPHAS
                    .iter()
                    .map(|&a| rs_critical_value(ell, a))
                    .collect::<Result<Vec<_>>>()?;
                if !(cvs[0] > cvs[1] && cvs[1] > cvs[2] && cvs[1] > prev) {
                    return Ok((false, format!("not monotone at ell = {ell}")));
                }
                prev = cvs[1];
            }
            Ok((true, format!("ell = 1..{TABLE_MAX_ELL}")))
        })()),
        check("summaries do not depend on worker count", (|| {
            let one = ExperimentConfig::from_toml_str(TINY_RUN)?;
            let mut two = one.clone();
            two.parallel_workers = 2;
            let a = run_experiment(&one, None)?;
            let b = run_experiment(&two, None)?;
            let same = a.summary == b.summary && a.rep_rows == b.rep_rows;
            Ok((same, format!("{} summary rows", a.summary.len())))
        })()),
    ]
}

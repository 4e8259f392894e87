//! Random-scaling and plug-in inference for linear restrictions `Rθ = c`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::critvals::rs_critical_value;
use crate::dist::{chi2_quantile, normal_quantile};
use crate::engine::{Observation, Observer};
use crate::error::{Result, SlimError};
use crate::linalg::{pinv_sym, singular_value_ratio, solve_spd, symmetrize, CompensatedSum};
use crate::model::{sample_moments, Dataset, MomentModel};
use crate::scalar::Scalar;

/// Smallest accepted ratio of singular values of `R`.
pub const RANK_TOL: f64 = 1e-10;
/// Condition number above which `V` triggers a warning.
pub const CONDITION_WARN: f64 = 1e12;

/// `H₀: Rθ = c` with `R` of full row rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<T: Scalar> {
    r: DMatrix<T>,
    c: DVector<T>,
}

impl<T: Scalar> Hypothesis<T> {
    pub fn new(r: DMatrix<T>, c: DVector<T>) -> Result<Self> {
        if r.nrows() == 0 || r.nrows() > r.ncols() {
            return Err(SlimError::Inference(format!(
                "restriction matrix must have 1 <= rows <= d, got {}x{}",
                r.nrows(),
                r.ncols()
            )));
        }
        if c.len() != r.nrows() {
            return Err(SlimError::dimension("restriction constants", r.nrows(), c.len()));
        }
        if singular_value_ratio(&r).as_f64() <= RANK_TOL {
            return Err(SlimError::Inference("restriction matrix is rank deficient".into()));
        }
        Ok(Self { r, c })
    }

    /// `θ_k = value`.
    pub fn coordinate(d: usize, k: usize, value: T) -> Result<Self> {
        if k >= d {
            return Err(SlimError::Inference(format!("coordinate {k} out of range for d = {d}")));
        }
        let mut r = DMatrix::zeros(1, d);
        r[(0, k)] = T::one();
        Self::new(r, DVector::from_element(1, value))
    }

    pub fn r(&self) -> &DMatrix<T> {
        &self.r
    }

    pub fn c(&self) -> &DVector<T> {
        &self.c
    }

    /// Number of restrictions `ℓ`.
    pub fn rank(&self) -> usize {
        self.r.nrows()
    }
}

/// Recursive accumulators `A_t(R)`, `b_t(R)` behind `V_t(R)`.
///
/// `A_t` grows like `t³`, so both accumulators use compensated summation.
#[derive(Debug, Clone)]
pub struct RandomScalingState<T: Scalar> {
    r: DMatrix<T>,
    a: CompensatedSum<T>,
    b: CompensatedSum<T>,
    t: usize,
    r_theta_bar: DVector<T>,
}

impl<T: Scalar> RandomScalingState<T> {
    pub fn new(r: DMatrix<T>) -> Self {
        let ell = r.nrows();
        Self {
            r,
            a: CompensatedSum::zeros(ell * ell),
            b: CompensatedSum::zeros(ell),
            t: 0,
            r_theta_bar: DVector::zeros(ell),
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn r_theta_bar(&self) -> &DVector<T> {
        &self.r_theta_bar
    }

    /// Folds in `θ̄_t` for the next `t`.
    pub fn update(&mut self, theta_bar: &DVector<T>) {
        self.t += 1;
        let ell = self.r.nrows();
        let v = &self.r * theta_bar;
        let w = T::from_count(self.t) * T::from_count(self.t);
        for i in 0..ell {
            self.b.add_at(i, w * v[i]);
            for j in 0..ell {
                self.a.add_at(i * ell + j, w * v[i] * v[j]);
            }
        }
        self.r_theta_bar = v;
    }

    /// `V_t(R) = t⁻²(A − vb' − bv' + vv' Σs²)` with `v = Rθ̄_t`.
    pub fn v(&self) -> DMatrix<T> {
        let ell = self.r.nrows();
        if self.t == 0 {
            return DMatrix::zeros(ell, ell);
        }
        let t = T::from_count(self.t);
        let sum_sq = t * (t + T::one()) * (t + t + T::one()) / T::lit(6.0);
        let v = &self.r_theta_bar;
        let b = DVector::from_vec(self.b.values());
        let a = DMatrix::from_row_slice(ell, ell, &self.a.values());
        let m = a - v * b.transpose() - &b * v.transpose() + v * v.transpose() * sum_sq;
        symmetrize(&(m / (t * t)))
    }
}

impl<T: Scalar> Observer<T> for RandomScalingState<T> {
    fn observe(&mut self, obs: &Observation<'_, T>) {
        self.update(obs.theta_bar);
    }
}

/// How the random-scaling statistic is deflated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// `τ_n = (n⁻¹ + (N B_g)⁻¹)⁻¹`: sampling and algorithmic uncertainty.
    RandomScalingSampling,
    /// `τ = N B_g`: the data are held fixed.
    RandomScalingFixed,
    Plugin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub statistic: f64,
    pub critical_value: f64,
    pub reject: bool,
    /// Confidence interval for `Rθ` when `ℓ = 1`.
    pub ci: Option<(f64, f64)>,
    pub scaling_factor: f64,
    pub mode: InferenceMode,
}

/// `τ_n = (n⁻¹ + (N_eff B_g)⁻¹)⁻¹`.
pub fn tau_n(n: usize, n_eff: usize, b_g: usize) -> f64 {
    1.0 / (1.0 / n as f64 + 1.0 / (n_eff as f64 * b_g as f64))
}

fn quadratic_form<T: Scalar>(m: &DMatrix<T>, u: &DVector<T>) -> Result<f64> {
    let (x, cond) = solve_spd(m, u)
        .map_err(|_| SlimError::Inference("variance matrix is singular; run more iterations".into()))?;
    if cond.as_f64() > CONDITION_WARN {
        log::warn!("variance matrix is ill-conditioned (condition number {:.3e})", cond.as_f64());
    }
    Ok(u.dot(&x).as_f64())
}

/// Random-scaling Wald test at level `alpha`.
///
/// `n_eff` is `N` after the first stage and `T − N` after refinement.
#[allow(clippy::too_many_arguments)]
pub fn rs_wald<T: Scalar>(
    state: &RandomScalingState<T>,
    theta_bar: &DVector<T>,
    hyp: &Hypothesis<T>,
    n: usize,
    n_eff: usize,
    b_g: usize,
    alpha: f64,
    mode: InferenceMode,
) -> Result<InferenceResult> {
    if n_eff == 0 || b_g == 0 || n == 0 {
        return Err(SlimError::Inference("n, N and B_g must be positive".into()));
    }
    let tau = match mode {
        InferenceMode::RandomScalingSampling => tau_n(n, n_eff, b_g),
        InferenceMode::RandomScalingFixed => n_eff as f64 * b_g as f64,
        InferenceMode::Plugin => {
            return Err(SlimError::Inference("plug-in mode is not a random-scaling mode".into()))
        }
    };
    let bv = state.v() * T::from_count(b_g);
    let u = hyp.r() * theta_bar - hyp.c();
    let statistic = if u.iter().all(|x| *x == T::zero()) {
        0.0
    } else {
        tau * quadratic_form(&bv, &u)?
    };
    let ell = hyp.rank();
    let critical_value = rs_critical_value(ell, alpha)?;
    let ci = (ell == 1).then(|| {
        let centre = (hyp.r() * theta_bar)[0].as_f64();
        let half = critical_value.sqrt() * (bv[(0, 0)].as_f64() / tau).sqrt();
        (centre - half, centre + half)
    });
    Ok(InferenceResult {
        statistic,
        critical_value,
        reject: statistic > critical_value,
        ci,
        scaling_factor: tau,
        mode,
    })
}

/// Plug-in Wald test after refinement, using full-sample `Φ_n(θ̄)` and
/// `W_n(θ̄) = (n⁻¹ Σ g g')†`, with a `χ²_ℓ` reference and a normal CI.
#[allow(clippy::too_many_arguments)]
pub fn plugin_wald<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    theta_bar: &DVector<T>,
    hyp: &Hypothesis<T>,
    t_minus_n: usize,
    b_g: usize,
    alpha: f64,
) -> Result<InferenceResult> {
    model.check_dataset(data)?;
    let n = data.n();
    if t_minus_n == 0 || b_g == 0 {
        return Err(SlimError::Inference("T - N and B_g must be positive".into()));
    }
    let full = sample_moments(model, data, theta_bar, None)?;
    let w = pinv_sym(&symmetrize(&full.second_moment)).matrix;
    let bread = symmetrize(&(full.jac_bar.transpose() * &w * &full.jac_bar));
    let inv = pinv_sym(&bread);
    if inv.rank == 0 {
        return Err(SlimError::Inference("plug-in bread matrix is zero".into()));
    }
    let var = symmetrize(&(hyp.r() * &inv.matrix * hyp.r().transpose()));
    let factor = 1.0 / tau_n(n, t_minus_n, b_g);
    let u = hyp.r() * theta_bar - hyp.c();
    let statistic = if u.iter().all(|x| *x == T::zero()) {
        0.0
    } else {
        quadratic_form(&var, &u)? / factor
    };
    let ell = hyp.rank();
    let critical_value = chi2_quantile(1.0 - alpha, ell as f64)?;
    let ci = (ell == 1).then(|| {
        let centre = (hyp.r() * theta_bar)[0].as_f64();
        let half = normal_quantile(1.0 - alpha / 2.0) * (factor * var[(0, 0)].as_f64()).sqrt();
        (centre - half, centre + half)
    });
    Ok(InferenceResult {
        statistic,
        critical_value,
        reject: statistic > critical_value,
        ci,
        scaling_factor: 1.0 / factor,
        mode: InferenceMode::Plugin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// `V_t` straight from the double-sum definition.
    fn v_direct(stream: &[DVector<f64>], r: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
        let ell = r.nrows();
        let mut sum = DVector::zeros(stream[0].len());
        let bars: Vec<DVector<f64>> = stream[..t]
            .iter()
            .enumerate()
            .map(|(s, th)| {
                sum += th;
                &sum / (s + 1) as f64
            })
            .collect();
        let last = r * &bars[t - 1];
        let mut v = DMatrix::zeros(ell, ell);
        for (s, bar) in bars.iter().enumerate() {
            let dev = r * bar - &last;
            v += &dev * dev.transpose() * ((s + 1) as f64).powi(2);
        }
        v / (t as f64).powi(2)
    }

    fn random_stream(rng: &mut ChaCha8Rng, len: usize, d: usize) -> Vec<DVector<f64>> {
        let mut x = DVector::<f64>::zeros(d);
        (0..len)
            .map(|_| {
                for v in x.iter_mut() {
                    *v += rng.sample::<f64, _>(StandardNormal) * 0.3;
                }
                x.clone()
            })
            .collect()
    }

    fn feed(stream: &[DVector<f64>], r: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut st = RandomScalingState::new(r.clone());
        let mut sum = DVector::zeros(stream[0].len());
        stream
            .iter()
            .enumerate()
            .map(|(s, th)| {
                sum += th;
                st.update(&(&sum / (s + 1) as f64));
                st.v()
            })
            .collect()
    }

    #[test]
    fn constant_stream_has_zero_variance() {
        let r = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        let mut st = RandomScalingState::new(r);
        let th = DVector::from_vec(vec![0.25, -1.5, 3.0]);
        for _ in 0..50 {
            st.update(&th);
            assert!(st.v().amax() <= 1e-12);
        }
    }

    #[test]
    fn recursion_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stream = random_stream(&mut rng, 200, 3);
        let r = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 0.5, 0.0, 2.0]);
        for (t, v) in feed(&stream, &r).iter().enumerate() {
            let direct = v_direct(&stream, &r, t + 1);
            assert!((v - &direct).amax() <= 1e-10 * direct.amax().max(1e-300) + 1e-14);
        }
    }

    #[test]
    fn zero_deviation_gives_zero_statistic() {
        let r = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let mut st = RandomScalingState::new(r.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for th in random_stream(&mut rng, 30, 2) {
            st.update(&th);
        }
        let bar = DVector::from_vec(vec![0.7, 0.0]);
        let hyp = Hypothesis::new(r, DVector::from_element(1, 0.7)).unwrap();
        let res = rs_wald(&st, &bar, &hyp, 100, 30, 4, 0.05, InferenceMode::RandomScalingSampling).unwrap();
        assert_eq!(res.statistic, 0.0);
        assert!(!res.reject);
        let (lo, hi) = res.ci.unwrap();
        assert!(lo < 0.7 && hi > 0.7);
    }

    #[test]
    fn ell_one_uses_published_critical_values() {
        let r = DMatrix::from_row_slice(1, 1, &[1.0]);
        let mut st = RandomScalingState::new(r.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for th in random_stream(&mut rng, 40, 1) {
            st.update(&th);
        }
        let hyp = Hypothesis::new(r, DVector::from_element(1, 0.0)).unwrap();
        let bar = DVector::from_element(1, 0.1);
        for (alpha, cv) in [(0.05, 6.747), (0.10, 5.323)] {
            let res = rs_wald(&st, &bar, &hyp, 10, 40, 1, alpha, InferenceMode::RandomScalingFixed).unwrap();
            assert!((res.critical_value.sqrt() - cv).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_variance_is_an_error() {
        let r = DMatrix::from_row_slice(1, 1, &[1.0]);
        let mut st = RandomScalingState::new(r.clone());
        st.update(&DVector::from_element(1, 1.0));
        let hyp = Hypothesis::new(r, DVector::from_element(1, 0.0)).unwrap();
        let err = rs_wald(&st, &DVector::from_element(1, 1.0), &hyp, 10, 1, 1, 0.05, InferenceMode::RandomScalingFixed);
        assert!(matches!(err, Err(SlimError::Inference(_))));
    }

    #[test]
    fn rank_deficient_restrictions_are_rejected() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(Hypothesis::new(r, DVector::zeros(2)).is_err());
        assert!(Hypothesis::<f64>::coordinate(2, 2, 0.0).is_err());
    }

    #[test]
    fn tau_limits() {
        assert!((tau_n(1_000_000_000, 100, 10) / 1000.0 - 1.0).abs() < 1e-5);
        assert!((tau_n(100, 1_000_000_000, 10) / 100.0 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn simulated_null_paths_reject_at_nominal_rate() {
        // θ̄ computed from i.i.d. increments is a Brownian partial-sum path.
        let paths = 10_000;
        let len = 500;
        let r = DMatrix::from_row_slice(1, 1, &[1.0]);
        let hyp = Hypothesis::new(r.clone(), DVector::from_element(1, 0.0)).unwrap();
        let rejections: usize = (0..paths)
            .map(|p| {
                let mut rng = ChaCha8Rng::seed_from_u64(77);
                rng.set_stream(p as u64);
                let mut st = RandomScalingState::new(r.clone());
                let mut sum = 0.0;
                let mut bar = DVector::zeros(1);
                for t in 1..=len {
                    sum += rng.sample::<f64, _>(StandardNormal);
                    bar[0] = sum / t as f64;
                    st.update(&bar);
                }
                let res = rs_wald(&st, &bar, &hyp, 1, len, 1, 0.05, InferenceMode::RandomScalingFixed).unwrap();
                res.reject as usize
            })
            .sum();
        let rate = rejections as f64 / paths as f64;
        assert!((rate - 0.05).abs() <= 0.015, "rate {rate}");
    }

    proptest! {
        #[test]
        fn recursion_matches_for_any_ell(seed in 0u64..1000, len in 1usize..120, ell in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let stream = random_stream(&mut rng, len, d);
            let r = DMatrix::from_fn(ell, d, |i, j| if i == j { 1.0 } else { 0.3 * (i + j) as f64 });
            let vs = feed(&stream, &r);
            for (t, v) in vs.iter().enumerate() {
                let direct = v_direct(&stream, &r, t + 1);
                prop_assert!((v - &direct).amax() <= 1e-10 * direct.amax() + 1e-14);
            }
        }

        #[test]
        fn affine_reparametrisation_is_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stream = random_stream(&mut rng, 60, 2);
            let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -0.3, 1.5]);
            let s_inv = s.clone().try_inverse().unwrap();
            let r = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
            let moved: Vec<DVector<f64>> = stream.iter().map(|th| &s * th).collect();
            let a = feed(&stream, &r);
            let b = feed(&moved, &(&r * &s_inv));
            let last_a = a.last().unwrap();
            let last_b = b.last().unwrap();
            prop_assert!((last_a - last_b).amax() <= 1e-10 * last_a.amax());
        }
    }
}

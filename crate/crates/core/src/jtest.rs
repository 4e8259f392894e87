//! Overidentification tests: plug-in `J`, debiased `J_D` and online `J*`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{chi2_sf, mixture_sf};
use crate::engine::{Observation, Observer};
use crate::error::{Result, SlimError};
use crate::inference::tau_n;
use crate::linalg::{pinv_sym, symmetrize};
use crate::model::{sample_moments, Dataset, MomentModel};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JVariant {
    Plugin,
    Debiased,
    Online,
}

impl JVariant {
    pub fn name(self) -> &'static str {
        match self {
            JVariant::Plugin => "plugin",
            JVariant::Debiased => "debiased",
            JVariant::Online => "online",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JTestResult {
    pub statistic: f64,
    pub df: usize,
    pub tau: f64,
    pub p_value: f64,
    pub variant: JVariant,
    /// Online variant only: `n ḡ*' W ḡ*` without the deflating factor.
    pub undeflated: Option<f64>,
}

impl JTestResult {
    pub fn reject(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Running mean `ḡ*_t` of the moment batches seen during refinement.
#[derive(Debug, Clone)]
pub struct OnlineGbarState<T: Scalar> {
    pub g_bar: DVector<T>,
    pub count: usize,
}

impl<T: Scalar> OnlineGbarState<T> {
    pub fn new(d_g: usize) -> Self {
        Self {
            g_bar: DVector::zeros(d_g),
            count: 0,
        }
    }

    pub fn update(&mut self, g_tilde: &DVector<T>) {
        self.count += 1;
        let inv = T::one() / T::from_count(self.count);
        for (bar, &g) in self.g_bar.iter_mut().zip(g_tilde.iter()) {
            *bar += (g - *bar) * inv;
        }
    }
}

impl<T: Scalar> Observer<T> for OnlineGbarState<T> {
    fn observe(&mut self, obs: &Observation<'_, T>) {
        self.update(obs.g_tilde);
    }
}

fn overidentified(d: usize, d_g: usize) -> Result<usize> {
    if d_g <= d {
        return Err(SlimError::NotOveridentified { d, d_g });
    }
    Ok(d_g - d)
}

/// `J = n ḡ_n(θ)' W ḡ_n(θ)` referred to `χ²_{d_g−d} + τ χ²_d`.
pub fn j_plugin<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    theta: &DVector<T>,
    weight: &DMatrix<T>,
    tau: f64,
) -> Result<JTestResult> {
    let (d, d_g) = (model.dim_theta(), model.dim_moments());
    let df = overidentified(d, d_g)?;
    let g = sample_moments(model, data, theta, None)?.g_bar;
    let statistic = data.n() as f64 * g.dot(&(weight * &g)).as_f64();
    Ok(JTestResult {
        statistic,
        df,
        tau,
        p_value: mixture_sf(statistic, df as f64, d as f64, tau),
        variant: JVariant::Plugin,
        undeflated: None,
    })
}

/// `W − WΦ(Φ'WΦ)†Φ'W` and the rank of `Φ'WΦ`.
pub fn debiasing_matrix<T: Scalar>(phi: &DMatrix<T>, w: &DMatrix<T>) -> (DMatrix<T>, usize) {
    let wphi = w * phi;
    let p = pinv_sym(&symmetrize(&(phi.transpose() * &wphi)));
    (symmetrize(&(w - &wphi * &p.matrix * wphi.transpose())), p.rank)
}

/// `J_D = n ḡ'(W̄ − W̄Φ̄(Φ̄'W̄Φ̄)⁻¹Φ̄'W̄)ḡ` with `Φ̄` and `W̄ = (n⁻¹Σgg')†` at
/// `θ`, referred to `χ²_{d_g−d}`.
///
/// A rank-deficient `Φ̄'W̄Φ̄` lowers the degrees of freedom to `d_g − rank`
/// and logs a warning.
pub fn j_debiased<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    theta: &DVector<T>,
) -> Result<JTestResult> {
    let (d, d_g) = (model.dim_theta(), model.dim_moments());
    overidentified(d, d_g)?;
    let full = sample_moments(model, data, theta, None)?;
    let w = pinv_sym(&symmetrize(&full.second_moment)).matrix;
    let (m, rank) = debiasing_matrix(&full.jac_bar, &w);
    if rank < d {
        log::warn!("Phi'W Phi has rank {rank} < d = {d}; debiased J uses df = {}", d_g - rank);
    }
    let df = d_g - rank;
    let g = &full.g_bar;
    let statistic = data.n() as f64 * g.dot(&(&m * g)).as_f64();
    Ok(JTestResult {
        statistic,
        df,
        tau: 0.0,
        p_value: chi2_sf(statistic, df as f64),
        variant: JVariant::Debiased,
        undeflated: None,
    })
}

/// `J* = (n⁻¹ + ((T−N)B_g)⁻¹)⁻¹ ḡ*' W ḡ*` referred to `χ²_{d_g−d}`.
pub fn j_online<T: Scalar>(
    state: &OnlineGbarState<T>,
    weight: &DMatrix<T>,
    d: usize,
    n: usize,
    b_g: usize,
) -> Result<JTestResult> {
    let d_g = state.g_bar.len();
    let df = overidentified(d, d_g)?;
    if state.count == 0 {
        return Err(SlimError::Inference("online J needs at least one refinement step".into()));
    }
    let quad = state.g_bar.dot(&(weight * &state.g_bar)).as_f64();
    let tau = tau_n(n, state.count, b_g);
    let statistic = tau * quad;
    Ok(JTestResult {
        statistic,
        df,
        tau: n as f64 / (state.count as f64 * b_g as f64),
        p_value: chi2_sf(statistic, df as f64),
        variant: JVariant::Online,
        undeflated: Some(n as f64 * quad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::linear_iv::generate_linear_iv;
    use crate::model::{LinearIvDesign, LinearIvModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn online_mean_matches_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = OnlineGbarState::new(3);
        let mut sum = DVector::<f64>::zeros(3);
        for k in 1..=500 {
            let g = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            sum += &g;
            st.update(&g);
            assert!((&st.g_bar - &sum / k as f64).amax() <= 1e-12);
        }
    }

    #[test]
    fn zero_online_mean_gives_zero_statistic() {
        let mut st = OnlineGbarState::<f64>::new(4);
        st.update(&DVector::zeros(4));
        let res = j_online(&st, &DMatrix::identity(4, 4), 2, 100, 8).unwrap();
        assert_eq!(res.statistic, 0.0);
        assert_eq!(res.p_value, 1.0);
        assert!(j_online(&OnlineGbarState::<f64>::new(4), &DMatrix::identity(4, 4), 2, 100, 8).is_err());
    }

    #[test]
    fn online_deflator_tends_to_n() {
        let mut st = OnlineGbarState::<f64>::new(3);
        st.update(&DVector::from_vec(vec![1.0, 0.0, 0.0]));
        st.count = 1_000_000_000;
        let res = j_online(&st, &DMatrix::identity(3, 3), 1, 500, 10).unwrap();
        assert!((res.statistic / 500.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn just_identified_is_rejected() {
        let st = OnlineGbarState::<f64>::new(2);
        assert!(matches!(
            j_online(&st, &DMatrix::identity(2, 2), 2, 10, 1),
            Err(SlimError::NotOveridentified { .. })
        ));
    }

    #[test]
    fn debiasing_matrix_is_idempotent_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 6, 6);
        let w = &a * a.transpose() + DMatrix::identity(6, 6);
        let phi = random_matrix(&mut rng, 6, 2);
        let (m, rank) = debiasing_matrix(&phi, &w);
        assert_eq!(rank, 2);
        // In whitened coordinates the matrix is I − P, a projection.
        let root = crate::linalg::sym_sqrt(&w);
        let root_inv = root.clone().try_inverse().unwrap();
        let proj = &root_inv * &m * &root_inv;
        assert!((&proj * &proj - &proj).amax() <= 1e-10);
        // J_D ≤ J for any ḡ under the same W.
        for _ in 0..50 {
            let g = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
            assert!(g.dot(&(&m * &g)) <= g.dot(&(&w * &g)) + 1e-10);
        }
    }

    #[test]
    fn first_order_condition_makes_forms_coincide() {
        let design = LinearIvDesign::default();
        let data = generate_linear_iv(&design, 1000, 4).unwrap();
        let model = LinearIvModel::from_design(&design).unwrap();
        let w = model.instrument_second_moment(&data).try_inverse().unwrap();
        let (s_qy, s_qx) = model.cross_moments(&data);
        // ḡ(θ) = s_qy − S_qx θ; the W-minimiser solves S'W S θ = S'W s.
        let lhs = s_qx.transpose() * &w * &s_qx;
        let theta = lhs.try_inverse().unwrap() * (s_qx.transpose() * &w * &s_qy);
        let g = &s_qy - &s_qx * &theta;
        let phi = -s_qx;
        let (m, _) = debiasing_matrix(&phi, &w);
        let j = g.dot(&(&w * &g));
        let jd = g.dot(&(&m * &g));
        assert!((j - jd).abs() <= 1e-10 * j.max(1e-12));
    }

    #[test]
    fn plugin_zero_moment_and_tau_zero() {
        let design = LinearIvDesign::default();
        let data = generate_linear_iv(&design, 500, 2).unwrap();
        let model = LinearIvModel::from_design(&design).unwrap();
        let theta = DVector::from_vec(design.theta_o.clone());
        let w = DMatrix::identity(4, 4);
        let res = j_plugin(&model, &data, &theta, &w, 0.0).unwrap();
        assert!((res.p_value - chi2_sf(res.statistic, 2.0)).abs() < 1e-15);
        let zero = j_plugin(&model, &data, &theta, &DMatrix::zeros(4, 4), 0.3).unwrap();
        assert_eq!(zero.statistic, 0.0);
        assert_eq!(zero.p_value, 1.0);
        let jd = j_debiased(&model, &data, &theta).unwrap();
        assert_eq!(jd.df, 2);
        assert!((0.0..=1.0).contains(&jd.p_value));
    }
}

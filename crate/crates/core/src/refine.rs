//! Second-order refinement: the one-off operators `Φ_n`, `W` and
//! `(Φ'WΦ)†`, and the preconditioned update with a restarted average.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{draw_minibatch, IterationState, Observation, Observer, StepWorkspace, Trace};
use crate::error::{Result, SlimError};
use crate::linalg::{pinv_sym, symmetrize};
use crate::model::{batch_mean_moment, sample_moments, BatchScratch, Dataset, MomentModel};
use crate::scalar::Scalar;
use crate::schedule::{BatchSchedule, LearningRate};

/// Mini-batches folded per parallel task when estimating `W_MB`.
const WEIGHT_CHUNK: usize = 256;

/// Where the optimal weight comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `W_MB = ((B_g/M) Σ g̃_ℓ g̃_ℓ')†` over `M` fresh batches.
    #[default]
    Minibatch,
    /// `W_n = (n⁻¹ Σ g g')†`.
    Fullsample,
}

/// Settings for [`build_operators`].
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorConfig {
    pub mode: WeightMode,
    /// `M_MB`, the number of mini-batches behind `W_MB`.
    pub minibatches: usize,
    pub moment_batch: usize,
    /// When set, the moment vector is split into consecutive blocks of this
    /// size (one per equation) and cross-block entries are zeroed before
    /// inversion.
    pub equation_block: Option<usize>,
    /// Rows used for `Φ_n`; the full sample when `None` or when `n` is smaller.
    pub phi_row_cap: Option<usize>,
}

/// The operators reused throughout refinement.
#[derive(Debug, Clone)]
pub struct RefinementOperators<T: Scalar> {
    pub phi: DMatrix<T>,
    pub weight: DMatrix<T>,
    /// `(Φ'WΦ)†`.
    pub precond: DMatrix<T>,
    pub precond_rank: usize,
    /// Largest eigenvalue of `Φ'WΦ`.
    pub curvature: f64,
    /// `N`, the first-stage iteration count.
    pub first_stage: usize,
    pub minibatches: usize,
    pub warnings: Vec<String>,
}

fn block_diagonal<T: Scalar>(m: &mut DMatrix<T>, block: usize) {
    let size = m.nrows();
    for i in 0..size {
        for j in 0..size {
            if i / block != j / block {
                m[(i, j)] = T::zero();
            }
        }
    }
}

/// Mean of `B_g g̃ g̃'` over `minibatches` seeded uniform batches at `theta`.
pub fn minibatch_second_moment<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    theta: &DVector<T>,
    minibatches: usize,
    moment_batch: usize,
    seed: u64,
) -> Result<DMatrix<T>> {
    if minibatches == 0 || moment_batch == 0 {
        return Err(SlimError::config("weight estimation needs M_MB >= 1 and B_g >= 1"));
    }
    let d_g = model.dim_moments();
    let n = data.n();
    let chunks: Vec<usize> = (0..minibatches.div_ceil(WEIGHT_CHUNK)).collect();
    let partials: Vec<Result<DMatrix<T>>> = chunks
        .par_iter()
        .map(|&c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut scratch = BatchScratch::for_model(model);
            let mut pair = Default::default();
            let mut g = DVector::zeros(d_g);
            let mut acc = DMatrix::zeros(d_g, d_g);
            let lo = c * WEIGHT_CHUNK;
            let hi = (lo + WEIGHT_CHUNK).min(minibatches);
            for _ in lo..hi {
                draw_minibatch(&mut rng, n, 0, moment_batch, &mut pair);
                batch_mean_moment(model, data, &pair.moment_indices, theta, &mut scratch, &mut g)?;
                acc.ger(T::one(), &g, &g, T::one());
            }
            Ok(acc)
        })
        .collect();
    let mut total = DMatrix::zeros(d_g, d_g);
    for p in partials {
        total += p?;
    }
    Ok(total * (T::from_count(moment_batch) / T::from_count(minibatches)))
}

/// Computes `Φ_n`, `W` and `(Φ'WΦ)†` at `theta_bar`.
pub fn build_operators<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    theta_bar: &DVector<T>,
    first_stage: usize,
    cfg: &OperatorConfig,
    seed: u64,
) -> Result<RefinementOperators<T>> {
    model.check_dataset(data)?;
    if theta_bar.iter().any(|v| !v.is_finite()) {
        return Err(SlimError::Refinement("first-stage average is not finite".into()));
    }
    let d = model.dim_theta();
    let n = data.n();
    let full = sample_moments(model, data, theta_bar, None)?;
    let phi = match cfg.phi_row_cap {
        Some(cap) if cap < n => {
            let rows: Vec<usize> = {
                use rand::seq::index::sample;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                let mut r = sample(&mut rng, n, cap).into_vec();
                r.sort_unstable();
                r
            };
            sample_moments(model, data, theta_bar, Some(&rows))?.jac_bar
        }
        _ => full.jac_bar.clone(),
    };
    let mut omega = match cfg.mode {
        WeightMode::Fullsample => full.second_moment,
        WeightMode::Minibatch => minibatch_second_moment(
            model,
            data,
            theta_bar,
            cfg.minibatches,
            cfg.moment_batch,
            seed,
        )?,
    };
    if let Some(block) = cfg.equation_block {
        if block == 0 || omega.nrows() % block != 0 {
            return Err(SlimError::config(format!(
                "equation block {block} does not divide d_g = {}",
                omega.nrows()
            )));
        }
        block_diagonal(&mut omega, block);
    }
    let w = pinv_sym(&symmetrize(&omega));
    if w.rank == 0 {
        return Err(SlimError::Refinement(
            "estimated moment covariance is zero; no weight available".into(),
        ));
    }
    let weight = w.matrix;
    let bread = symmetrize(&(phi.transpose() * &weight * &phi));
    let p = pinv_sym(&bread);
    let mut warnings = Vec::new();
    if p.rank < d {
        let msg = format!("Phi'W Phi has rank {} < d = {d}; using the pseudo-inverse", p.rank);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(RefinementOperators {
        phi,
        weight,
        precond: p.matrix,
        precond_rank: p.rank,
        curvature: p.max_eigenvalue.as_f64(),
        first_stage,
        minibatches: cfg.minibatches,
        warnings,
    })
}

/// One refinement step `θ_t = θ_{t-1} - γ_t P G̃_t' W g̃_t` on the batch stored
/// in `ws.batch`, where `P` is the preconditioner or the identity when
/// `precondition` is false. The average restarts at `N`.
pub fn step_second_order<T: Scalar, M: MomentModel<T> + ?Sized>(
    state: &mut IterationState<T>,
    model: &M,
    data: &Dataset<T>,
    lr: &LearningRate,
    ops: &RefinementOperators<T>,
    precondition: bool,
    ws: &mut StepWorkspace<T>,
) -> Result<()> {
    ws.evaluate(model, data, &state.theta)?;
    let t = state.t + 1;
    if t <= ops.first_stage {
        return Err(SlimError::Refinement(format!(
            "refinement step at t = {t} does not follow the first stage N = {}",
            ops.first_stage
        )));
    }
    let gamma = T::lit(lr.rate_at(t - ops.first_stage));
    let grad = ws.jac_tilde.tr_mul(&(&ops.weight * &ws.g_tilde));
    let direction = if precondition { &ops.precond * grad } else { grad };
    state.theta.axpy(-gamma, &direction, T::one());
    state.t = t;
    state.guard()?;
    state.fold_average();
    Ok(())
}

/// Runs steps `N+1..=T`. The state's average is restarted first, so on return
/// `theta_bar` is the mean of the refinement iterates only.
///
/// `lr` should carry offset `N` so that `γ_t` continues the first-stage
/// schedule. `precondition = false` keeps the refined weight but drops
/// `(Φ'WΦ)†`.
#[allow(clippy::too_many_arguments)]
pub fn run_refinement<T: Scalar, M: MomentModel<T> + ?Sized>(
    state: &mut IterationState<T>,
    model: &M,
    data: &Dataset<T>,
    ops: &RefinementOperators<T>,
    lr: &LearningRate,
    schedule: &BatchSchedule,
    total: usize,
    precondition: bool,
    hooks: &mut [&mut dyn Observer<T>],
    mut trace: Option<&mut Trace>,
) -> Result<()> {
    if total <= ops.first_stage {
        return Err(SlimError::config(format!(
            "T = {total} must exceed N = {}",
            ops.first_stage
        )));
    }
    if state.t != ops.first_stage {
        return Err(SlimError::Refinement(format!(
            "state is at t = {} but the operators were built after N = {}",
            state.t, ops.first_stage
        )));
    }
    model.check_dataset(data)?;
    state.restart_average();
    let mut ws = StepWorkspace::for_model(model);
    let n = data.n();
    while state.t < total {
        let t = state.t + 1;
        draw_minibatch(
            &mut state.rng,
            n,
            schedule.jacobian_batch(t),
            schedule.moment_batch,
            &mut ws.batch,
        );
        step_second_order(state, model, data, lr, ops, precondition, &mut ws)?;
        let obs = Observation {
            t: state.t,
            theta: &state.theta,
            theta_bar: &state.theta_bar,
            g_tilde: &ws.g_tilde,
        };
        for h in hooks.iter_mut() {
            h.observe(&obs);
        }
        if let Some(tr) = trace.as_deref_mut() {
            if state.t.is_multiple_of(tr.stride) || state.t == total {
                tr.record(state.t, &state.theta_bar);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_first_order;
    use crate::model::linear_iv::generate_linear_iv;
    use crate::model::{LinearIvDesign, LinearIvModel};
    use crate::schedule::BatchGrowth;

    fn setup(n: usize) -> (LinearIvModel, Dataset<f64>) {
        let design = LinearIvDesign::default();
        (
            LinearIvModel::from_design(&design).unwrap(),
            generate_linear_iv(&design, n, 21).unwrap(),
        )
    }

    fn identity_ops(d: usize, d_g: usize, n_first: usize) -> RefinementOperators<f64> {
        RefinementOperators {
            phi: DMatrix::zeros(d_g, d),
            weight: DMatrix::identity(d_g, d_g),
            precond: DMatrix::identity(d, d),
            precond_rank: d,
            curvature: 1.0,
            first_stage: n_first,
            minibatches: 0,
            warnings: vec![],
        }
    }

    fn full_cfg() -> OperatorConfig {
        OperatorConfig {
            mode: WeightMode::Fullsample,
            minibatches: 0,
            moment_batch: 8,
            equation_block: None,
            phi_row_cap: None,
        }
    }

    #[test]
    fn fullsample_weight_matches_dense_oracle() {
        let (model, data) = setup(800);
        let theta = DVector::from_vec(vec![0.9, -0.4]);
        let ops = build_operators(&model, &data, &theta, 10, &full_cfg(), 1).unwrap();
        // Direct dense construction from the raw rows.
        let d_g = 4;
        let mut omega = DMatrix::<f64>::zeros(d_g, d_g);
        let mut phi = DMatrix::<f64>::zeros(d_g, 2);
        for r in data.rows() {
            let (y, x, q) = (r[0], &r[1..3], &r[3..7]);
            let e = y - x[0] * theta[0] - x[1] * theta[1];
            for i in 0..d_g {
                for j in 0..d_g {
                    omega[(i, j)] += q[i] * q[j] * e * e;
                }
                for k in 0..2 {
                    phi[(i, k)] -= q[i] * x[k];
                }
            }
        }
        omega /= data.n() as f64;
        phi /= data.n() as f64;
        let w = omega.clone().try_inverse().unwrap();
        let scale = w.amax();
        assert!((&ops.weight - &w).amax() <= 1e-10 * scale);
        assert!((&ops.phi - &phi).amax() <= 1e-12 * phi.amax());
        let bread = phi.transpose() * &w * &phi;
        let p = bread.try_inverse().unwrap();
        assert!((&ops.precond - &p).amax() <= 1e-9 * p.amax());
        // Pseudo-inverse identity P B P = P.
        let b = ops.phi.transpose() * &ops.weight * &ops.phi;
        assert!((&ops.precond * b * &ops.precond - &ops.precond).amax() <= 1e-8 * p.amax());
    }

    #[test]
    fn minibatch_weight_converges_to_fullsample() {
        let (model, data) = setup(400);
        let theta = DVector::from_vec(vec![1.0, -0.5]);
        let target = sample_moments(&model, &data, &theta, None).unwrap().second_moment;
        let err = |m: usize| {
            let reps: Vec<f64> = (0..8)
                .map(|s| {
                    let w = minibatch_second_moment(&model, &data, &theta, m, 4, s).unwrap();
                    (w - &target).norm()
                })
                .collect();
            reps.iter().sum::<f64>() / reps.len() as f64
        };
        let e1 = err(1_000);
        let e4 = err(4_000);
        let e16 = err(16_000);
        // Monte Carlo error halves when M quadruples.
        assert!(e4 < 0.75 * e1 && e4 > 0.3 * e1, "{e1} {e4}");
        assert!(e16 < 0.75 * e4, "{e4} {e16}");
    }

    #[test]
    fn zero_moments_give_refinement_error() {
        struct Zero;
        impl MomentModel<f64> for Zero {
            fn dim_theta(&self) -> usize {
                1
            }
            fn dim_moments(&self) -> usize {
                2
            }
            fn record_width(&self) -> usize {
                1
            }
            fn columns(&self) -> Vec<String> {
                vec!["z".into()]
            }
            fn moment(&self, _: &[f64], _: &DVector<f64>, out: &mut [f64]) -> Result<()> {
                out.fill(0.0);
                Ok(())
            }
            fn jacobian(&self, _: &[f64], _: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
                out.fill(1.0);
                Ok(())
            }
        }
        let data = Dataset::new(vec![0.0; 20], 1, vec!["z".into()]).unwrap();
        for mode in [WeightMode::Fullsample, WeightMode::Minibatch] {
            let cfg = OperatorConfig {
                mode,
                minibatches: 10,
                ..full_cfg()
            };
            let err = build_operators(&Zero, &data, &DVector::zeros(1), 1, &cfg, 1).unwrap_err();
            assert!(matches!(err, SlimError::Refinement(_)));
        }
    }

    #[test]
    fn kronecker_structure_zeroes_cross_blocks() {
        let mut m = DMatrix::from_fn(4, 4, |i, j| (i + j + 1) as f64);
        block_diagonal(&mut m, 2);
        assert_eq!(m[(0, 2)], 0.0);
        assert_eq!(m[(3, 1)], 0.0);
        assert_eq!(m[(1, 0)], 2.0);
        assert_eq!(m[(3, 2)], 6.0);
    }

    #[test]
    fn identity_operators_reproduce_first_order_path() {
        let (model, data) = setup(500);
        let lr0 = LearningRate::new(0.05, 0.6).unwrap();
        let sched = BatchSchedule::constant(8, 8).unwrap();
        let n_first = 50;
        let total = 120;

        let mut a = IterationState::new(DVector::zeros(2), 4);
        run_first_order(&mut a, &model, &data, &lr0, &sched, total, None, &mut [], None).unwrap();

        let mut b = IterationState::new(DVector::zeros(2), 4);
        run_first_order(&mut b, &model, &data, &lr0, &sched, n_first, None, &mut [], None).unwrap();
        let ops = identity_ops(2, 4, n_first);
        let lr = LearningRate::with_offset(0.05, 0.6, n_first).unwrap();
        run_refinement(&mut b, &model, &data, &ops, &lr, &sched, total, true, &mut [], None).unwrap();
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn restart_average_and_hook_count() {
        struct Log(Vec<(usize, DVector<f64>, DVector<f64>)>);
        impl Observer<f64> for Log {
            fn observe(&mut self, o: &Observation<'_, f64>) {
                self.0.push((o.t, o.theta.clone(), o.theta_bar.clone()));
            }
        }
        let (model, data) = setup(500);
        let sched = BatchSchedule::new(4, 8, BatchGrowth::Logarithmic, 30).unwrap();
        let lr0 = LearningRate::new(0.05, 0.6).unwrap();
        let mut st = IterationState::new(DVector::zeros(2), 8);
        run_first_order(&mut st, &model, &data, &lr0, &sched, 30, None, &mut [], None).unwrap();
        let ops = build_operators(&model, &data, &st.theta_bar, 30, &full_cfg(), 3).unwrap();
        let lr = LearningRate::with_offset(0.5, 0.6, 30).unwrap();
        let mut log = Log(Vec::new());
        run_refinement(&mut st, &model, &data, &ops, &lr, &sched, 31, true, &mut [&mut log], None).unwrap();
        assert_eq!(log.0.len(), 1);
        assert_eq!(log.0[0].1, log.0[0].2);
        run_refinement(&mut st, &model, &data, &ops, &lr, &sched, 31, true, &mut [], None).unwrap_err();
    }

    #[test]
    fn refinement_hooks_fire_t_minus_n_times() {
        struct Count(usize);
        impl Observer<f64> for Count {
            fn observe(&mut self, _: &Observation<'_, f64>) {
                self.0 += 1;
            }
        }
        let (model, data) = setup(300);
        let sched = BatchSchedule::constant(4, 4).unwrap();
        let mut st = IterationState::new(DVector::zeros(2), 1);
        st.t = 40;
        let ops = identity_ops(2, 4, 40);
        let lr = LearningRate::with_offset(0.01, 0.6, 40).unwrap();
        let mut c = Count(0);
        run_refinement(&mut st, &model, &data, &ops, &lr, &sched, 100, false, &mut [&mut c], None)
            .unwrap();
        assert_eq!(c.0, 60);
        assert_eq!(st.t, 100);
    }
}

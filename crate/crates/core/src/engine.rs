//! First-order stochastic approximation: uniform mini-batch sampling, the
//! U-statistic update, Polyak–Ruppert averaging and the warm-start loop.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SlimError};
use crate::model::{batch_mean_jacobian, batch_mean_moment, BatchScratch, Dataset, MomentModel};
use crate::scalar::Scalar;
use crate::schedule::{BatchSchedule, LearningRate, WarmStartConfig};

/// Any coordinate beyond this magnitude aborts the run.
pub const DIVERGENCE_BOUND: f64 = 1e8;

/// Current iterate, running average and the run's sampling stream.
#[derive(Debug, Clone)]
pub struct IterationState<T: Scalar> {
    pub theta: DVector<T>,
    pub theta_bar: DVector<T>,
    /// Global iteration counter.
    pub t: usize,
    /// Iterates folded into `theta_bar` since the last restart.
    pub averaged: usize,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> IterationState<T> {
    pub fn new(theta0: DVector<T>, seed: u64) -> Self {
        Self::with_rng(theta0, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(theta0: DVector<T>, rng: ChaCha8Rng) -> Self {
        Self {
            theta_bar: theta0.clone(),
            theta: theta0,
            t: 0,
            averaged: 0,
            rng,
        }
    }

    /// Starts a fresh average at the next accepted iterate.
    pub fn restart_average(&mut self) {
        self.averaged = 0;
    }

    /// `θ̄ ← ((k-1)/k) θ̄ + θ/k` with `k` the count since the last restart,
    /// written as `θ̄ + (θ - θ̄)/k` so a constant stream stays exact.
    pub(crate) fn fold_average(&mut self) {
        self.averaged += 1;
        let inv = T::one() / T::from_count(self.averaged);
        for (bar, &th) in self.theta_bar.iter_mut().zip(self.theta.iter()) {
            *bar += (th - *bar) * inv;
        }
    }

    pub(crate) fn guard(&self) -> Result<()> {
        let bound = T::lit(DIVERGENCE_BOUND);
        if self.theta.iter().any(|v| !v.is_finite() || v.abs() > bound) {
            return Err(SlimError::Divergence {
                t: self.t,
                theta: self.theta.iter().map(|v| v.as_f64()).collect(),
            });
        }
        Ok(())
    }
}

/// Row indices for one iteration's Jacobian and moment batches.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MiniBatchPair {
    pub jacobian_indices: Vec<usize>,
    pub moment_indices: Vec<usize>,
}

/// Draws `B_G + B_g` indices uniformly with replacement from `0..n`; the first
/// `B_G` go to the Jacobian batch and the rest to the moment batch.
pub fn draw_minibatch<R: Rng>(
    rng: &mut R,
    n: usize,
    jacobian_batch: usize,
    moment_batch: usize,
    out: &mut MiniBatchPair,
) {
    assert!(n >= 1, "cannot sample from an empty dataset");
    out.jacobian_indices.clear();
    out.moment_indices.clear();
    out.jacobian_indices
        .extend((0..jacobian_batch).map(|_| rng.random_range(0..n)));
    out.moment_indices
        .extend((0..moment_batch).map(|_| rng.random_range(0..n)));
}

/// What observers see after each accepted step.
#[derive(Debug)]
pub struct Observation<'a, T: Scalar> {
    /// Global iteration index.
    pub t: usize,
    pub theta: &'a DVector<T>,
    pub theta_bar: &'a DVector<T>,
    /// Moment batch mean `g̃_t(θ_{t-1})` before any weighting.
    pub g_tilde: &'a DVector<T>,
}

/// Read-only per-iteration hook.
pub trait Observer<T: Scalar> {
    fn observe(&mut self, obs: &Observation<'_, T>);
}

/// Scratch buffers reused across iterations.
#[derive(Debug, Clone)]
pub struct StepWorkspace<T: Scalar> {
    scratch: BatchScratch<T>,
    pub g_tilde: DVector<T>,
    pub jac_tilde: DMatrix<T>,
    pub batch: MiniBatchPair,
}

impl<T: Scalar> StepWorkspace<T> {
    pub fn new(d: usize, d_g: usize) -> Self {
        Self {
            scratch: BatchScratch::new(d, d_g),
            g_tilde: DVector::zeros(d_g),
            jac_tilde: DMatrix::zeros(d_g, d),
            batch: MiniBatchPair::default(),
        }
    }

    pub fn for_model<M: MomentModel<T> + ?Sized>(model: &M) -> Self {
        Self::new(model.dim_theta(), model.dim_moments())
    }

    /// Fills `jac_tilde` and `g_tilde` at `theta` from the current batch.
    pub(crate) fn evaluate<M: MomentModel<T> + ?Sized>(
        &mut self,
        model: &M,
        data: &Dataset<T>,
        theta: &DVector<T>,
    ) -> Result<()> {
        batch_mean_jacobian(
            model,
            data,
            &self.batch.jacobian_indices,
            theta,
            &mut self.scratch,
            &mut self.jac_tilde,
        )?;
        batch_mean_moment(
            model,
            data,
            &self.batch.moment_indices,
            theta,
            &mut self.scratch,
            &mut self.g_tilde,
        )
    }
}

/// One first-order step `θ_t = θ_{t-1} - γ_t G̃_t' g̃_t` using the batch already
/// stored in `ws.batch`, followed by the running-average update.
///
/// `weight_root`, when present, pre-multiplies both batch means, which
/// turns the update into `G̃' W g̃` for `W = root²`.
pub fn step_first_order<T: Scalar, M: MomentModel<T> + ?Sized>(
    state: &mut IterationState<T>,
    model: &M,
    data: &Dataset<T>,
    lr: &LearningRate,
    weight_root: Option<&DMatrix<T>>,
    ws: &mut StepWorkspace<T>,
) -> Result<()> {
    ws.evaluate(model, data, &state.theta)?;
    let t = state.t + 1;
    let gamma = T::lit(lr.rate_at(t));
    let direction = match weight_root {
        Some(root) => (root * &ws.jac_tilde).tr_mul(&(root * &ws.g_tilde)),
        None => ws.jac_tilde.tr_mul(&ws.g_tilde),
    };
    state.theta.axpy(-gamma, &direction, T::one());
    state.t = t;
    state.guard()?;
    state.fold_average();
    Ok(())
}

/// `θ̄` sampled every `stride` iterations (and at the final one).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub stride: usize,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl Trace {
    pub fn new(stride: usize) -> Self {
        Self {
            stride: stride.max(1),
            rows: Vec::new(),
        }
    }

    pub fn record<T: Scalar>(&mut self, t: usize, theta_bar: &DVector<T>) {
        self.rows
            .push((t, theta_bar.iter().map(|v| v.as_f64()).collect()));
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.rows.first().map_or(0, |r| r.1.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|k| format!("theta_bar_{k}")));
        w.write_record(&header)?;
        for (t, row) in &self.rows {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `iterations` first-order steps from the current state.
///
/// Observers are called once per accepted step. On divergence the error is
/// returned and whatever the trace recorded so far is kept.
#[allow(clippy::too_many_arguments)]
pub fn run_first_order<T: Scalar, M: MomentModel<T> + ?Sized>(
    state: &mut IterationState<T>,
    model: &M,
    data: &Dataset<T>,
    lr: &LearningRate,
    schedule: &BatchSchedule,
    iterations: usize,
    weight_root: Option<&DMatrix<T>>,
    hooks: &mut [&mut dyn Observer<T>],
    mut trace: Option<&mut Trace>,
) -> Result<()> {
    if iterations == 0 {
        return Err(SlimError::config("iteration count must be at least 1"));
    }
    if state.theta.iter().any(|v| !v.is_finite()) {
        return Err(SlimError::config("initial value must be finite"));
    }
    model.check_dataset(data)?;
    let mut ws = StepWorkspace::for_model(model);
    let n = data.n();
    let last = state.t + iterations;
    while state.t < last {
        let t = state.t + 1;
        draw_minibatch(
            &mut state.rng,
            n,
            schedule.jacobian_batch(t),
            schedule.moment_batch,
            &mut ws.batch,
        );
        step_first_order(state, model, data, lr, weight_root, &mut ws)?;
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
            if state.t.is_multiple_of(tr.stride) || state.t == last {
                tr.record(state.t, &state.theta_bar);
            }
        }
    }
    Ok(())
}

/// Final first-order output.
#[derive(Debug, Clone)]
pub struct FirstOrderOutput<T: Scalar> {
    pub theta: DVector<T>,
    pub theta_bar: DVector<T>,
    pub state: IterationState<T>,
}

/// Convenience wrapper: fresh state at `theta0`, `iterations` steps.
#[allow(clippy::too_many_arguments)]
pub fn first_order_from<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    lr: &LearningRate,
    schedule: &BatchSchedule,
    theta0: DVector<T>,
    iterations: usize,
    seed: u64,
    hooks: &mut [&mut dyn Observer<T>],
) -> Result<FirstOrderOutput<T>> {
    let mut state = IterationState::new(theta0, seed);
    run_first_order(
        &mut state, model, data, lr, schedule, iterations, None, hooks, None,
    )?;
    Ok(FirstOrderOutput {
        theta: state.theta.clone(),
        theta_bar: state.theta_bar.clone(),
        state,
    })
}

/// Result of the warm-start stage.
#[derive(Debug, Clone)]
pub struct WarmStartOutput<T: Scalar> {
    pub theta_bar: DVector<T>,
    pub theta: DVector<T>,
    pub updates: usize,
}

/// Number of warm-start updates: `⌊n/B⌋ (⌊n/B⌋ - 1) E`.
pub fn warm_start_updates(n: usize, batch: usize, epochs: usize) -> usize {
    let blocks = n / batch.max(1);
    blocks * blocks.saturating_sub(1) * epochs
}

/// Epoch-reshuffled nested-loop warm start.
///
/// Each epoch reshuffles the rows once and cuts them into `⌊n/B⌋` disjoint
/// blocks. For every Jacobian block `j` and every other moment block `k` the
/// iterate moves by `-γ_e G̃_j' g̃_k`, with `G̃_j` re-evaluated at the current
/// iterate. The average runs over every update of every epoch.
pub fn run_warm_start<T: Scalar, M: MomentModel<T> + ?Sized, R: Rng>(
    model: &M,
    data: &Dataset<T>,
    cfg: &WarmStartConfig,
    theta0: DVector<T>,
    weight_root: Option<&DMatrix<T>>,
    rng: &mut R,
) -> Result<WarmStartOutput<T>> {
    cfg.validate()?;
    model.check_dataset(data)?;
    let n = data.n();
    if n < 2 * cfg.batch {
        return Err(SlimError::config(format!(
            "warm start needs n >= 2 B_ws (n = {n}, B_ws = {})",
            cfg.batch
        )));
    }
    let blocks = n / cfg.batch;
    let mut state = IterationState::with_rng(theta0, ChaCha8Rng::seed_from_u64(0));
    let mut ws = StepWorkspace::for_model(model);
    let mut order: Vec<usize> = (0..n).collect();
    for e in 1..=cfg.epochs {
        order.shuffle(rng);
        let gamma = T::lit(cfg.rate_at_epoch(e));
        for j in 0..blocks {
            for k in (0..blocks).filter(|&k| k != j) {
                ws.batch.jacobian_indices.clear();
                ws.batch
                    .jacobian_indices
                    .extend_from_slice(&order[j * cfg.batch..(j + 1) * cfg.batch]);
                ws.batch.moment_indices.clear();
                ws.batch
                    .moment_indices
                    .extend_from_slice(&order[k * cfg.batch..(k + 1) * cfg.batch]);
                ws.evaluate(model, data, &state.theta)?;
                let direction = match weight_root {
                    Some(root) => (root * &ws.jac_tilde).tr_mul(&(root * &ws.g_tilde)),
                    None => ws.jac_tilde.tr_mul(&ws.g_tilde),
                };
                state.theta.axpy(-gamma, &direction, T::one());
                state.t += 1;
                state.guard()?;
                state.fold_average();
            }
        }
    }
    Ok(WarmStartOutput {
        theta_bar: state.theta_bar,
        theta: state.theta,
        updates: state.t,
    })
}

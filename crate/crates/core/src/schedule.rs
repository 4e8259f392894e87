//! Learning-rate and mini-batch schedules, and the rule-of-thumb choice of
//! the initial learning rate.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlimError};
use crate::linalg::{lower_median, spectral_norm_psd};
use crate::model::{batch_mean_jacobian, BatchScratch, Dataset, MomentModel};
use crate::scalar::Scalar;

/// Default cap on the number of batches inspected when tuning `γ₀`.
pub const DEFAULT_BATCH_INDEX_SET_LIMIT: usize = 10_000;

/// Polynomial decay `γ_t = γ₀ ((t + N*) ∨ 1)^{-a}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRate {
    gamma0: f64,
    a: f64,
    offset: usize,
}

impl LearningRate {
    pub fn new(gamma0: f64, a: f64) -> Result<Self> {
        Self::with_offset(gamma0, a, 0)
    }

    /// Rate for a stage that starts after `offset` earlier iterations.
    pub fn with_offset(gamma0: f64, a: f64, offset: usize) -> Result<Self> {
        if !(gamma0 > 0.0) || !gamma0.is_finite() {
            return Err(SlimError::config(format!("gamma0 must be positive, got {gamma0}")));
        }
        if !(a > 0.5 && a < 1.0) {
            return Err(SlimError::config(format!(
                "learning-rate exponent must lie in (1/2, 1), got {a}"
            )));
        }
        Ok(Self { gamma0, a, offset })
    }

    pub fn gamma0(&self) -> f64 {
        self.gamma0
    }

    pub fn exponent(&self) -> f64 {
        self.a
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    /// `γ_t` for the stage-local counter `t ≥ 1`.
    pub fn rate_at(&self, t: usize) -> f64 {
        let s = (t + self.offset).max(1) as f64;
        self.gamma0 * s.powf(-self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchGrowth {
    Constant,
    Logarithmic,
}

/// Moment and Jacobian mini-batch sizes per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub moment_batch: usize,
    pub jacobian_base: usize,
    pub growth: BatchGrowth,
    /// Iteration index `N` after which logarithmic growth starts.
    pub stage_start: usize,
}

impl BatchSchedule {
    pub fn constant(jacobian_batch: usize, moment_batch: usize) -> Result<Self> {
        Self::new(jacobian_batch, moment_batch, BatchGrowth::Constant, 0)
    }

    pub fn new(
        jacobian_base: usize,
        moment_batch: usize,
        growth: BatchGrowth,
        stage_start: usize,
    ) -> Result<Self> {
        if jacobian_base == 0 || moment_batch == 0 {
            return Err(SlimError::config("batch sizes must be positive"));
        }
        Ok(Self {
            moment_batch,
            jacobian_base,
            growth,
            stage_start,
        })
    }

    /// `B_{G,t}` at the global iteration index `t`. Logarithmic mode adds
    /// `⌊ln(t - N)⌋` once `t > N`.
    pub fn jacobian_batch(&self, t: usize) -> usize {
        match self.growth {
            BatchGrowth::Constant => self.jacobian_base,
            BatchGrowth::Logarithmic if t > self.stage_start => {
                self.jacobian_base + ((t - self.stage_start) as f64).ln().floor() as usize
            }
            BatchGrowth::Logarithmic => self.jacobian_base,
        }
    }
}

/// Epoch-level schedule of the warm-start stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStartConfig {
    pub batch: usize,
    pub epochs: usize,
    pub gamma0: f64,
    #[serde(default = "default_exponent")]
    pub a: f64,
}

pub(crate) fn default_exponent() -> f64 {
    0.501
}

impl WarmStartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(SlimError::config("warm-start batch and epochs must be positive"));
        }
        LearningRate::new(self.gamma0, self.a).map(|_| ())
    }

    /// `γ_e = γ_{0,ws} e^{-a}` for epoch `e ≥ 1`.
    pub fn rate_at_epoch(&self, e: usize) -> f64 {
        self.gamma0 * (e.max(1) as f64).powf(-self.a)
    }
}

/// Outcome of the `γ₀` rule of thumb.
#[derive(Debug, Clone, PartialEq)]
pub struct Gamma0Selection {
    pub gamma0: f64,
    /// Median spectral norm `Ψ₀`.
    pub psi0: f64,
    pub batches_used: usize,
}

/// Rule-of-thumb `γ₀ = B_main / (s₀ Ψ₀ B_ws)` with `Ψ₀` the lower median of
/// `‖G̃'G̃‖₂` over disjoint warm-start-sized batches at `θ_ws`.
///
/// The batches are consecutive blocks of a seeded permutation of the rows;
/// when there are more than `batch_index_set_limit` of them a seeded subset
/// of that size is used. `weight_root`, when given, pre-multiplies each
/// batch Jacobian.
#[allow(clippy::too_many_arguments)]
pub fn select_gamma0<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    theta_ws: &DVector<T>,
    cfg: &WarmStartConfig,
    batch_main: usize,
    s0: f64,
    batch_index_set_limit: usize,
    weight_root: Option<&DMatrix<T>>,
    seed: u64,
) -> Result<Gamma0Selection> {
    if !(s0 > 0.0) {
        return Err(SlimError::config("s0 must be positive"));
    }
    if theta_ws.iter().any(|v| !v.is_finite()) {
        return Err(SlimError::Tuning("warm-start estimate is not finite".into()));
    }
    let n = data.n();
    let blocks = n / cfg.batch.max(1);
    if blocks == 0 || batch_index_set_limit == 0 {
        return Err(SlimError::Tuning(format!(
            "no batch of size {} fits in n = {n}",
            cfg.batch
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = (0..blocks).collect();
    if blocks > batch_index_set_limit {
        chosen.shuffle(&mut rng);
        chosen.truncate(batch_index_set_limit);
        chosen.sort_unstable();
    }
    let norms: Vec<Result<f64>> = chosen
        .par_iter()
        .map(|&b| {
            let idx = &order[b * cfg.batch..(b + 1) * cfg.batch];
            let mut scratch = BatchScratch::for_model(model);
            let mut jac = DMatrix::zeros(model.dim_moments(), model.dim_theta());
            batch_mean_jacobian(model, data, idx, theta_ws, &mut scratch, &mut jac)?;
            if let Some(root) = weight_root {
                jac = root * jac;
            }
            Ok(spectral_norm_psd(&(jac.transpose() * &jac)).as_f64())
        })
        .collect();
    let norms = norms.into_iter().collect::<Result<Vec<f64>>>()?;
    let psi0 = psi_from_norms(&norms)?;
    Ok(Gamma0Selection {
        gamma0: gamma0_from_psi(psi0, s0, batch_main, cfg.batch),
        psi0,
        batches_used: norms.len(),
    })
}

/// Lower median of the batch spectral norms; errors when it is zero.
pub fn psi_from_norms(norms: &[f64]) -> Result<f64> {
    let psi0 = lower_median(norms)
        .ok_or_else(|| SlimError::Tuning("no batches available".into()))?;
    if !(psi0 > 0.0) || !psi0.is_finite() {
        return Err(SlimError::Tuning(format!(
            "median Jacobian spectral norm is {psi0}; cannot scale the learning rate"
        )));
    }
    Ok(psi0)
}

pub fn gamma0_from_psi(psi0: f64, s0: f64, batch_main: usize, batch_ws: usize) -> f64 {
    batch_main as f64 / (s0 * psi0 * batch_ws as f64)
}

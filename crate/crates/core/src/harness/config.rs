//! Experiment configuration, read from TOML with unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlimError};
use crate::inference::InferenceMode;
use crate::jtest::JVariant;
use crate::model::{EasiDgpConfig, LinearIvDesign};
use crate::refine::WeightMode;
use crate::schedule::{BatchGrowth, WarmStartConfig, DEFAULT_BATCH_INDEX_SET_LIMIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    FirstOrder,
    /// Refinement stage with `W` but without the `(Φ'WΦ)†` preconditioner.
    FirstOrderRefinedWeight,
    SecondOrder,
}

impl Pipeline {
    pub fn refines(self) -> bool {
        !matches!(self, Pipeline::FirstOrder)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMethod {
    RandomScaling,
    Plugin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreWeight {
    #[default]
    None,
    /// `I ⊗ (n⁻¹ Σ q q')⁻¹`, applied through its symmetric square root.
    TwoSls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EasiPreset {
    #[default]
    Reduced,
}

/// EASI data design: a preset, or a full coefficient set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EasiSpec {
    #[serde(default)]
    pub preset: EasiPreset,
    /// Replaces the preset entirely when given.
    #[serde(default)]
    pub params: Option<EasiDgpConfig>,
    /// Overrides the instrument contamination of the preset or `params`.
    #[serde(default)]
    pub instrument_contamination: Option<f64>,
}

impl EasiSpec {
    pub fn resolve(&self) -> Result<EasiDgpConfig> {
        let mut cfg = match &self.params {
            Some(p) => p.clone(),
            None => match self.preset {
                EasiPreset::Reduced => EasiDgpConfig::reduced_default(),
            },
        };
        if let Some(c) = self.instrument_contamination {
            cfg.instrument_contamination = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpConfig {
    LinearIv(LinearIvDesign),
    Easi(EasiSpec),
}

/// A linear hypothesis `Rθ = c`; `c` defaults to `R θ_o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisSpec {
    pub name: String,
    pub r: Vec<Vec<f64>>,
    #[serde(default)]
    pub c: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsMode {
    #[default]
    Sampling,
    Fixed,
}

impl RsMode {
    pub fn mode(self) -> InferenceMode {
        match self {
            RsMode::Sampling => InferenceMode::RandomScalingSampling,
            RsMode::Fixed => InferenceMode::RandomScalingFixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub stride: usize,
    /// Replications `0..reps` get a trace file.
    #[serde(default = "one")]
    pub reps: usize,
}

fn one() -> usize {
    1
}
fn default_a() -> f64 {
    0.501
}
fn default_s0() -> f64 {
    5.0
}
fn default_refine_gamma0() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.05
}
fn default_workers() -> usize {
    1
}
fn default_minibatches() -> usize {
    1000
}
fn default_inference() -> Vec<InferenceMethod> {
    vec![InferenceMethod::RandomScaling]
}
fn default_growth() -> BatchGrowth {
    BatchGrowth::Logarithmic
}
fn default_limit() -> usize {
    DEFAULT_BATCH_INDEX_SET_LIMIT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub n: usize,
    pub reps: usize,
    pub pipeline: Pipeline,
    /// First-stage iterations `N`.
    #[serde(rename = "N")]
    pub n_first: usize,
    /// Final iteration `T` of the refinement stage.
    #[serde(rename = "T", default)]
    pub t_total: Option<usize>,
    #[serde(rename = "B_g")]
    pub b_g: usize,
    #[serde(rename = "B_G0")]
    pub b_g0: usize,
    /// Growth of the Jacobian batch during refinement.
    #[serde(default = "default_growth")]
    pub batch_growth: BatchGrowth,
    #[serde(default)]
    pub warm_start: Option<WarmStartConfig>,
    /// Fixed `γ₀`; when absent the rule of thumb is applied after the warm start.
    #[serde(default)]
    pub gamma0: Option<f64>,
    #[serde(default = "default_s0")]
    pub s0: f64,
    #[serde(default = "default_limit")]
    pub batch_index_set_limit: usize,
    /// Learning-rate exponent `a`.
    #[serde(default = "default_a")]
    pub a: f64,
    /// `γ₀` of the preconditioned refinement updates.
    #[serde(default = "default_refine_gamma0")]
    pub refine_gamma0: f64,
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(rename = "M_MB", default = "default_minibatches")]
    pub m_mb: usize,
    /// Zero cross-equation blocks of the weight (EASI only).
    #[serde(default)]
    pub equation_independent_weight: bool,
    #[serde(default)]
    pub phi_row_cap: Option<usize>,
    #[serde(default)]
    pub pre_weight: PreWeight,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "default_inference")]
    pub inference: Vec<InferenceMethod>,
    #[serde(default)]
    pub rs_mode: RsMode,
    #[serde(default)]
    pub jtests: Vec<JVariant>,
    /// Coordinates of θ reported individually (each gets `θ_k = θ_o,k`).
    #[serde(default)]
    pub targets: Vec<usize>,
    #[serde(default)]
    pub hypotheses: Vec<HypothesisSpec>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Also run identity-weight first-order steps up to `T` from the same
    /// first stage (an equal-budget comparator).
    #[serde(default)]
    pub compare_first_order: bool,
    /// Also compute full-sample two-step GMM per replication.
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub trace: Option<TraceConfig>,
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub parallel_workers: usize,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SlimError::config(e.to_string()))
    }

    /// `T` for refining pipelines.
    pub fn total(&self) -> usize {
        self.t_total.unwrap_or(self.n_first)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SlimError::config(m));
        if self.reps == 0 {
            return fail("reps must be at least 1".into());
        }
        if self.n == 0 || self.n_first == 0 || self.b_g == 0 || self.b_g0 == 0 {
            return fail("n, N, B_g and B_G0 must be positive".into());
        }
        if self.parallel_workers == 0 {
            return fail("parallel_workers must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.pipeline.refines() {
            match self.t_total {
                Some(t) if t > self.n_first => {}
                _ => return fail("T must exceed N for refining pipelines".into()),
            }
        } else {
            if self.jtests.iter().any(|j| *j != JVariant::Debiased) {
                return fail("plug-in and online J tests need a refining pipeline".into());
            }
            if self.inference.contains(&InferenceMethod::Plugin) {
                return fail("plug-in inference needs a refining pipeline".into());
            }
            if self.compare_first_order {
                return fail("compare_first_order needs a refining pipeline".into());
            }
        }
        if let Some(ws) = &self.warm_start {
            ws.validate()?;
        }
        if self.gamma0.is_none() && self.warm_start.is_none() {
            return fail("either gamma0 or warm_start must be given".into());
        }
        if !(self.s0 > 0.0) || !(self.refine_gamma0 > 0.0) {
            return fail("s0 and refine_gamma0 must be positive".into());
        }
        if self.weight_mode == WeightMode::Minibatch && self.pipeline.refines() && self.m_mb == 0 {
            return fail("M_MB must be positive".into());
        }
        crate::schedule::LearningRate::new(self.gamma0.unwrap_or(1.0), self.a)?;
        match &self.dgp {
            DgpConfig::LinearIv(d) => {
                d.validate()?;
                if self.equation_independent_weight {
                    return fail("equation_independent_weight applies to EASI only".into());
                }
            }
            DgpConfig::Easi(e) => {
                e.resolve()?;
            }
        }
        if let Some(t) = &self.trace {
            if t.stride == 0 {
                return fail("trace stride must be positive".into());
            }
        }
        Ok(())
    }
}

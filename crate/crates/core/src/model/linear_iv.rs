//! Linear instrumental-variables design with moments `g = q (y - x'θ)`.
//!
//! Records are laid out as `[y, x_1..x_d, q_1..q_dg]`. The design draws
//! standard-normal latent instruments `ζ`, observed instruments
//! `q_j = s_j ζ_j` (equicorrelated through `instrument_corr`), regressors
//! `x_k = relevance · Σ_{j ≡ k mod d} ζ_j + v_k`, and structural errors
//! `u = σ h(ζ) (ρ v_1 + √(1-ρ²) η)`. `h` introduces conditional
//! heteroskedasticity driven by the surplus instruments, and `contamination`
//! adds `c · u` to the last observed instrument, which breaks `E[q u] = 0`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, MomentModel};
use crate::error::{Result, SlimError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearIvDesign {
    /// True coefficients `θ_o`; its length is `d`.
    pub theta_o: Vec<f64>,
    /// Number of instruments `d_g`.
    pub d_g: usize,
    /// Per-instrument scale `s_j`; empty means all ones.
    #[serde(default)]
    pub instrument_scale: Vec<f64>,
    /// Equicorrelation of the latent instruments.
    #[serde(default)]
    pub instrument_corr: f64,
    #[serde(default = "default_relevance")]
    pub relevance: f64,
    #[serde(default = "default_error_scale")]
    pub error_scale: f64,
    /// Correlation `ρ` between the structural error and the first
    /// first-stage error.
    #[serde(default)]
    pub endogeneity: f64,
    /// Heteroskedasticity strength; 0 gives homoskedastic errors.
    #[serde(default)]
    pub heteroskedasticity: f64,
    /// Invalid-instrument strength; 0 gives a correctly specified model.
    #[serde(default)]
    pub contamination: f64,
}

fn default_relevance() -> f64 {
    1.0
}

fn default_error_scale() -> f64 {
    1.0
}

impl Default for LinearIvDesign {
    fn default() -> Self {
        Self {
            theta_o: vec![1.0, -0.5],
            d_g: 4,
            instrument_scale: Vec::new(),
            instrument_corr: 0.0,
            relevance: 1.0,
            error_scale: 1.0,
            endogeneity: 0.5,
            heteroskedasticity: 0.0,
            contamination: 0.0,
        }
    }
}

impl LinearIvDesign {
    pub fn d(&self) -> usize {
        self.theta_o.len()
    }

    pub fn record_width(&self) -> usize {
        1 + self.d() + self.d_g
    }

    fn scales(&self) -> Vec<f64> {
        if self.instrument_scale.is_empty() {
            vec![1.0; self.d_g]
        } else {
            self.instrument_scale.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 {
            return Err(SlimError::config("theta_o must be non-empty"));
        }
        if self.d_g < d {
            return Err(SlimError::config(format!(
                "need at least as many instruments as parameters (d = {d}, d_g = {})",
                self.d_g
            )));
        }
        if !self.instrument_scale.is_empty() && self.instrument_scale.len() != self.d_g {
            return Err(SlimError::dimension(
                "instrument_scale",
                self.d_g,
                self.instrument_scale.len(),
            ));
        }
        if self.scales().iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(SlimError::config("instrument scales must be positive"));
        }
        // Equicorrelation matrix is PD iff -1/(k-1) < ρ < 1.
        let k = self.d_g as f64;
        let lower = if self.d_g > 1 { -1.0 / (k - 1.0) } else { -1.0 };
        if !(self.instrument_corr > lower && self.instrument_corr < 1.0) {
            return Err(SlimError::config(
                "instrument covariance is not positive definite",
            ));
        }
        if !(self.endogeneity.abs() < 1.0) {
            return Err(SlimError::config("endogeneity must lie in (-1, 1)"));
        }
        if !(self.error_scale >= 0.0) || !(self.heteroskedasticity >= 0.0) {
            return Err(SlimError::config(
                "error_scale and heteroskedasticity must be non-negative",
            ));
        }
        if self.theta_o.iter().any(|v| !v.is_finite()) {
            return Err(SlimError::config("theta_o must be finite"));
        }
        Ok(())
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut cols = vec!["y".to_string()];
        cols.extend((1..=self.d()).map(|k| format!("x{k}")));
        cols.extend((1..=self.d_g).map(|j| format!("q{j}")));
        cols
    }

    /// Lower Cholesky factor of the latent instrument correlation matrix.
    fn instrument_factor(&self) -> DMatrix<f64> {
        let k = self.d_g;
        let rho = self.instrument_corr;
        let corr = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho });
        corr.cholesky()
            .expect("validated equicorrelation is positive definite")
            .unpack()
    }

    /// Draws one record into `out` using `rng`.
    fn draw_record<R: Rng>(
        &self,
        rng: &mut R,
        scales: &[f64],
        factor: &DMatrix<f64>,
        out: &mut Vec<f64>,
    ) {
        let (d, d_g) = (self.d(), self.d_g);
        let raw = DVector::<f64>::from_fn(d_g, |_, _| rng.sample(StandardNormal));
        let zeta = factor * raw;
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let eta: f64 = rng.sample(StandardNormal);
        let surplus = d_g - d;
        let h = self.heteroskedasticity;
        let het = if h > 0.0 && surplus > 0 {
            let s: f64 = zeta.iter().skip(d).map(|z| z * z).sum();
            ((1.0 + h * s) / (1.0 + h * surplus as f64)).sqrt()
        } else {
            1.0
        };
        let e = self.endogeneity;
        let u = self.error_scale * het * (e * v[0] + (1.0 - e * e).sqrt() * eta);
        let x: Vec<f64> = (0..d)
            .map(|k| {
                let lin: f64 = zeta.iter().skip(k).step_by(d).sum();
                self.relevance * lin + v[k]
            })
            .collect();
        let y: f64 = x.iter().zip(&self.theta_o).map(|(a, b)| a * b).sum::<f64>() + u;
        out.push(y);
        out.extend_from_slice(&x);
        for j in 0..d_g {
            let mut q = scales[j] * zeta[j];
            if j == d_g - 1 {
                q += self.contamination * u;
            }
            out.push(q);
        }
    }
}

/// Draws `n` records from the design. Deterministic in `seed`.
pub fn generate_linear_iv(design: &LinearIvDesign, n: usize, seed: u64) -> Result<Dataset<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_linear_iv_with(design, n, &mut rng)
}

/// As [`generate_linear_iv`], drawing from a caller-supplied stream.
pub fn generate_linear_iv_with<R: Rng>(
    design: &LinearIvDesign,
    n: usize,
    rng: &mut R,
) -> Result<Dataset<f64>> {
    design.validate()?;
    if n == 0 {
        return Err(SlimError::config("sample size must be at least 1"));
    }
    let scales = design.scales();
    let factor = design.instrument_factor();
    let mut values = Vec::with_capacity(n * design.record_width());
    for _ in 0..n {
        design.draw_record(rng, &scales, &factor, &mut values);
    }
    Dataset::new(values, design.record_width(), design.column_names())
}

/// `g(z, θ) = q (y - x'θ)` with constant Jacobian `-q x'`.
#[derive(Debug, Clone)]
pub struct LinearIvModel {
    d: usize,
    d_g: usize,
}

impl LinearIvModel {
    pub fn new(d: usize, d_g: usize) -> Result<Self> {
        if d == 0 || d_g < d {
            return Err(SlimError::config(format!(
                "linear IV model needs 1 <= d <= d_g (d = {d}, d_g = {d_g})"
            )));
        }
        Ok(Self { d, d_g })
    }

    pub fn from_design(design: &LinearIvDesign) -> Result<Self> {
        design.validate()?;
        Self::new(design.d(), design.d_g)
    }

    /// Sample cross moments `(n⁻¹ Σ q y, n⁻¹ Σ q x')`, so that
    /// `ḡ_n(θ) = s_qy - S_qx θ`.
    pub fn cross_moments<T: Scalar>(&self, data: &Dataset<T>) -> (DVector<T>, DMatrix<T>) {
        let (d, d_g) = (self.d, self.d_g);
        let mut qy = DVector::<T>::zeros(d_g);
        let mut qx = DMatrix::<T>::zeros(d_g, d);
        for row in data.rows() {
            let y = row[0];
            let x = &row[1..1 + d];
            let q = &row[1 + d..];
            for j in 0..d_g {
                qy[j] += q[j] * y;
                for k in 0..d {
                    qx[(j, k)] += q[j] * x[k];
                }
            }
        }
        let inv_n = T::one() / T::from_count(data.n());
        (qy * inv_n, qx * inv_n)
    }

    /// `n⁻¹ Σ q q'`.
    pub fn instrument_second_moment<T: Scalar>(&self, data: &Dataset<T>) -> DMatrix<T> {
        let d = self.d;
        let mut qq = DMatrix::<T>::zeros(self.d_g, self.d_g);
        for row in data.rows() {
            let q = DVector::from_column_slice(&row[1 + d..]);
            qq.ger(T::one(), &q, &q, T::one());
        }
        qq / T::from_count(data.n())
    }
}

impl<T: Scalar> MomentModel<T> for LinearIvModel {
    fn dim_theta(&self) -> usize {
        self.d
    }

    fn dim_moments(&self) -> usize {
        self.d_g
    }

    fn record_width(&self) -> usize {
        1 + self.d + self.d_g
    }

    fn columns(&self) -> Vec<String> {
        let mut cols = vec!["y".to_string()];
        cols.extend((1..=self.d).map(|k| format!("x{k}")));
        cols.extend((1..=self.d_g).map(|j| format!("q{j}")));
        cols
    }

    #[inline]
    fn moment(&self, record: &[T], theta: &DVector<T>, out: &mut [T]) -> Result<()> {
        let d = self.d;
        let mut resid = record[0];
        for k in 0..d {
            resid -= record[1 + k] * theta[k];
        }
        for (o, &q) in out.iter_mut().zip(&record[1 + d..]) {
            *o = q * resid;
        }
        Ok(())
    }

    #[inline]
    fn jacobian(&self, record: &[T], _theta: &DVector<T>, out: &mut DMatrix<T>) -> Result<()> {
        let d = self.d;
        let x = &record[1..1 + d];
        let q = &record[1 + d..];
        for k in 0..d {
            for j in 0..self.d_g {
                out[(j, k)] = -q[j] * x[k];
            }
        }
        Ok(())
    }
}

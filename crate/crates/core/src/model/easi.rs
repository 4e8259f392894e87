//! EASI budget-share demand system estimated by nonlinear GMM.
//!
//! With `m = J - 1` retained share equations, a record is
//! `[w_1..w_m, x, p_1..p_m, z_1..z_L]` where `w` are budget shares, `x` is
//! log expenditure, `p` are log prices relative to the dropped good and `z`
//! are demographics. Implicit utility is
//!
//! ```text
//! y = (x - p'w + ½ Σ_l z_l p'A_l p) / (1 - ½ p'B p),   z_0 = 1
//! ```
//!
//! and the fitted shares are
//! `ŵ = Σ_r b_r y^r + C z + D z y + Σ_l z_l A_l p + B p y`.
//! The moment vector stacks `e_j · q` equation by equation, where `e = w - ŵ`
//! and `q = [1, x..x⁵, p, z, z x, p x, p z_1, .., p z_L]`.
//!
//! `A_l` and `B` are symmetric; only their upper triangles are free
//! parameters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, MomentModel};
use crate::error::{Result, SlimError};
use crate::scalar::Scalar;

/// Highest power of implicit utility in the share equations.
pub const POLY_ORDER: usize = 5;

/// `1 - ½ p'B p` at or below this value is treated as singular.
pub const DENOMINATOR_TOL: f64 = 1e-8;

/// Offsets of each coefficient block inside the flat parameter vector.
///
/// Order: `b_0..b_5` (each `m`), `C` and `D` (each `m × L`, row-major by
/// equation), `A_0..A_L` and `B` (each the `m(m+1)/2` upper triangle,
/// row-major).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EasiLayout {
    /// Retained equations `m = J - 1`.
    pub m: usize,
    /// Demographics `L`.
    pub l: usize,
}

impl EasiLayout {
    pub fn new(goods: usize, demographics: usize) -> Result<Self> {
        if goods < 2 {
            return Err(SlimError::config("EASI needs at least two goods"));
        }
        Ok(Self {
            m: goods - 1,
            l: demographics,
        })
    }

    pub fn tri(&self) -> usize {
        self.m * (self.m + 1) / 2
    }

    pub fn b(&self, r: usize, j: usize) -> usize {
        r * self.m + j
    }

    pub fn c(&self, j: usize, l: usize) -> usize {
        (POLY_ORDER + 1) * self.m + j * self.l + l
    }

    pub fn d_block(&self, j: usize, l: usize) -> usize {
        (POLY_ORDER + 1) * self.m + self.m * self.l + j * self.l + l
    }

    /// Position of the `(a, b)` entry (either order) of `A_l`.
    pub fn a(&self, l: usize, a: usize, b: usize) -> usize {
        (POLY_ORDER + 1) * self.m + 2 * self.m * self.l + l * self.tri() + self.tri_index(a, b)
    }

    /// Position of the `(a, b)` entry (either order) of `B`.
    pub fn bp(&self, a: usize, b: usize) -> usize {
        (POLY_ORDER + 1) * self.m
            + 2 * self.m * self.l
            + (self.l + 1) * self.tri()
            + self.tri_index(a, b)
    }

    fn tri_index(&self, a: usize, b: usize) -> usize {
        let (i, j) = if a <= b { (a, b) } else { (b, a) };
        // row i of the upper triangle starts at i*m - i(i-1)/2
        i * self.m - i * i.saturating_sub(1) / 2 + (j - i)
    }

    /// Parameter dimension under symmetry.
    pub fn dim_theta(&self) -> usize {
        (POLY_ORDER + 1) * self.m + 2 * self.m * self.l + (self.l + 2) * self.tri()
    }

    /// Instrument count `dim(q)`.
    pub fn dim_instruments(&self) -> usize {
        (POLY_ORDER + 1) + 2 * self.l + self.m * (2 + self.l)
    }

    pub fn dim_moments(&self) -> usize {
        self.m * self.dim_instruments()
    }

    pub fn record_width(&self) -> usize {
        2 * self.m + 1 + self.l
    }
}

/// Synthetic stand-in for the survey rows `(x, p, z)` that the DGP resamples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSampleConfig {
    pub size: usize,
    pub seed: u64,
    /// Mean and SD of log expenditure.
    pub x_mean: f64,
    pub x_sd: f64,
    /// Number of distinct relative log-price vectors and their SD.
    pub price_points: usize,
    pub price_sd: f64,
}

impl Default for BaseSampleConfig {
    fn default() -> Self {
        Self {
            size: 4847,
            seed: 20_250_101,
            x_mean: 0.1,
            x_sd: 0.4,
            price_points: 48,
            price_sd: 0.15,
        }
    }
}

/// Base rows `(x, p, z)` with `z` scaled to unit maximum absolute value.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSample {
    pub x: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

impl BaseSample {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Log-normal expenditure (so Gaussian `x`), prices drawn from a small
    /// grid of Gaussian log-price vectors, and bounded demographics that
    /// alternate between a continuous uniform and a binary indicator.
    pub fn synthetic(cfg: &BaseSampleConfig, layout: EasiLayout) -> Result<Self> {
        if cfg.size == 0 || cfg.price_points == 0 {
            return Err(SlimError::config("base sample and price grid must be non-empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let grid: Vec<Vec<f64>> = (0..cfg.price_points)
            .map(|_| {
                (0..layout.m)
                    .map(|_| cfg.price_sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut x = Vec::with_capacity(cfg.size);
        let mut p = Vec::with_capacity(cfg.size);
        let mut z = Vec::with_capacity(cfg.size);
        for _ in 0..cfg.size {
            x.push(cfg.x_mean + cfg.x_sd * rng.sample::<f64, _>(StandardNormal));
            p.push(grid[rng.random_range(0..grid.len())].clone());
            let zi: Vec<f64> = (0..layout.l)
                .map(|l| {
                    if l % 2 == 0 {
                        rng.random_range(-25.0..25.0)
                    } else if rng.random_bool(0.4) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            z.push(zi);
        }
        for l in 0..layout.l {
            let max = z.iter().fold(0.0f64, |a, zi| a.max(zi[l].abs()));
            if max > 0.0 {
                for zi in z.iter_mut() {
                    zi[l] /= max;
                }
            }
        }
        Ok(Self { x, p, z })
    }
}

/// Coefficients and design of the simulated EASI system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EasiDgpConfig {
    /// Number of goods `J`; `J - 1` equations are retained.
    pub goods: usize,
    /// Number of demographics `L`.
    pub demographics: usize,
    /// `b_0..b_5`, each of length `J - 1`.
    pub b: Vec<Vec<f64>>,
    /// `C`, `(J-1) × L`.
    pub c: Vec<Vec<f64>>,
    /// `D`, `(J-1) × L`.
    pub d: Vec<Vec<f64>>,
    /// `A_0..A_L`, each symmetric `(J-1) × (J-1)`.
    pub a: Vec<Vec<Vec<f64>>>,
    /// Price-utility interaction `B`, symmetric `(J-1) × (J-1)`.
    pub b_price: Vec<Vec<f64>>,
    /// Residual SDs per retained equation.
    pub sigma: Vec<f64>,
    /// Average budget shares substituted into the implicit-utility formula
    /// when simulating.
    pub w_bar: Vec<f64>,
    #[serde(default)]
    pub base: BaseSampleConfig,
    /// Instrument contamination `c`: instruments use `x - c p'w` in place
    /// of `x`.
    #[serde(default)]
    pub instrument_contamination: f64,
}

impl EasiDgpConfig {
    pub fn layout(&self) -> Result<EasiLayout> {
        EasiLayout::new(self.goods, self.demographics)
    }

    /// Every coefficient block zero, unit-free residuals switched off.
    pub fn zeros(goods: usize, demographics: usize) -> Result<Self> {
        let lay = EasiLayout::new(goods, demographics)?;
        let (m, l) = (lay.m, lay.l);
        Ok(Self {
            goods,
            demographics,
            b: vec![vec![0.0; m]; POLY_ORDER + 1],
            c: vec![vec![0.0; l]; m],
            d: vec![vec![0.0; l]; m],
            a: vec![vec![vec![0.0; m]; m]; l + 1],
            b_price: vec![vec![0.0; m]; m],
            sigma: vec![0.0; m],
            w_bar: vec![0.0; m],
            base: BaseSampleConfig::default(),
            instrument_contamination: 0.0,
        })
    }

    /// The reduced three-good, one-demographic design used by the tests and
    /// the default harness configuration.
    pub fn reduced_default() -> Self {
        let mut cfg = Self::zeros(3, 1).expect("static layout");
        cfg.b = vec![
            vec![0.30, 0.25],
            vec![0.05, -0.04],
            vec![-0.02, 0.015],
            vec![0.010, -0.008],
            vec![-0.004, 0.003],
            vec![0.002, -0.001],
        ];
        cfg.c = vec![vec![0.02], vec![-0.015]];
        cfg.d = vec![vec![0.01], vec![0.008]];
        cfg.a = vec![
            vec![vec![0.06, -0.02], vec![-0.02, 0.05]],
            vec![vec![0.01, 0.005], vec![0.005, -0.01]],
        ];
        cfg.b_price = vec![vec![0.02, -0.01], vec![-0.01, 0.015]];
        cfg.sigma = vec![0.05, 0.04];
        cfg.w_bar = vec![0.30, 0.25];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let lay = self.layout()?;
        let (m, l) = (lay.m, lay.l);
        let bad = |what: &str| Err(SlimError::config(format!("EASI config: {what}")));
        if self.b.len() != POLY_ORDER + 1 || self.b.iter().any(|v| v.len() != m) {
            return bad("b must hold 6 vectors of length J-1");
        }
        if self.c.len() != m || self.c.iter().any(|v| v.len() != l) {
            return bad("C must be (J-1) x L");
        }
        if self.d.len() != m || self.d.iter().any(|v| v.len() != l) {
            return bad("D must be (J-1) x L");
        }
        let square = |mat: &Vec<Vec<f64>>| mat.len() == m && mat.iter().all(|r| r.len() == m);
        let symmetric = |mat: &Vec<Vec<f64>>| {
            (0..m).all(|i| (0..m).all(|j| (mat[i][j] - mat[j][i]).abs() <= 1e-12))
        };
        if self.a.len() != l + 1 || !self.a.iter().all(square) {
            return bad("A must hold L+1 square (J-1) matrices");
        }
        if !self.a.iter().all(symmetric) {
            return bad("A_l must be symmetric");
        }
        if !square(&self.b_price) || !symmetric(&self.b_price) {
            return bad("B must be a symmetric (J-1) square matrix");
        }
        if self.sigma.len() != m || self.sigma.iter().any(|&s| !(s >= 0.0)) {
            return bad("sigma must hold J-1 non-negative SDs");
        }
        if self.w_bar.len() != m {
            return bad("w_bar must have length J-1");
        }
        Ok(())
    }

    /// Flat true parameter vector in [`EasiLayout`] order.
    pub fn theta_true(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let lay = self.layout()?;
        let mut theta = vec![0.0; lay.dim_theta()];
        for r in 0..=POLY_ORDER {
            for j in 0..lay.m {
                theta[lay.b(r, j)] = self.b[r][j];
            }
        }
        for j in 0..lay.m {
            for l in 0..lay.l {
                theta[lay.c(j, l)] = self.c[j][l];
                theta[lay.d_block(j, l)] = self.d[j][l];
            }
        }
        for a in 0..lay.m {
            for b in a..lay.m {
                for l in 0..=lay.l {
                    theta[lay.a(l, a, b)] = self.a[l][a][b];
                }
                theta[lay.bp(a, b)] = self.b_price[a][b];
            }
        }
        Ok(theta)
    }

    pub fn column_names(&self) -> Result<Vec<String>> {
        let lay = self.layout()?;
        let mut cols: Vec<String> = (1..=lay.m).map(|j| format!("w{j}")).collect();
        cols.push("x".into());
        cols.extend((1..=lay.m).map(|j| format!("p{j}")));
        cols.extend((1..=lay.l).map(|l| format!("z{l}")));
        Ok(cols)
    }
}

/// Unpacked coefficient blocks, used on both the simulation and the
/// estimation side.
struct Coefs<T> {
    b: Vec<Vec<T>>,
    c: Vec<Vec<T>>,
    d: Vec<Vec<T>>,
    a: Vec<Vec<Vec<T>>>,
    bp: Vec<Vec<T>>,
}

impl<T: Scalar> Coefs<T> {
    fn from_theta(lay: &EasiLayout, theta: &[T]) -> Self {
        let (m, l) = (lay.m, lay.l);
        let b = (0..=POLY_ORDER)
            .map(|r| (0..m).map(|j| theta[lay.b(r, j)]).collect())
            .collect();
        let c = (0..m)
            .map(|j| (0..l).map(|k| theta[lay.c(j, k)]).collect())
            .collect();
        let d = (0..m)
            .map(|j| (0..l).map(|k| theta[lay.d_block(j, k)]).collect())
            .collect();
        let a = (0..=l)
            .map(|k| {
                (0..m)
                    .map(|i| (0..m).map(|j| theta[lay.a(k, i, j)]).collect())
                    .collect()
            })
            .collect();
        let bp = (0..m)
            .map(|i| (0..m).map(|j| theta[lay.bp(i, j)]).collect())
            .collect();
        Self { b, c, d, a, bp }
    }
}

fn mat_vec<T: Scalar>(mat: &[Vec<T>], v: &[T]) -> Vec<T> {
    mat.iter()
        .map(|row| row.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
        .collect()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Pieces of the implicit-utility transform shared by moments and Jacobian.
struct Utility<T> {
    numerator: T,
    denominator: T,
    y: T,
    /// `A_l p` for `l = 0..L`.
    a_p: Vec<Vec<T>>,
    b_p: Vec<T>,
}

fn implicit_utility<T: Scalar>(
    coefs: &Coefs<T>,
    x: T,
    p: &[T],
    z_full: &[T],
    shares: &[T],
) -> Result<Utility<T>> {
    let half = T::lit(0.5);
    let a_p: Vec<Vec<T>> = coefs.a.iter().map(|a| mat_vec(a, p)).collect();
    let b_p = mat_vec(&coefs.bp, p);
    let mut numerator = x - dot(p, shares);
    for (zl, ap) in z_full.iter().zip(&a_p) {
        numerator += half * *zl * dot(p, ap);
    }
    let denominator = T::one() - half * dot(p, &b_p);
    if denominator <= T::lit(DENOMINATOR_TOL) {
        return Err(SlimError::Model(format!(
            "implicit-utility denominator 1 - p'Bp/2 = {} is not positive",
            denominator.as_f64()
        )));
    }
    Ok(Utility {
        numerator,
        denominator,
        y: numerator / denominator,
        a_p,
        b_p,
    })
}

fn fitted_shares<T: Scalar>(coefs: &Coefs<T>, u: &Utility<T>, z: &[T], z_full: &[T]) -> Vec<T> {
    let m = coefs.b[0].len();
    (0..m)
        .map(|j| {
            let mut w = T::zero();
            let mut ypow = T::one();
            for r in 0..=POLY_ORDER {
                w += coefs.b[r][j] * ypow;
                ypow *= u.y;
            }
            w += dot(&coefs.c[j], z) + dot(&coefs.d[j], z) * u.y;
            for (zl, ap) in z_full.iter().zip(&u.a_p) {
                w += *zl * ap[j];
            }
            w + u.b_p[j] * u.y
        })
        .collect()
}

/// Implicit utility of the simulation design: the observed shares are
/// replaced by `w̄_sample`.
pub fn simulated_utility(cfg: &EasiDgpConfig, x: f64, p: &[f64], z: &[f64]) -> Result<f64> {
    let lay = cfg.layout()?;
    let theta = cfg.theta_true()?;
    let coefs = Coefs::from_theta(&lay, &theta);
    let z_full: Vec<f64> = std::iter::once(1.0).chain(z.iter().copied()).collect();
    implicit_utility(&coefs, x, p, &z_full, &cfg.w_bar)
        .map(|u| u.y)
        .map_err(|e| SlimError::Generation(e.to_string()))
}

/// Draws `n` records `(w, x, p, z)` by resampling the base rows and solving
/// the share equations with independent Gaussian residuals.
pub fn generate_easi(cfg: &EasiDgpConfig, n: usize, seed: u64) -> Result<Dataset<f64>> {
    let lay = cfg.layout()?;
    let base = BaseSample::synthetic(&cfg.base, lay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_easi_from(cfg, &base, n, &mut rng)
}

/// As [`generate_easi`] with an explicit base sample and random stream.
pub fn generate_easi_from<R: Rng>(
    cfg: &EasiDgpConfig,
    base: &BaseSample,
    n: usize,
    rng: &mut R,
) -> Result<Dataset<f64>> {
    cfg.validate()?;
    if n == 0 {
        return Err(SlimError::config("sample size must be at least 1"));
    }
    if base.is_empty() {
        return Err(SlimError::config("base sample is empty"));
    }
    let lay = cfg.layout()?;
    let theta = cfg.theta_true()?;
    let coefs = Coefs::from_theta(&lay, &theta);
    let noise: Vec<Normal<f64>> = cfg
        .sigma
        .iter()
        .map(|&s| Normal::new(0.0, s).expect("validated sigma"))
        .collect();
    let mut values = Vec::with_capacity(n * lay.record_width());
    for _ in 0..n {
        let i = rng.random_range(0..base.len());
        let (x, p, z) = (base.x[i], &base.p[i], &base.z[i]);
        let z_full: Vec<f64> = std::iter::once(1.0).chain(z.iter().copied()).collect();
        let u = implicit_utility(&coefs, x, p, &z_full, &cfg.w_bar)
            .map_err(|e| SlimError::Generation(e.to_string()))?;
        let fitted = fitted_shares(&coefs, &u, z, &z_full);
        for (j, w) in fitted.iter().enumerate() {
            values.push(w + noise[j].sample(rng));
        }
        values.push(x);
        values.extend_from_slice(p);
        values.extend_from_slice(z);
    }
    Dataset::new(values, lay.record_width(), cfg.column_names()?)
}

/// EASI moment model with analytic Jacobian.
#[derive(Debug, Clone)]
pub struct EasiModel {
    layout: EasiLayout,
    contamination: f64,
    columns: Vec<String>,
}

impl EasiModel {
    pub fn new(layout: EasiLayout, contamination: f64) -> Self {
        let cfg = EasiDgpConfig::zeros(layout.m + 1, layout.l).expect("valid layout");
        Self {
            layout,
            contamination,
            columns: cfg.column_names().expect("valid layout"),
        }
    }

    pub fn from_config(cfg: &EasiDgpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::new(cfg.layout()?, cfg.instrument_contamination))
    }

    pub fn layout(&self) -> EasiLayout {
        self.layout
    }

    fn split<'a, T>(&self, record: &'a [T]) -> (&'a [T], T, &'a [T], &'a [T])
    where
        T: Copy,
    {
        let m = self.layout.m;
        (
            &record[..m],
            record[m],
            &record[m + 1..2 * m + 1],
            &record[2 * m + 1..],
        )
    }

    /// Instrument vector `q` for one record.
    pub fn instruments<T: Scalar>(&self, record: &[T]) -> Vec<T> {
        let (w, x, p, z) = self.split(record);
        let xi = x - T::lit(self.contamination) * dot(p, w);
        let mut q = Vec::with_capacity(self.layout.dim_instruments());
        let mut pow = T::one();
        for _ in 0..=POLY_ORDER {
            q.push(pow);
            pow *= xi;
        }
        q.extend_from_slice(p);
        q.extend_from_slice(z);
        q.extend(z.iter().map(|&zl| zl * xi));
        q.extend(p.iter().map(|&pj| pj * xi));
        for &zl in z {
            q.extend(p.iter().map(|&pj| pj * zl));
        }
        q
    }

    fn residuals<T: Scalar>(&self, record: &[T], theta: &DVector<T>) -> Result<(Vec<T>, Utility<T>, Coefs<T>)> {
        let (w, x, p, z) = self.split(record);
        let coefs = Coefs::from_theta(&self.layout, theta.as_slice());
        let z_full: Vec<T> = std::iter::once(T::one()).chain(z.iter().copied()).collect();
        let u = implicit_utility(&coefs, x, p, &z_full, w)?;
        let fitted = fitted_shares(&coefs, &u, z, &z_full);
        let e = w.iter().zip(&fitted).map(|(&a, &b)| a - b).collect();
        Ok((e, u, coefs))
    }
}

impl<T: Scalar> MomentModel<T> for EasiModel {
    fn dim_theta(&self) -> usize {
        self.layout.dim_theta()
    }

    fn dim_moments(&self) -> usize {
        self.layout.dim_moments()
    }

    fn record_width(&self) -> usize {
        self.layout.record_width()
    }

    fn columns(&self) -> Vec<String> {
        self.columns.clone()
    }

    fn moment(&self, record: &[T], theta: &DVector<T>, out: &mut [T]) -> Result<()> {
        let (e, _, _) = self.residuals(record, theta)?;
        let q = self.instruments(record);
        let k = q.len();
        for (j, &ej) in e.iter().enumerate() {
            for (t, &qt) in q.iter().enumerate() {
                out[j * k + t] = ej * qt;
            }
        }
        Ok(())
    }

    fn jacobian(&self, record: &[T], theta: &DVector<T>, out: &mut DMatrix<T>) -> Result<()> {
        let lay = self.layout;
        let (m, nl) = (lay.m, lay.l);
        let (_, _, p, z) = self.split(record);
        let (_, u, coefs) = self.residuals(record, theta)?;
        let z_full: Vec<T> = std::iter::once(T::one()).chain(z.iter().copied()).collect();
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        let y = u.y;

        // ∂y/∂θ: only A_l and B enter the implicit utility.
        let d = lay.dim_theta();
        let mut dy = vec![T::zero(); d];
        for a in 0..m {
            for b in a..m {
                let mult = if a == b { T::one() } else { two };
                let pp = p[a] * p[b] * mult * half;
                for l in 0..=nl {
                    dy[lay.a(l, a, b)] = z_full[l] * pp / u.denominator;
                }
                dy[lay.bp(a, b)] = u.numerator / (u.denominator * u.denominator) * pp;
            }
        }

        // ∂ŵ_j/∂θ = direct part + (∂ŵ_j/∂y) ∂y/∂θ.
        let mut ypow = [T::one(); POLY_ORDER + 1];
        for r in 1..=POLY_ORDER {
            ypow[r] = ypow[r - 1] * y;
        }
        let mut dw = DMatrix::<T>::zeros(m, d);
        for j in 0..m {
            let mut dwdy = dot(&coefs.d[j], z) + u.b_p[j];
            for r in 1..=POLY_ORDER {
                dwdy += T::from_count(r) * coefs.b[r][j] * ypow[r - 1];
            }
            for (k, &v) in dy.iter().enumerate() {
                if v != T::zero() {
                    dw[(j, k)] = dwdy * v;
                }
            }
            for r in 0..=POLY_ORDER {
                dw[(j, lay.b(r, j))] += ypow[r];
            }
            for l in 0..nl {
                dw[(j, lay.c(j, l))] += z[l];
                dw[(j, lay.d_block(j, l))] += z[l] * y;
            }
            // (A_l p)_j and (B p)_j depend on row j of the symmetric matrix.
            for c in 0..m {
                for l in 0..=nl {
                    dw[(j, lay.a(l, j, c))] += z_full[l] * p[c];
                }
                dw[(j, lay.bp(j, c))] += p[c] * y;
            }
        }

        let q = self.instruments(record);
        let k = q.len();
        for j in 0..m {
            for (t, &qt) in q.iter().enumerate() {
                let row = j * k + t;
                for c in 0..d {
                    out[(row, c)] = -qt * dw[(j, c)];
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::jacobian_fd_error;

    #[test]
    fn layout_indices_cover_parameter_vector_once() {
        for (goods, dem) in [(2, 0), (3, 1), (4, 2), (9, 5)] {
            let lay = EasiLayout::new(goods, dem).unwrap();
            let mut hits = vec![0usize; lay.dim_theta()];
            for r in 0..=POLY_ORDER {
                for j in 0..lay.m {
                    hits[lay.b(r, j)] += 1;
                }
            }
            for j in 0..lay.m {
                for l in 0..lay.l {
                    hits[lay.c(j, l)] += 1;
                    hits[lay.d_block(j, l)] += 1;
                }
            }
            for a in 0..lay.m {
                for b in a..lay.m {
                    for l in 0..=lay.l {
                        hits[lay.a(l, a, b)] += 1;
                    }
                    hits[lay.bp(a, b)] += 1;
                    assert_eq!(lay.a(0, a, b), lay.a(0, b, a));
                }
            }
            assert!(hits.iter().all(|&h| h == 1), "{goods} goods: {hits:?}");
        }
    }

    #[test]
    fn full_size_counts_match_published_dimensions() {
        let lay = EasiLayout::new(9, 5).unwrap();
        assert_eq!(lay.dim_theta(), 380);
        assert_eq!(lay.dim_moments(), 576);
    }

    #[test]
    fn zero_system_gives_zero_shares() {
        let cfg = EasiDgpConfig::zeros(3, 1).unwrap();
        let data = generate_easi(&cfg, 200, 1).unwrap();
        for row in data.rows() {
            assert_eq!(&row[..2], &[0.0, 0.0]);
        }
    }

    #[test]
    fn utility_reduces_without_price_curvature() {
        let mut cfg = EasiDgpConfig::reduced_default();
        cfg.b_price = vec![vec![0.0; 2]; 2];
        cfg.a = vec![vec![vec![0.0; 2]; 2]; 2];
        let p = [0.1, -0.2];
        let y = simulated_utility(&cfg, 0.4, &p, &[0.3]).unwrap();
        let expect = 0.4 - (p[0] * cfg.w_bar[0] + p[1] * cfg.w_bar[1]);
        assert_eq!(y, expect);
    }

    #[test]
    fn singular_denominator_is_reported() {
        let mut cfg = EasiDgpConfig::reduced_default();
        cfg.b_price = vec![vec![200.0, 0.0], vec![0.0, 200.0]];
        cfg.base.price_sd = 1.0;
        assert!(matches!(
            generate_easi(&cfg, 100, 1),
            Err(SlimError::Generation(_))
        ));
        let model = EasiModel::from_config(&EasiDgpConfig::reduced_default()).unwrap();
        let theta = DVector::from_vec(cfg.theta_true().unwrap());
        let record = [0.3, 0.2, 0.0, 0.2, 0.2, 0.5];
        let mut g = vec![0.0; MomentModel::<f64>::dim_moments(&model)];
        assert!(matches!(
            model.moment(&record, &theta, &mut g),
            Err(SlimError::Model(_))
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cfg = EasiDgpConfig::reduced_default();
        let data = generate_easi(&cfg, 500, 4).unwrap();
        let model = EasiModel::from_config(&cfg).unwrap();
        let truth = cfg.theta_true().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let theta = DVector::from_fn(truth.len(), |k, _| {
                truth[k] + 0.05 * rng.sample::<f64, _>(StandardNormal)
            });
            let i = rng.random_range(0..data.n());
            let err = jacobian_fd_error(&model, data.row(i), &theta, 1e-6).unwrap();
            assert!(err <= 1e-5, "fd error {err}");
        }
    }

    #[test]
    fn two_good_nesting_jacobian() {
        let mut cfg = EasiDgpConfig::zeros(2, 0).unwrap();
        cfg.b[0] = vec![0.4];
        cfg.b[1] = vec![0.05];
        cfg.a[0] = vec![vec![0.03]];
        cfg.b_price = vec![vec![0.02]];
        cfg.sigma = vec![0.05];
        cfg.w_bar = vec![0.4];
        let data = generate_easi(&cfg, 100, 2).unwrap();
        let model = EasiModel::from_config(&cfg).unwrap();
        assert_eq!(MomentModel::<f64>::dim_theta(&model), 8);
        assert_eq!(MomentModel::<f64>::dim_moments(&model), 8);
        let theta = DVector::from_vec(cfg.theta_true().unwrap());
        for row in data.rows().take(10) {
            assert!(jacobian_fd_error(&model, row, &theta, 1e-6).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = EasiDgpConfig::reduced_default();
        assert_eq!(
            generate_easi(&cfg, 300, 5).unwrap(),
            generate_easi(&cfg, 300, 5).unwrap()
        );
    }
}

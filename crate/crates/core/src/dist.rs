//! Reference distributions: χ² tails and quantiles, the normal quantile, and
//! the `χ²_{k1} + τ χ²_{k2}` mixture tail.

use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};
use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::error::{Result, SlimError};

/// Relative tolerance of the χ² quantile root search.
pub const CHI2_QUANTILE_TOL: f64 = 1e-10;
/// Absolute tolerance of the mixture quadrature.
pub const MIXTURE_TOL: f64 = 1e-8;

pub fn chi2_cdf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(df / 2.0, x / 2.0)
    }
}

/// Upper tail `P(χ²_df > x)`.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_ur(df / 2.0, x / 2.0)
    }
}

/// `p`-quantile of `χ²_df` by bracketed bisection on the regularized lower
/// incomplete gamma function.
pub fn chi2_quantile(p: f64, df: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) || !(df > 0.0) {
        return Err(SlimError::Inference(format!(
            "chi-square quantile needs p in (0,1) and df > 0 (p = {p}, df = {df})"
        )));
    }
    let mut hi = df.max(1.0);
    while chi2_cdf(hi, df) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > CHI2_QUANTILE_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Standard normal `p`-quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    // Split first so that a narrow peak is not missed by the first estimate.
    let pieces = 16;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = simpson(lo, hi, fa, fm, fb);
            adaptive(f, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

/// Upper tail `P(χ²_{df1} + τ χ²_{df2} > x)`.
///
/// Conditions on the `χ²_{df2}` draw `y = u²` and integrates the
/// `χ²_{df1}` tail against its density; the substitution removes the
/// singularity of the density at zero when `df2 = 1`.
pub fn mixture_sf(x: f64, df1: f64, df2: f64, tau: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if tau <= 0.0 || df2 <= 0.0 {
        return chi2_sf(x, df1);
    }
    let inner = ChiSquared::new(df2).expect("positive degrees of freedom");
    let y_max = x / tau;
    let integrand = |u: f64| {
        let y = u * u;
        if y <= 0.0 {
            // 2u f(u²) at u = 0 is finite only for df2 = 1.
            return if df2 == 1.0 {
                2.0 / (2.0 * std::f64::consts::PI).sqrt() * chi2_sf(x, df1)
            } else {
                0.0
            };
        }
        2.0 * u * inner.pdf(y) * chi2_sf(x - tau * y, df1)
    };
    let body = integrate(&integrand, 0.0, y_max.sqrt(), MIXTURE_TOL);
    (body + chi2_sf(y_max, df2)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{ChiSquared as ChiDraw, Distribution};

    #[test]
    fn chi2_quantiles_match_series_values() {
        // Series evaluation of the χ²₁ CDF, erf(√(x/2)), at the quantile.
        let q = chi2_quantile(0.95, 1.0).unwrap();
        assert_eq!((q * 1e4).round() / 1e4, 3.8415);
        let z = (q / 2.0).sqrt();
        let mut term = z;
        let mut erf = 0.0;
        for k in 0..60 {
            erf += term / (2 * k + 1) as f64;
            term *= -z * z / (k + 1) as f64;
        }
        erf *= 2.0 / std::f64::consts::PI.sqrt();
        assert!((erf - 0.95).abs() < 1e-9);
        assert_relative_eq!(chi2_quantile(0.95, 2.0).unwrap(), -2.0 * 0.05f64.ln(), max_relative = 1e-9);
    }

    #[test]
    fn normal_quantile_known_value() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
    }

    #[test]
    fn degenerate_mixture_is_plain_chi2() {
        for x in [0.5, 2.0, 7.0] {
            assert_eq!(mixture_sf(x, 3.0, 2.0, 0.0), chi2_sf(x, 3.0));
        }
        assert_eq!(mixture_sf(0.0, 3.0, 2.0, 0.4), 1.0);
    }

    #[test]
    fn mixture_matches_monte_carlo_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let a = ChiDraw::new(2.0).unwrap();
        let b = ChiDraw::new(3.0).unwrap();
        let draws = 1_000_000;
        let mut v: Vec<f64> = (0..draws)
            .map(|_| a.sample(&mut rng) + 0.5 * b.sample(&mut rng))
            .collect();
        v.sort_by(f64::total_cmp);
        let mut sup: f64 = 0.0;
        for k in 1..200 {
            let x = k as f64 * 0.1;
            let emp = v.partition_point(|&s| s <= x) as f64 / draws as f64;
            sup = sup.max((emp - (1.0 - mixture_sf(x, 2.0, 3.0, 0.5))).abs());
        }
        assert!(sup < 0.002, "sup distance {sup}");
    }

    #[test]
    fn mixture_tail_grows_with_tau() {
        let mut prev = 0.0;
        for k in 0..20 {
            let tau = k as f64 * 0.1;
            let sf = mixture_sf(6.0, 2.0, 3.0, tau);
            assert!(sf >= prev - 1e-9);
            prev = sf;
        }
    }

    #[test]
    fn one_df_inner_component_is_handled() {
        // χ²₁ + 1·χ²₁ is χ²₂.
        for x in [0.3, 1.0, 4.0, 9.0] {
            assert!((mixture_sf(x, 1.0, 1.0, 1.0) - chi2_sf(x, 2.0)).abs() < 1e-7);
        }
    }
}

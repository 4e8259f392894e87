//! Moment models, the dataset container, and the built-in synthetic designs.

pub mod easi;
pub mod linear_iv;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, SlimError};
use crate::scalar::Scalar;

pub use easi::{BaseSample, BaseSampleConfig, EasiDgpConfig, EasiLayout, EasiModel};
pub use linear_iv::{LinearIvDesign, LinearIvModel};

/// Rows per chunk for full-sample reductions. Fixed so that the reduction
/// order never depends on the thread count.
const REDUCTION_CHUNK: usize = 2048;

/// Immutable sample `z_1, ..., z_n` stored as a row-major block of flat records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    values: Vec<T>,
    n: usize,
    width: usize,
    columns: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    /// Builds a dataset from row-major values; every entry must be finite.
    pub fn new(values: Vec<T>, width: usize, columns: Vec<String>) -> Result<Self> {
        if width == 0 || values.is_empty() {
            return Err(SlimError::config("dataset must have at least one row and column"));
        }
        if !values.len().is_multiple_of(width) {
            return Err(SlimError::dimension("dataset values", width, values.len() % width));
        }
        if columns.len() != width {
            return Err(SlimError::dimension("column names", width, columns.len()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(SlimError::config(format!(
                "non-finite entry at row {}, column {}",
                pos / width,
                pos % width
            )));
        }
        let n = values.len() / width;
        Ok(Self {
            values,
            n,
            width,
            columns,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            n: self.n,
            width: self.width,
            columns: self.columns.clone(),
        }
    }

    /// Writes the dataset as CSV with a header row naming each column.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for row in self.rows() {
            w.write_record(row.iter().map(|v| format!("{:?}", v.as_f64())))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::write_csv`] (or any numeric CSV
    /// with a header row).
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let columns: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| SlimError::config(format!("non-numeric CSV field {field:?}")))?;
                values.push(T::lit(v));
            }
        }
        let width = columns.len();
        Self::new(values, width, columns)
    }
}

/// Moment function `g(z, θ)` with its analytic Jacobian `G(z, θ)`.
///
/// Implementations must be pure: evaluation may run concurrently on shared
/// read-only data.
pub trait MomentModel<T: Scalar>: Send + Sync {
    /// Parameter dimension `d`.
    fn dim_theta(&self) -> usize;

    /// Moment dimension `d_g`.
    fn dim_moments(&self) -> usize;

    /// Number of columns in one record.
    fn record_width(&self) -> usize;

    /// Column names of a record, in storage order.
    fn columns(&self) -> Vec<String>;

    /// Writes `g(record, θ)` into `out` (length `d_g`).
    fn moment(&self, record: &[T], theta: &DVector<T>, out: &mut [T]) -> Result<()>;

    /// Writes the `d_g × d` Jacobian `∂g/∂θ'` into `out`.
    fn jacobian(&self, record: &[T], theta: &DVector<T>, out: &mut DMatrix<T>) -> Result<()>;

    /// Checks that a dataset has the layout this model expects.
    fn check_dataset(&self, data: &Dataset<T>) -> Result<()> {
        if data.width() != self.record_width() {
            return Err(SlimError::dimension(
                "record width",
                self.record_width(),
                data.width(),
            ));
        }
        Ok(())
    }
}

impl<T: Scalar, M: MomentModel<T> + ?Sized> MomentModel<T> for &M {
    fn dim_theta(&self) -> usize {
        (**self).dim_theta()
    }
    fn dim_moments(&self) -> usize {
        (**self).dim_moments()
    }
    fn record_width(&self) -> usize {
        (**self).record_width()
    }
    fn columns(&self) -> Vec<String> {
        (**self).columns()
    }
    fn moment(&self, record: &[T], theta: &DVector<T>, out: &mut [T]) -> Result<()> {
        (**self).moment(record, theta, out)
    }
    fn jacobian(&self, record: &[T], theta: &DVector<T>, out: &mut DMatrix<T>) -> Result<()> {
        (**self).jacobian(record, theta, out)
    }
}

/// Reusable scratch space for batch evaluations.
#[derive(Debug, Clone)]
pub struct BatchScratch<T: Scalar> {
    g: Vec<T>,
    jac: DMatrix<T>,
}

impl<T: Scalar> BatchScratch<T> {
    pub fn new(d: usize, d_g: usize) -> Self {
        Self {
            g: vec![T::zero(); d_g],
            jac: DMatrix::zeros(d_g, d),
        }
    }

    pub fn for_model<M: MomentModel<T> + ?Sized>(model: &M) -> Self {
        Self::new(model.dim_theta(), model.dim_moments())
    }
}

/// Mean of `g(z_i, θ)` over the rows listed in `indices`, written to `out`.
pub fn batch_mean_moment<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    indices: &[usize],
    theta: &DVector<T>,
    scratch: &mut BatchScratch<T>,
    out: &mut DVector<T>,
) -> Result<()> {
    out.fill(T::zero());
    for &i in indices {
        model.moment(data.row(i), theta, &mut scratch.g)?;
        for (o, &v) in out.iter_mut().zip(scratch.g.iter()) {
            *o += v;
        }
    }
    *out /= T::from_count(indices.len().max(1));
    Ok(())
}

/// Mean of `G(z_i, θ)` over the rows listed in `indices`, written to `out`.
pub fn batch_mean_jacobian<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    indices: &[usize],
    theta: &DVector<T>,
    scratch: &mut BatchScratch<T>,
    out: &mut DMatrix<T>,
) -> Result<()> {
    out.fill(T::zero());
    for &i in indices {
        model.jacobian(data.row(i), theta, &mut scratch.jac)?;
        *out += &scratch.jac;
    }
    *out /= T::from_count(indices.len().max(1));
    Ok(())
}

/// Full-sample averages `ḡ_n(θ)`, `Ḡ_n(θ)` and `n⁻¹ Σ g g'` at one θ.
#[derive(Debug, Clone)]
pub struct SampleMoments<T: Scalar> {
    pub g_bar: DVector<T>,
    pub jac_bar: DMatrix<T>,
    pub second_moment: DMatrix<T>,
}

#[derive(Clone)]
struct Partial<T: Scalar> {
    g: DVector<T>,
    jac: DMatrix<T>,
    gg: DMatrix<T>,
}

/// Full-sample averages over a subset of rows (all rows when `rows` is `None`).
///
/// Rows are reduced in fixed-size chunks that are summed in chunk order, so
/// the result is bit-identical regardless of the rayon pool size.
pub fn sample_moments<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    theta: &DVector<T>,
    rows: Option<&[usize]>,
) -> Result<SampleMoments<T>> {
    let (d, d_g) = (model.dim_theta(), model.dim_moments());
    let all: Vec<usize>;
    let idx: &[usize] = match rows {
        Some(r) => r,
        None => {
            all = (0..data.n()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Err(SlimError::config("no rows to average over"));
    }
    let partials: Vec<Result<Partial<T>>> = idx
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut scratch = BatchScratch::new(d, d_g);
            let mut p = Partial {
                g: DVector::zeros(d_g),
                jac: DMatrix::zeros(d_g, d),
                gg: DMatrix::zeros(d_g, d_g),
            };
            for &i in chunk {
                let row = data.row(i);
                model.moment(row, theta, &mut scratch.g)?;
                model.jacobian(row, theta, &mut scratch.jac)?;
                let gv = DVector::from_column_slice(&scratch.g);
                p.g += &gv;
                p.jac += &scratch.jac;
                p.gg.ger(T::one(), &gv, &gv, T::one());
            }
            Ok(p)
        })
        .collect();
    let mut acc = Partial {
        g: DVector::zeros(d_g),
        jac: DMatrix::zeros(d_g, d),
        gg: DMatrix::zeros(d_g, d_g),
    };
    for p in partials {
        let p = p?;
        acc.g += p.g;
        acc.jac += p.jac;
        acc.gg += p.gg;
    }
    let inv_n = T::one() / T::from_count(idx.len());
    Ok(SampleMoments {
        g_bar: acc.g * inv_n,
        jac_bar: acc.jac * inv_n,
        second_moment: acc.gg * inv_n,
    })
}

/// Largest entrywise error between the analytic Jacobian and central finite
/// differences with step `h`, each error scaled by `1 + |entry|`.
pub fn jacobian_fd_error<M: MomentModel<f64> + ?Sized>(
    model: &M,
    record: &[f64],
    theta: &DVector<f64>,
    h: f64,
) -> Result<f64> {
    let (d, d_g) = (model.dim_theta(), model.dim_moments());
    let mut analytic = DMatrix::zeros(d_g, d);
    model.jacobian(record, theta, &mut analytic)?;
    let mut plus = vec![0.0; d_g];
    let mut minus = vec![0.0; d_g];
    let mut worst: f64 = 0.0;
    for k in 0..d {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[k] += h;
        tm[k] -= h;
        model.moment(record, &tp, &mut plus)?;
        model.moment(record, &tm, &mut minus)?;
        for r in 0..d_g {
            let fd = (plus[r] - minus[r]) / (2.0 * h);
            let a = analytic[(r, k)];
            worst = worst.max((fd - a).abs() / (1.0 + a.abs()));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_rejects_non_finite_and_ragged() {
        let cols = vec!["a".to_string(), "b".to_string()];
        assert!(Dataset::new(vec![1.0, f64::NAN], 2, cols.clone()).is_err());
        assert!(Dataset::new(vec![1.0, 2.0, 3.0], 2, cols.clone()).is_err());
        assert!(Dataset::<f64>::new(vec![], 2, cols.clone()).is_err());
        let ds = Dataset::new(vec![1.0, 2.0, 3.0, 4.0], 2, cols).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let cols = vec!["y".to_string(), "x".to_string()];
        let ds = Dataset::new(vec![0.1, 1.0 / 3.0, -2.5e-7, 1e300], 2, cols).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let back = Dataset::<f64>::read_csv(&path).unwrap();
        assert_eq!(ds, back);
    }
}

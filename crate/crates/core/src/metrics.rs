//! Distances between sample sets and convergence-order fits.
//!
//! Sample matrices are `n × d` with one draw per row. All reductions run in
//! `f64` regardless of the input scalar.

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::sampler::SamplerId;
use crate::target::TargetDistribution;
use crate::{Error, Result, Scalar};

pub const DEFAULT_PROJECTIONS: usize = 128;

/// Above this many rows the energy distance uses a stratified subsample.
pub const ENERGY_SUBSAMPLE: usize = 2048;

/// One benchmark cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub target: String,
    pub sampler: SamplerId,
    pub steps: usize,
    pub nfe: u64,
    pub seed: u64,
    pub sliced_w2: f64,
    pub energy: f64,
    pub mean_err: f64,
    pub cov_err: f64,
    pub oracle_rmse: Option<f64>,
}

fn to_f64<T: Scalar>(a: ArrayView2<'_, T>) -> Array2<f64> {
    a.mapv(|v| v.as_f64())
}

fn check_rows(n: usize, what: &'static str) -> Result<()> {
    if n < 2 {
        return Err(Error::domain(what, n as f64, "at least 2 rows"));
    }
    Ok(())
}

fn directions(count: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = Array2::zeros((count, dim));
    for mut row in dirs.rows_mut() {
        loop {
            row.mapv_inplace(|_| f64::standard_normal(&mut rng));
            let len = row.dot(&row).sqrt();
            if len > 1e-12 {
                row /= len;
                break;
            }
        }
    }
    dirs
}

/// Sort through order-preserving integer keys; faster than comparing floats.
fn sort_floats(values: &mut [f64]) {
    const SIGN: u64 = 1 << 63;
    let mut keys: Vec<u64> = values
        .iter()
        .map(|v| {
            let b = v.to_bits();
            if b & SIGN != 0 {
                !b
            } else {
                b | SIGN
            }
        })
        .collect();
    keys.sort_unstable();
    for (v, k) in values.iter_mut().zip(keys) {
        *v = f64::from_bits(if k & SIGN != 0 { k & !SIGN } else { !k });
    }
}

fn sorted_projections(samples: &Array2<f64>, dirs: &Array2<f64>) -> Vec<Vec<f64>> {
    let columns: Vec<Vec<f64>> = samples.columns().into_iter().map(|c| c.to_vec()).collect();
    dirs.rows()
        .into_iter()
        .map(|u| {
            let mut p = vec![0.0; samples.nrows()];
            for (col, &w) in columns.iter().zip(u) {
                for (acc, &v) in p.iter_mut().zip(col) {
                    *acc += w * v;
                }
            }
            sort_floats(&mut p);
            p
        })
        .collect()
}

/// Quantile `q` of `k` from a sorted vector (identity when `k` equals its length).
fn quantile(sorted: &[f64], q: usize, k: usize) -> f64 {
    if sorted.len() == k {
        return sorted[q];
    }
    let idx = ((q as f64 + 0.5) * sorted.len() as f64 / k as f64) as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn w1d(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (sum / a.len() as f64).sqrt();
    }
    let k = a.len().min(b.len());
    let sum: f64 = (0..k)
        .map(|q| {
            let diff = quantile(a, q, k) - quantile(b, q, k);
            diff * diff
        })
        .sum();
    (sum / k as f64).sqrt()
}

/// Monte-Carlo sliced 2-Wasserstein distance: the mean over `projections`
/// random unit directions of the 1-D W₂ between the projected samples.
pub fn sliced_w2<T: Scalar>(
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    SlicedW2Reference::new(b, projections, seed)?.distance(a)
}

/// Sorted reference projections, reusable across many candidate sets.
#[derive(Debug, Clone)]
pub struct SlicedW2Reference {
    dirs: Array2<f64>,
    sorted: Vec<Vec<f64>>,
}

impl SlicedW2Reference {
    pub fn new<T: Scalar>(reference: ArrayView2<'_, T>, projections: usize, seed: u64) -> Result<Self> {
        check_rows(reference.nrows(), "reference rows")?;
        if projections == 0 {
            return Err(Error::domain("projections", 0.0, ">= 1"));
        }
        let dirs = directions(projections, reference.ncols(), seed);
        let sorted = sorted_projections(&to_f64(reference), &dirs);
        Ok(Self { dirs, sorted })
    }

    pub fn dim(&self) -> usize {
        self.dirs.ncols()
    }

    pub fn distance<T: Scalar>(&self, samples: ArrayView2<'_, T>) -> Result<f64> {
        check_rows(samples.nrows(), "sample rows")?;
        if samples.ncols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: samples.ncols(),
            });
        }
        let other = sorted_projections(&to_f64(samples), &self.dirs);
        let total: f64 = other.iter().zip(&self.sorted).map(|(a, b)| w1d(a, b)).sum();
        Ok(total / self.sorted.len() as f64)
    }
}

/// Columns of the rows in lexicographic order, thinned to evenly spaced
/// ranks when more than [`ENERGY_SUBSAMPLE`]. Depends only on the multiset
/// of rows.
fn energy_columns<T: Scalar>(a: ArrayView2<'_, T>) -> Vec<Vec<f64>> {
    let n = a.nrows();
    let x = to_f64(a);
    let picked: Vec<usize> = if n <= ENERGY_SUBSAMPLE {
        (0..n).collect()
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_unstable_by(|&i, &j| {
            x.row(i)
                .iter()
                .zip(x.row(j))
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let k = ENERGY_SUBSAMPLE;
        (0..k).map(|q| order[quantile_index(n, q, k)]).collect()
    };
    x.columns()
        .into_iter()
        .map(|c| picked.iter().map(|&i| c[i]).collect())
        .collect()
}

fn quantile_index(n: usize, q: usize, k: usize) -> usize {
    (((q as f64 + 0.5) * n as f64 / k as f64) as usize).min(n - 1)
}

/// Sum of `‖a_i − b_j‖` over `i` and `j ≥ offset(i)`; column-major inputs.
fn distance_sum(a: &[Vec<f64>], b: &[Vec<f64>], upper: bool) -> f64 {
    let n = a.first().map_or(0, Vec::len);
    let m = b.first().map_or(0, Vec::len);
    let mut buf = vec![0.0; m];
    let mut total = 0.0;
    for i in 0..n {
        let from = if upper { i + 1 } else { 0 };
        let sq = &mut buf[from..];
        sq.fill(0.0);
        for (ca, cb) in a.iter().zip(b) {
            let xi = ca[i];
            for (acc, &y) in sq.iter_mut().zip(&cb[from..]) {
                let d = xi - y;
                *acc += d * d;
            }
        }
        total += sq.iter().map(|v| v.sqrt()).sum::<f64>();
    }
    total
}

fn mean_cross_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (n, m) = (a[0].len(), b[0].len());
    distance_sum(a, b, false) / (n * m) as f64
}

/// `E‖a − a′‖` over all ordered pairs, diagonal included.
fn mean_within_distance(a: &[Vec<f64>]) -> f64 {
    let n = a[0].len();
    2.0 * distance_sum(a, a, true) / (n * n) as f64
}

/// Energy distance `2E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` (V-statistic).
pub fn energy_distance<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<f64> {
    EnergyReference::new(b)?.distance(a)
}

/// The reference-only terms of the energy distance, computed once.
#[derive(Debug, Clone)]
pub struct EnergyReference {
    columns: Vec<Vec<f64>>,
    within: f64,
}

impl EnergyReference {
    pub fn new<T: Scalar>(reference: ArrayView2<'_, T>) -> Result<Self> {
        check_rows(reference.nrows(), "reference rows")?;
        if reference.ncols() == 0 {
            return Err(Error::domain("columns", 0.0, "at least 1 column"));
        }
        let columns = energy_columns(reference);
        let within = mean_within_distance(&columns);
        Ok(Self { columns, within })
    }

    pub fn distance<T: Scalar>(&self, samples: ArrayView2<'_, T>) -> Result<f64> {
        check_rows(samples.nrows(), "sample rows")?;
        if samples.ncols() != self.columns.len() {
            return Err(Error::Dimension {
                expected: self.columns.len(),
                got: samples.ncols(),
            });
        }
        let columns = energy_columns(samples);
        let cross = mean_cross_distance(&columns, &self.columns);
        let within = mean_within_distance(&columns);
        Ok((2.0 * cross - within - self.within).max(0.0))
    }
}

/// `(‖mean − μ‖₂, ‖cov − Σ‖_F)` against the target's exact moments, with the
/// unbiased sample covariance.
pub fn moment_errors<T: Scalar>(
    samples: ArrayView2<'_, T>,
    target: &TargetDistribution<T>,
) -> Result<(f64, f64)> {
    check_rows(samples.nrows(), "sample rows")?;
    let d = target.dim();
    if samples.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            got: samples.ncols(),
        });
    }
    let x = to_f64(samples);
    let n = x.nrows() as f64;
    // Shift by the first row so identical rows give an exact mean.
    let pivot = x.row(0).to_owned();
    let shifted = &x - &pivot;
    let mean = &pivot + &shifted.mean_axis(Axis(0)).unwrap();
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (n - 1.0);

    let mu = target.mean();
    let sigma = target.covariance();
    let mean_err = mean
        .iter()
        .zip(&mu)
        .map(|(a, b)| (a - b.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    let cov_err = cov
        .iter()
        .zip(&sigma)
        .map(|(a, b)| (a - b.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok((mean_err, cov_err))
}

/// Root-mean-square row distance between paired endpoint sets.
pub fn endpoint_rmse<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Invalid(format!(
            "endpoint sets differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::domain("rows", 0.0, "at least 1 row"));
    }
    let sq: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
        .sum();
    Ok((sq / a.nrows() as f64).sqrt())
}

/// Least-squares slope of `log RMSE` against `log Δt` with `Δt = 1/N`.
/// Points with non-positive or non-finite RMSE are dropped.
pub fn order_estimate(points: &[(usize, f64)]) -> Result<f64> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .filter(|(n, e)| *n > 0 && *e > 0.0 && e.is_finite())
        .map(|&(n, e)| ((1.0 / n as f64).ln(), e.ln()))
        .collect();
    let mut distinct: Vec<u64> = kept.iter().map(|(x, _)| x.to_bits()).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Invalid(format!(
            "order fit needs at least 3 distinct step counts with positive error, got {}",
            distinct.len()
        )));
    }
    let m = kept.len() as f64;
    let mx = kept.iter().map(|p| p.0).sum::<f64>() / m;
    let my = kept.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = kept.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = kept.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

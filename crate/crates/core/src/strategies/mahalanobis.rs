use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::Score;
use crate::corpus::InstanceId;
use crate::error::{Error, Result};

/// Hidden representations wider than this are rejected: the covariance is
/// dense, so a hashed linear feature space would not fit in memory.
pub const MAX_MD_DIM: usize = 4096;

/// Class centroids and a shared, regularized covariance.
#[derive(Clone, Debug)]
pub struct GaussianClassStats {
    pub classes: Vec<usize>,
    pub centroids: Vec<DVector<f64>>,
    pub covariance: DMatrix<f64>,
    pub regularization: f64,
    factor: Cholesky<f64, Dyn>,
}

impl GaussianClassStats {
    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// `min_c (h - μ_c)ᵀ Σ⁻¹ (h - μ_c)`.
    pub fn min_distance(&self, h: &[f64]) -> Result<f64> {
        if h.len() != self.dim() {
            return Err(Error::invalid(format!(
                "hidden dimension {} does not match fitted dimension {}",
                h.len(),
                self.dim()
            )));
        }
        let h = DVector::from_column_slice(h);
        let best = self
            .centroids
            .iter()
            .map(|mu| {
                let diff = &h - mu;
                let solved = self.factor.solve(&diff);
                diff.dot(&solved).max(0.0)
            })
            .fold(f64::INFINITY, f64::min);
        Ok(best)
    }
}

/// Fits one centroid per entry of `classes` and the pooled within-class
/// covariance `(1/N) Σ_i (h_i - μ_{y_i})(h_i - μ_{y_i})ᵀ`, plus
/// `λ · (trace / d) · I` (or `λ · I` when the trace is zero).
pub fn fit_gaussian_stats(
    hidden: &[Vec<f64>],
    labels: &[usize],
    classes: &[usize],
    lambda: f64,
) -> Result<GaussianClassStats> {
    if hidden.len() != labels.len() {
        return Err(Error::invalid("hidden vectors and labels differ in length"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("regularization must be non-negative"));
    }
    let d = hidden.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::invalid("hidden dimension must be at least 1"));
    }
    if d > MAX_MD_DIM {
        return Err(Error::invalid(format!(
            "hidden dimension {d} exceeds {MAX_MD_DIM}; use a model with a dense hidden layer"
        )));
    }
    if hidden.iter().any(|h| h.len() != d) {
        return Err(Error::invalid("hidden vectors differ in dimension"));
    }
    let mut sums = vec![DVector::<f64>::zeros(d); classes.len()];
    let mut counts = vec![0usize; classes.len()];
    let slot = |y: usize| classes.iter().position(|&c| c == y);
    for (h, &y) in hidden.iter().zip(labels) {
        let k = slot(y).ok_or_else(|| Error::invalid(format!("label {y} not among fitted classes")))?;
        sums[k] += DVector::from_column_slice(h);
        counts[k] += 1;
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {} has no instances", classes[k])));
    }
    let centroids: Vec<DVector<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64)
        .collect();

    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (h, &y) in hidden.iter().zip(labels) {
        let diff = DVector::from_column_slice(h) - &centroids[slot(y).expect("checked above")];
        cov.ger(1.0, &diff, &diff, 1.0);
    }
    cov /= hidden.len() as f64;
    let trace = cov.trace();
    let ridge = if trace > 0.0 { lambda * trace / d as f64 } else { lambda };
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    let factor = Cholesky::new(cov.clone()).ok_or_else(|| {
        Error::Numerical("covariance is not positive definite after regularization".into())
    })?;
    Ok(GaussianClassStats {
        classes: classes.to_vec(),
        centroids,
        covariance: cov,
        regularization: lambda,
        factor,
    })
}

pub fn score_md(
    ids: &[InstanceId],
    hidden: &[Vec<f64>],
    stats: &GaussianClassStats,
) -> Result<Vec<Score>> {
    super::check_lengths(ids, hidden.len())?;
    ids.iter()
        .zip(hidden)
        .map(|(&id, h)| {
            Ok(Score {
                id,
                value: stats.min_distance(h)?,
            })
        })
        .collect()
}

impl GaussianClassStats {
    /// Stats with a caller-provided covariance, for testing distance laws.
    pub fn from_parts(centroids: Vec<Vec<f64>>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let d = covariance.len();
        if d == 0 || covariance.iter().any(|r| r.len() != d) || centroids.iter().any(|c| c.len() != d) {
            return Err(Error::invalid("covariance must be square and match the centroids"));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
        let factor = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        Ok(GaussianClassStats {
            classes: (0..centroids.len()).collect(),
            centroids: centroids.iter().map(|c| DVector::from_column_slice(c)).collect(),
            covariance: cov,
            regularization: 0.0,
            factor,
        })
    }
}

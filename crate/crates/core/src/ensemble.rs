use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};

/// `J` samples of a `d`-dimensional state.
///
/// Samples are stored column-wise: column `j` of the `d x J` matrix is sample `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEnsemble {
    samples: DMatrix<f64>,
}

impl StateEnsemble {
    /// Wraps a `d x J` matrix whose columns are samples.
    pub fn new(samples: DMatrix<f64>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "ensemble needs d >= 1 and J >= 1, got {} x {}",
                samples.nrows(),
                samples.ncols()
            )));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "ensemble sample {} has a non-finite coordinate {}",
                pos / samples.nrows(),
                pos % samples.nrows()
            )));
        }
        Ok(Self { samples })
    }

    /// Builds an ensemble from a list of sample vectors.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let count = samples.len();
        let dim = samples.first().map_or(0, Vec::len);
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Dimension("samples of differing length".into()));
        }
        let mut m = DMatrix::zeros(dim, count);
        for (j, s) in samples.iter().enumerate() {
            m.column_mut(j).copy_from_slice(s);
        }
        Self::new(m)
    }

    /// `count` copies of the same point.
    pub fn replicated(point: &[f64], count: usize) -> Result<Self> {
        Self::new(DMatrix::from_fn(point.len(), count, |i, _| point[i]))
    }

    pub(crate) fn from_matrix_unchecked(samples: DMatrix<f64>) -> Self {
        Self { samples }
    }

    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    pub fn count(&self) -> usize {
        self.samples.ncols()
    }

    pub fn sample(&self, j: usize) -> DVectorView<'_, f64> {
        self.samples.column(j)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.samples
    }

    /// Arithmetic mean of the samples.
    pub fn mean(&self) -> DVector<f64> {
        self.samples.column_mean()
    }

    /// Unbiased per-coordinate sample variance (zero for a single sample).
    pub fn variance(&self) -> DVector<f64> {
        let n = self.count();
        if n < 2 {
            return DVector::zeros(self.dim());
        }
        let mean = self.mean();
        DVector::from_fn(self.dim(), |i, _| {
            let m = mean[i];
            self.samples.row(i).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
        })
    }
}

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;

/// `n` representation vectors of dimension `d`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<T> {
    values: DenseMatrix<T>,
}

impl<T: Scalar> Embeddings<T> {
    pub fn new(values: DenseMatrix<T>) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("embedding batch"));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::new(DenseMatrix::from_rows(rows)?)
    }

    pub(crate) fn from_matrix_unchecked(values: DenseMatrix<T>) -> Self {
        Self { values }
    }

    /// Batch size.
    #[inline]
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    /// Embedding dimension.
    #[inline]
    pub fn d(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn values(&self) -> &DenseMatrix<T> {
        &self.values
    }

    pub fn into_matrix(self) -> DenseMatrix<T> {
        self.values
    }

    pub(crate) fn require_rows(&self, min: usize) -> Result<()> {
        if self.n() < min {
            return Err(Error::BatchTooSmall { n: self.n(), min });
        }
        Ok(())
    }
}

impl<T: Scalar> TryFrom<DenseMatrix<T>> for Embeddings<T> {
    type Error = Error;
    fn try_from(m: DenseMatrix<T>) -> Result<Self> {
        Self::new(m)
    }
}

impl<T> AsRef<DenseMatrix<T>> for Embeddings<T> {
    fn as_ref(&self) -> &DenseMatrix<T> {
        &self.values
    }
}

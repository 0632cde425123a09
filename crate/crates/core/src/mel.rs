use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A frames x bins log-mel grid; the state space the diffusion acts on.
#[derive(Debug, Clone, PartialEq)]
pub struct MelGrid {
    values: Array2<f64>,
}

impl MelGrid {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (frames, bins) = values.dim();
        if frames == 0 || bins == 0 {
            return Err(Error::Invalid(format!(
                "mel grid must be non-empty, got {frames}x{bins}"
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mel grid cell {pos}")));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let frames = rows.len();
        let bins = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != bins) {
            return Err(Error::Invalid("ragged mel rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((frames, bins), flat)
            .map_err(|e| Error::Invalid(e.to_string()))?;
        Self::new(values)
    }

    pub fn zeros(frames: usize, bins: usize) -> Result<Self> {
        Self::new(Array2::zeros((frames, bins)))
    }

    pub fn filled(frames: usize, bins: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((frames, bins), value))
    }

    /// Standard normal draws in every cell.
    pub fn standard_normal<R: Rng + ?Sized>(frames: usize, bins: usize, rng: &mut R) -> Self {
        let values = Array2::from_shape_simple_fn((frames, bins), || rng.sample(StandardNormal));
        Self { values }
    }

    /// Wraps an array that is known to satisfy the invariants.
    pub(crate) fn from_array_unchecked(values: Array2<f64>) -> Self {
        debug_assert!(values.nrows() > 0 && values.ncols() > 0);
        Self { values }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, frame: usize) -> ArrayView1<'_, f64> {
        self.values.row(frame)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_same_shape(&self, other: &MelGrid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{what} {:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    /// Mean squared difference over all cells.
    pub fn mse(&self, other: &MelGrid) -> Result<f64> {
        self.ensure_same_shape(other, "grid")?;
        let n = self.values.len() as f64;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(MelGrid::zeros(0, 4).is_err());
        assert!(MelGrid::zeros(3, 0).is_err());
        assert!(MelGrid::from_rows(&[vec![0.0, f64::NAN]]).is_err());
        assert!(MelGrid::from_rows(&[vec![0.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn mse_of_offset_grid() {
        let a = MelGrid::zeros(2, 3).unwrap();
        let b = MelGrid::filled(2, 3, 0.5).unwrap();
        assert_eq!(a.mse(&b).unwrap(), 0.25);
    }
}

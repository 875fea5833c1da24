use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular voxel grid of dimension 2 or 3.
///
/// Internally every grid is addressed as `[depth, height, width]`; a 2-D grid
/// has depth 1 and its logical axes `(0, 1)` map to `(height, width)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    extent: Vec<usize>,
    spacing: Vec<f64>,
}

impl Grid {
    pub fn new(extent: &[usize]) -> Result<Self> {
        Self::with_spacing(extent, &vec![1.0; extent.len()])
    }

    pub fn with_spacing(extent: &[usize], spacing: &[f64]) -> Result<Self> {
        if !(extent.len() == 2 || extent.len() == 3) {
            return Err(Error::InvalidConfig(format!(
                "grid must be 2-D or 3-D, got {} axes",
                extent.len()
            )));
        }
        if extent.iter().any(|&e| e < 2) {
            return Err(Error::InvalidConfig(format!(
                "every grid extent must be >= 2, got {extent:?}"
            )));
        }
        if spacing.len() != extent.len() || spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig(format!("invalid spacing {spacing:?}")));
        }
        Ok(Self {
            extent: extent.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    /// Square/cubic grid shorthand.
    pub fn cube(dims: usize, n: usize) -> Result<Self> {
        Self::new(&vec![n; dims])
    }

    pub fn dims(&self) -> usize {
        self.extent.len()
    }

    pub fn extent(&self) -> &[usize] {
        &self.extent
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn voxels(&self) -> usize {
        self.extent.iter().product()
    }

    /// `[depth, height, width]`.
    pub fn internal(&self) -> [usize; 3] {
        internal_shape(&self.extent)
    }

    /// Index into `internal()` of logical axis 0.
    pub fn axis_offset(&self) -> usize {
        3 - self.dims()
    }

    /// Same voxel layout (spacing is metadata and is not compared).
    pub fn matches(&self, other: &Grid) -> bool {
        self.extent == other.extent
    }

    pub(crate) fn check(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.extent, other.extent
            )))
        }
    }
}

pub(crate) fn internal_shape(extent: &[usize]) -> [usize; 3] {
    match extent.len() {
        2 => [1, extent[0], extent[1]],
        3 => [extent[0], extent[1], extent[2]],
        n => panic!("unsupported dimensionality {n}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_odd_dimensionality() {
        assert!(Grid::new(&[1, 4]).is_err());
        assert!(Grid::new(&[4]).is_err());
        assert!(Grid::new(&[2, 2, 2, 2]).is_err());
        assert!(Grid::with_spacing(&[4, 4], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn internal_layout_pads_2d_with_unit_depth() {
        let g = Grid::new(&[5, 7]).unwrap();
        assert_eq!(g.internal(), [1, 5, 7]);
        assert_eq!(g.axis_offset(), 1);
        assert_eq!(g.voxels(), 35);
        let g3 = Grid::new(&[3, 4, 5]).unwrap();
        assert_eq!(g3.internal(), [3, 4, 5]);
        assert_eq!(g3.axis_offset(), 0);
    }
}

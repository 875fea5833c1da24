//! Grid-attached data: images, probabilistic segmentations and vector fields.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Probability margin below which [`ProbSeg::argmax`] treats channels as tied.
pub const ARGMAX_TIE: f64 = 1e-4;

/// Channel-major samples on a grid: `data[c * voxels + v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    grid: Grid,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(grid: Grid, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || data.len() != channels * grid.voxels() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {channels} channels on {:?}",
                data.len(),
                grid.extent()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        let n = grid.voxels() * channels;
        Self {
            grid,
            channels,
            data: vec![T::zero(); n],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.grid.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `[1, channels, depth, height, width]`.
    pub fn to_tensor(&self) -> Tensor<T> {
        let [d, h, w] = self.grid.internal();
        Tensor::from_vec(&[1, self.channels, d, h, w], self.data.clone())
    }

    /// Inverse of [`Volume::to_tensor`] for row `i` of a group tensor.
    pub fn from_tensor_row(grid: &Grid, t: &Tensor<T>, i: usize) -> Result<Self> {
        let channels = t.dim(1);
        Self::new(grid.clone(), channels, t.row(i).to_vec())
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            grid: self.grid.clone(),
            channels: self.channels,
            data: self.data.iter().map(|x| U::lit(x.to_f64_lossy())).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

macro_rules! volume_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T>(Volume<T>);

        impl<T> Deref for $name<T> {
            type Target = Volume<T>;
            fn deref(&self) -> &Volume<T> {
                &self.0
            }
        }

        impl<T: Real> $name<T> {
            pub fn into_volume(self) -> Volume<T> {
                self.0
            }

            pub fn cast<U: Real>(&self) -> $name<U> {
                $name(self.0.cast())
            }
        }
    };
}

volume_newtype!(
    /// Scalar intensity image.
    ImageVolume
);
volume_newtype!(
    /// Per-voxel class probabilities, background in channel 0.
    ProbSeg
);
volume_newtype!(
    /// Stationary velocity field in voxel units; channel `c` moves along logical axis `c`.
    VelocityField
);
volume_newtype!(
    /// Displacement `u` of the map `phi(p) = p + u(p)`, in voxel units.
    DisplacementField
);

impl<T: Real> ImageVolume<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        Volume::new(grid, 1, data).map(Self)
    }

    /// Min-max normalizes raw intensities into `[0, 1]`; constant images map to zero.
    pub fn ingest(grid: Grid, raw: Vec<T>) -> Result<Self> {
        let v = Volume::new(grid, 1, raw)?;
        let lo = v.data.iter().copied().fold(T::infinity(), T::min);
        let hi = v.data.iter().copied().fold(T::neg_infinity(), T::max);
        let range = hi - lo;
        let data = if range > T::zero() {
            v.data.iter().map(|&x| (x - lo) / range).collect()
        } else {
            vec![T::zero(); v.data.len()]
        };
        Ok(Self(Volume { data, ..v }))
    }

    pub fn from_volume(v: Volume<T>) -> Result<Self> {
        if v.channels != 1 {
            return Err(Error::ShapeMismatch(format!(
                "image must have 1 channel, got {}",
                v.channels
            )));
        }
        Ok(Self(v))
    }

    pub fn values(&self) -> &[T] {
        &self.0.data
    }
}

impl<T: Real> ProbSeg<T> {
    /// Validates `[0, 1]` channel ranges and per-voxel sums within `1 ± 1e-4`.
    pub fn new(grid: Grid, classes: usize, data: Vec<T>) -> Result<Self> {
        let v = Volume::new(grid, classes, data)?;
        if classes < 2 {
            return Err(Error::ShapeMismatch(format!(
                "segmentation needs background plus at least one class, got {classes}"
            )));
        }
        let n = v.grid.voxels();
        let tol = T::lit(1e-4);
        for p in 0..n {
            let mut s = T::zero();
            for c in 0..classes {
                let x = v.data[c * n + p];
                if x < -tol || x > T::one() + tol {
                    return Err(Error::ShapeMismatch(format!(
                        "probability {x} out of range at voxel {p}"
                    )));
                }
                s += x;
            }
            if (s - T::one()).abs() > tol {
                return Err(Error::ShapeMismatch(format!(
                    "channel sum {s} at voxel {p} is not 1"
                )));
            }
        }
        Ok(Self(v))
    }

    /// Skips validation; callers guarantee the invariants (renormalized outputs).
    pub(crate) fn from_volume_unchecked(v: Volume<T>) -> Self {
        Self(v)
    }

    pub fn from_volume(v: Volume<T>) -> Result<Self> {
        Self::new(v.grid.clone(), v.channels, v.data)
    }

    pub fn one_hot(grid: Grid, classes: usize, labels: &[usize]) -> Result<Self> {
        let n = grid.voxels();
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {n} voxels",
                labels.len()
            )));
        }
        let mut data = vec![T::zero(); classes * n];
        for (p, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::ShapeMismatch(format!("label {l} >= {classes}")));
            }
            data[l * n + p] = T::one();
        }
        Self::new(grid, classes, data)
    }

    pub fn classes(&self) -> usize {
        self.0.channels
    }

    /// Hard labels. Probabilities within [`ARGMAX_TIE`] of the best count as
    /// ties, which resolve to the lowest channel index.
    pub fn argmax(&self) -> Vec<usize> {
        let n = self.grid().voxels();
        let tie = T::lit(ARGMAX_TIE);
        (0..n)
            .map(|p| {
                let mut best = 0;
                let mut best_v = self.0.data[p];
                for c in 1..self.classes() {
                    let x = self.0.data[c * n + p];
                    if x > best_v + tie {
                        best = c;
                        best_v = x;
                    }
                }
                best
            })
            .collect()
    }
}

macro_rules! vector_field_ctor {
    ($name:ident) => {
        impl<T: Real> $name<T> {
            pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
                let d = grid.dims();
                Volume::new(grid, d, data).map(Self)
            }

            pub fn zeros(grid: Grid) -> Self {
                let d = grid.dims();
                Self(Volume::zeros(grid, d))
            }

            pub fn from_volume(v: Volume<T>) -> Result<Self> {
                if v.channels != v.grid.dims() {
                    return Err(Error::ShapeMismatch(format!(
                        "vector field needs {} channels, got {}",
                        v.grid.dims(),
                        v.channels
                    )));
                }
                Ok(Self(v))
            }

            /// Field whose value at every voxel is `f(logical index)`.
            pub fn from_fn(grid: Grid, f: impl Fn(&[usize]) -> Vec<T>) -> Result<Self> {
                let d = grid.dims();
                let n = grid.voxels();
                let mut data = vec![T::zero(); d * n];
                let ext = grid.extent().to_vec();
                let mut idx = vec![0usize; d];
                for p in 0..n {
                    let mut r = p;
                    for a in (0..d).rev() {
                        idx[a] = r % ext[a];
                        r /= ext[a];
                    }
                    let v = f(&idx);
                    assert_eq!(v.len(), d);
                    for c in 0..d {
                        data[c * n + p] = v[c];
                    }
                }
                Self::new(grid, data)
            }
        }
    };
}

vector_field_ctor!(VelocityField);
vector_field_ctor!(DisplacementField);

impl<T: Real> ImageVolume<T> {
    /// Image whose value at every voxel is `f(logical index)`.
    pub fn from_fn(grid: Grid, f: impl Fn(&[usize]) -> T) -> Result<Self> {
        let d = grid.dims();
        let ext = grid.extent().to_vec();
        let mut idx = vec![0usize; d];
        let data = (0..grid.voxels())
            .map(|p| {
                let mut r = p;
                for a in (0..d).rev() {
                    idx[a] = r % ext[a];
                    r /= ext[a];
                }
                f(&idx)
            })
            .collect();
        Self::new(grid, data)
    }
}

//! Regular periodic voxel grids.
//!
//! Arrays defined on a grid are stored component-major: a field with `C`
//! components occupies `C * M` values, component `c` at `c * M ..`, and the
//! voxels of one component in C order with the last axis varying fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest extent allowed along any axis.
pub const MIN_EXTENT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Grid {
    dims: Vec<usize>,
}

impl Grid {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::Grid(format!(
                "expected 2 or 3 dimensions, got {}",
                dims.len()
            )));
        }
        if let Some(&d) = dims.iter().find(|&&d| d < MIN_EXTENT) {
            return Err(Error::Grid(format!(
                "every extent must be at least {MIN_EXTENT}, got {d}"
            )));
        }
        Ok(Self { dims: dims.to_vec() })
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of voxels `M`.
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Linear-index stride of each axis.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.ndim()];
        for d in (0..self.ndim() - 1).rev() {
            strides[d] = strides[d + 1] * self.dims[d + 1];
        }
        strides
    }

    /// Grid coordinates of a linear voxel index.
    pub fn coords(&self, mut index: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for d in (0..self.ndim()).rev() {
            out[d] = index % self.dims[d];
            index /= self.dims[d];
        }
        out
    }

    /// Index of the neighbour displaced by `offset` along `axis`, wrapping periodically.
    pub fn neighbour(&self, index: usize, axis: usize, offset: isize) -> usize {
        let strides = self.strides();
        let n = self.dims[axis] as isize;
        let coord = (index / strides[axis]) as isize % n;
        let moved = (coord + offset).rem_euclid(n);
        (index as isize + (moved - coord) * strides[axis] as isize) as usize
    }

    /// Identity sampling map as `D` coordinate fields.
    pub fn identity(&self) -> Vec<f64> {
        let m = self.voxels();
        let mut out = vec![0.0; self.ndim() * m];
        for i in 0..m {
            let c = self.coords(i);
            for d in 0..self.ndim() {
                out[d * m + i] = c[d] as f64;
            }
        }
        out
    }
}

impl TryFrom<Vec<usize>> for Grid {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Grid::new(&dims)
    }
}

impl From<Grid> for Vec<usize> {
    fn from(g: Grid) -> Self {
        g.dims
    }
}

//! Per-voxel symmetric block fields and small vector helpers.

use crate::error::{Error, Result};

/// A field of `dim x dim` symmetric matrices, one per voxel.
///
/// Entry `(i, j)` of voxel `m` lives at `(i * dim + j) * voxels + m`; both
/// triangles are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockField {
    pub dim: usize,
    pub voxels: usize,
    pub data: Vec<f64>,
}

impl BlockField {
    pub fn zeros(dim: usize, voxels: usize) -> Self {
        Self {
            dim,
            voxels,
            data: vec![0.0; dim * dim * voxels],
        }
    }

    pub fn from_data(dim: usize, voxels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim * voxels {
            return Err(Error::Shape(format!(
                "block field of {dim}x{dim} blocks over {voxels} voxels needs {} values, got {}",
                dim * dim * voxels,
                data.len()
            )));
        }
        Ok(Self { dim, voxels, data })
    }

    /// Diagonal blocks built from `dim` scalar fields.
    pub fn diagonal(dim: usize, voxels: usize, diag: &[f64]) -> Self {
        let mut out = Self::zeros(dim, voxels);
        for i in 0..dim {
            out.entry_mut(i, i)
                .copy_from_slice(&diag[i * voxels..(i + 1) * voxels]);
        }
        out
    }

    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.dim + j) * self.voxels;
        &self.data[o..o + self.voxels]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.dim + j) * self.voxels;
        &mut self.data[o..o + self.voxels]
    }

    /// `out = H x` voxelwise.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        let m = self.voxels;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.dim {
            for j in 0..self.dim {
                let h = self.entry(i, j);
                let xj = &x[j * m..(j + 1) * m];
                let oi = &mut out[i * m..(i + 1) * m];
                for v in 0..m {
                    oi[v] += h[v] * xj[v];
                }
            }
        }
    }

    /// Mean of the diagonal entries over all voxels.
    pub fn mean_diagonal(&self) -> f64 {
        if self.dim == 0 || self.voxels == 0 {
            return 0.0;
        }
        let s: f64 = (0..self.dim).map(|i| self.entry(i, i).iter().sum::<f64>()).sum();
        s / (self.dim * self.voxels) as f64
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

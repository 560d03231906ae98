//! Separable N-dimensional complex FFT over a [`Grid`].

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::Grid;

pub(crate) struct FftNd {
    dims: Vec<usize>,
    strides: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for FftNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftNd").field("dims", &self.dims).finish()
    }
}

impl FftNd {
    pub fn new(grid: &Grid) -> Self {
        let mut planner = FftPlanner::new();
        let dims = grid.dims().to_vec();
        let forward = dims.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self {
            strides: grid.strides(),
            dims,
            forward,
            inverse,
        }
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.forward);
    }

    /// Inverse transform including the `1/M` normalisation.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.inverse);
        let scale = 1.0 / buf.len() as f64;
        for x in buf.iter_mut() {
            *x *= scale;
        }
    }

    fn run(&self, buf: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        let m: usize = self.dims.iter().product();
        debug_assert_eq!(buf.len(), m);
        let last = self.dims.len() - 1;
        // contiguous rows along the last axis
        plans[last].process(buf);
        let mut line = Vec::new();
        for axis in 0..last {
            let n = self.dims[axis];
            let stride = self.strides[axis];
            let plan = &plans[axis];
            line.resize(n, Complex64::new(0.0, 0.0));
            let outer = m / (n * stride);
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * n * stride + s;
                    for (k, x) in line.iter_mut().enumerate() {
                        *x = buf[base + k * stride];
                    }
                    plan.process(&mut line);
                    for (k, x) in line.iter().enumerate() {
                        buf[base + k * stride] = *x;
                    }
                }
            }
        }
    }
}

/// Per-axis phase angles `2*pi*k/n` of every frequency bin.
pub(crate) fn bin_angles(grid: &Grid) -> Vec<[f64; 3]> {
    (0..grid.voxels())
        .map(|i| {
            let c = grid.coords(i);
            let mut th = [0.0; 3];
            for d in 0..grid.ndim() {
                th[d] = 2.0 * std::f64::consts::PI * c[d] as f64 / grid.dims()[d] as f64;
            }
            th
        })
        .collect()
}

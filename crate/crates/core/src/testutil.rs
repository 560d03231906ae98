//! Random fixtures shared by unit tests.

use nalgebra::DMatrix;

use crate::dataset::{DataKind, ImageDataset};
use crate::grid::Grid;
use crate::hyper::HyperParams;
use crate::likelihood::{squash, NoiseKind};
use crate::model::{LatentState, ModelState};

/// Uniform draws on `[0, 1)` from a small LCG.
pub fn rng(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x2545_F491_4F6C_DD1D);
    move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Smooth random field: a few low-frequency sinusoids per component.
pub fn smooth_field(grid: &Grid, comps: usize, amp: f64, r: &mut impl FnMut() -> f64) -> Vec<f64> {
    let m = grid.voxels();
    let dims = grid.dims().to_vec();
    let mut out = vec![0.0; comps * m];
    for c in 0..comps {
        for _ in 0..3 {
            let k: Vec<f64> = dims.iter().map(|_| (r() * 3.0).floor()).collect();
            let phase = r() * std::f64::consts::TAU;
            let a = amp * (r() - 0.5);
            for v in 0..m {
                let x = grid.coords(v);
                let arg: f64 = (0..dims.len())
                    .map(|d| std::f64::consts::TAU * k[d] * x[d] as f64 / dims[d] as f64)
                    .sum();
                out[c * m + v] += a * (arg + phase).cos();
            }
        }
    }
    out
}

/// Model with random smooth mean and bases.
pub fn random_model(grid: &Grid, channels: usize, hyper: HyperParams, app: f64, shape: f64, seed: u64) -> ModelState {
    let mut r = rng(seed);
    let mut m = ModelState::new(grid.clone(), channels, hyper).unwrap();
    m.mu = smooth_field(grid, channels, 1.0, &mut r);
    for w in m.w_a.iter_mut() {
        *w = smooth_field(grid, channels, app, &mut r);
    }
    for w in m.w_v.iter_mut() {
        *w = smooth_field(grid, grid.ndim(), shape, &mut r);
    }
    m
}

/// Random data of the kind a noise model expects.
pub fn random_data(grid: &Grid, n: usize, channels: usize, noise: NoiseKind, seed: u64) -> ImageDataset {
    let mut r = rng(seed);
    let m = grid.voxels();
    let images: Vec<Vec<f64>> = (0..n)
        .map(|_| match noise {
            NoiseKind::Gaussian => (0..channels * m).map(|_| r()).collect(),
            NoiseKind::Bernoulli => (0..channels * m).map(|_| r()).collect(),
            NoiseKind::Categorical => {
                let a: Vec<f64> = (0..channels * m).map(|_| 2.0 * r()).collect();
                squash(NoiseKind::Categorical, m, &a)
            }
        })
        .collect();
    ImageDataset::from_images(grid.clone(), channels, DataKind::for_noise(noise), &images).unwrap()
}

pub fn random_latents(k: usize, n: usize, scale: f64, seed: u64) -> LatentState {
    let mut r = rng(seed);
    let z = DMatrix::from_fn(k, n, |_, _| scale * (r() - 0.5));
    let cz = &z * z.transpose();
    LatentState {
        z,
        s: DMatrix::zeros(k, k),
        cz,
    }
}

/// Replaces the shape bases with Green's-function images of random
/// momenta, scaled to a peak displacement of `peak` voxels.
pub fn smooth_shape(model: &mut ModelState, peak: f64, seed: u64) {
    let mut r = rng(seed);
    let kernel = crate::operators::make_vector_kernel(&model.grid, &model.hyper.omega_v).unwrap();
    for w in model.w_v.iter_mut() {
        let m = smooth_field(&model.grid, model.grid.ndim(), 1.0, &mut r);
        let v = kernel.greens(&m).unwrap();
        let mx = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        *w = v.iter().map(|x| x * peak / mx).collect();
    }
}

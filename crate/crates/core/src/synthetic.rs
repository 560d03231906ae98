//! Synthetic 2-D test images: Gaussian blobs that are shifted, resized and
//! brightened at random.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DataKind, ImageDataset};
use crate::error::Result;
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobOptions {
    pub size: usize,
    /// Standard deviation of the centre offset, in voxels, per axis.
    pub shift_sd: [f64; 2],
    /// Standard deviation of the log radius.
    pub scale_sd: f64,
    /// Standard deviation of the peak intensity around 1.
    pub intensity_sd: f64,
    /// Radius at scale 1, in voxels.
    pub radius: f64,
    pub noise_sd: f64,
}

impl Default for BlobOptions {
    fn default() -> Self {
        Self {
            size: 32,
            shift_sd: [2.0, 2.0],
            scale_sd: 0.15,
            intensity_sd: 0.2,
            radius: 5.0,
            noise_sd: 0.02,
        }
    }
}

/// Generating factors of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobFactors {
    pub shift: [f64; 2],
    pub scale: f64,
    pub intensity: f64,
}

/// Noise-free blob image for given factors.
pub fn render(opts: &BlobOptions, f: &BlobFactors) -> Vec<f64> {
    let s = opts.size;
    let centre = s as f64 / 2.0;
    let r = opts.radius * f.scale;
    let mut img = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            // nearest periodic image of the centre
            let wrap = |d: f64| d - s as f64 * (d / s as f64).round();
            let dx = wrap(x as f64 - centre - f.shift[0]);
            let dy = wrap(y as f64 - centre - f.shift[1]);
            img[x + s * y] = f.intensity * (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
        }
    }
    img
}

/// `n` noisy blob images on a `size x size` grid, with their factors.
pub fn blobs(n: usize, opts: &BlobOptions, seed: u64) -> Result<(ImageDataset, Vec<BlobFactors>)> {
    let grid = Grid::new(&[opts.size, opts.size])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut images = Vec::with_capacity(n);
    let mut factors = Vec::with_capacity(n);
    for _ in 0..n {
        let f = BlobFactors {
            shift: [
                opts.shift_sd[0] * std.sample(&mut rng),
                opts.shift_sd[1] * std.sample(&mut rng),
            ],
            scale: (opts.scale_sd * std.sample(&mut rng)).exp(),
            intensity: 1.0 + opts.intensity_sd * std.sample(&mut rng),
        };
        let mut img = render(opts, &f);
        for v in img.iter_mut() {
            *v += opts.noise_sd * std.sample(&mut rng);
        }
        images.push(img);
        factors.push(f);
    }
    Ok((ImageDataset::from_images(grid, 1, DataKind::Continuous, &images)?, factors))
}

/// Hides one random axis-aligned rectangle per image covering about
/// `fraction` of its area, wrapping around the edges; returns the hidden
/// masks.
pub fn mask_rectangles(ds: &mut ImageDataset, fraction: f64, seed: u64) -> Vec<Vec<bool>> {
    let dims = ds.grid().dims().to_vec();
    let m = ds.grid().voxels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(ds.len());
    let per_axis = fraction.clamp(0.0, 1.0).powf(1.0 / dims.len() as f64);
    for i in 0..ds.len() {
        let mut lo = [0usize; 3];
        let mut len = [1usize; 3];
        for (d, &n) in dims.iter().enumerate() {
            len[d] = ((n as f64 * per_axis).round() as usize).clamp(1, n);
            lo[d] = rng.random_range(0..n);
        }
        let hidden: Vec<bool> = (0..m)
            .map(|v| {
                let c = ds.grid().coords(v);
                (0..dims.len()).all(|d| (c[d] + dims[d] - lo[d]) % dims[d] < len[d])
            })
            .collect();
        ds.hide(i, &hidden);
        out.push(hidden);
    }
    out
}

//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Everything runs single-threaded on a small synthetic blob set.

use sam_core::hyper::HyperParams;
use sam_core::inference::Inference;
use sam_core::likelihood::NoiseKind;
use sam_core::synthetic::{blobs, BlobOptions};
use sam_core::dataset::ImageDataset;
use sam_core::trainer::train;
use wasm_bindgen::prelude::*;

fn js_err(e: sam_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Grey values in `[lo, hi]` as RGBA bytes for an `ImageData`.
fn rgba(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .flat_map(|&x| {
            let g = (((x - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    data: ImageDataset,
    inf: Inference,
    objective: Vec<f64>,
    size: usize,
}

#[wasm_bindgen]
impl Demo {
    /// Generates `n` blob images of side `size` and trains a shared model
    /// with `k` latents for `iters` EM iterations.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, size: usize, k: usize, iters: usize, seed: u64) -> Result<Demo, JsValue> {
        let opts = BlobOptions {
            size,
            radius: size as f64 / 6.0,
            shift_sd: [size as f64 / 16.0; 2],
            ..BlobOptions::default()
        };
        let (data, _) = blobs(n, &opts, seed).map_err(js_err)?;
        let mut h = HyperParams::shared(k, NoiseKind::Gaussian);
        h.em_iters = iters;
        let (model, _, report) = train(&data, &h, seed).map_err(js_err)?;
        let mut objective = vec![report.initial.total()];
        objective.extend(report.iterations.iter().map(|it| it.objective));
        Ok(Demo {
            data,
            inf: Inference::new(model).map_err(js_err)?,
            objective,
            size,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn latents(&self) -> usize {
        self.inf.model().k()
    }

    pub fn images(&self) -> usize {
        self.data.len()
    }

    /// Objective before training and after each iteration.
    pub fn objective(&self) -> Vec<f64> {
        self.objective.clone()
    }

    /// Prior standard deviation of each latent.
    pub fn latent_sd(&self) -> Vec<f64> {
        let a = &self.inf.model().a_hat;
        match a.clone().try_inverse() {
            Some(c) => (0..a.nrows()).map(|i| c[(i, i)].max(0.0).sqrt()).collect(),
            None => vec![1.0; a.nrows()],
        }
    }

    /// The model's image for latents `z`, as RGBA.
    pub fn reconstruct(&self, z: Vec<f64>) -> Result<Vec<u8>, JsValue> {
        let img = self.inf.reconstruct(&z).map_err(js_err)?;
        Ok(rgba(&img, 0.0, 1.2))
    }

    /// A random draw from the model, as RGBA.
    pub fn sample(&self, seed: u64) -> Result<Vec<u8>, JsValue> {
        let img = self.inf.sample(seed).map_err(js_err)?;
        Ok(rgba(&img, 0.0, 1.2))
    }

    /// Training image `i`, as RGBA.
    pub fn image(&self, i: usize) -> Vec<u8> {
        rgba(&self.data.image(i % self.data.len()), 0.0, 1.2)
    }

    /// Hides a `w x h` rectangle at `(x, y)` in training image `i` and
    /// returns the filled-in image, as RGBA.
    pub fn impute(&self, i: usize, x: usize, y: usize, w: usize, h: usize) -> Result<Vec<u8>, JsValue> {
        let s = self.size;
        let img = self.data.image(i % self.data.len());
        let mask: Vec<bool> = (0..s * s)
            .map(|v| {
                let (r, c) = (v / s, v % s);
                !((r + s - y % s) % s < h && (c + s - x % s) % s < w)
            })
            .collect();
        let filled = self.inf.impute(&img, &mask).map_err(js_err)?;
        Ok(rgba(&filled, 0.0, 1.2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_demo_runs() {
        let d = Demo::new(8, 16, 2, 2, 1).unwrap();
        assert_eq!(d.latents(), 2);
        assert_eq!(d.objective().len(), 3);
        assert_eq!(d.reconstruct(vec![0.0, 0.0]).unwrap().len(), 16 * 16 * 4);
        assert_eq!(d.sample(3).unwrap().len(), 1024);
        let filled = d.impute(0, 14, 14, 5, 5).unwrap();
        let orig = d.image(0);
        // the rectangle covers x, y in 14, 15, 0, 1, 2
        assert_eq!(&filled[4 * 3..4 * 14], &orig[4 * 3..4 * 14]);
        assert_ne!(&filled[..4 * 3], &orig[..4 * 3]);
        assert!(d.latent_sd().iter().all(|s| *s > 0.0));
    }
}

//! Comparing model variants by how well they predict hidden voxels.

use std::fmt;
use std::str::FromStr;

use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::hyper::HyperParams;
use crate::inference::Inference;
use crate::trainer::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Shape basis only.
    Shape,
    /// Appearance basis only.
    Appearance,
    /// One latent vector drives both bases.
    Shared,
    /// Separate latents for shape and appearance.
    Split,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Shape, Variant::Appearance, Variant::Shared, Variant::Split];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Shape => "shape",
            Variant::Appearance => "appearance",
            Variant::Shared => "shared",
            Variant::Split => "split",
        }
    }

    /// Hyper-parameters for this variant with `k` latents in total, taking
    /// everything else from `base`. `split_a` is the appearance share of a
    /// split model.
    pub fn hyper(self, base: &HyperParams, k: usize, split_a: usize) -> Result<HyperParams> {
        let (k_a, k_v, shared) = match self {
            Variant::Shape => (0, k, false),
            Variant::Appearance => (k, 0, false),
            Variant::Shared => (k, k, true),
            Variant::Split => {
                if split_a == 0 || split_a >= k {
                    return Err(Error::Hyper(format!(
                        "a split model needs between 1 and {} appearance latents, got {split_a}",
                        k.saturating_sub(1)
                    )));
                }
                (split_a, k - split_a, false)
            }
        };
        let h = HyperParams {
            k_a,
            k_v,
            shared_latents: shared,
            nu0: base.nu0.max(k as f64),
            lambda0: None,
            ..base.clone()
        };
        h.validate()?;
        Ok(h)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Hyper(format!("unknown variant {s:?}")))
    }
}

/// Appearance latents of a split model with `k` latents: about 30%.
pub fn default_split(k: usize) -> usize {
    ((0.3 * k as f64).round() as usize).clamp(1, k.saturating_sub(1).max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct XvalRow {
    pub variant: Variant,
    /// Summed log-likelihood of the hidden voxels.
    pub heldout_loglik: f64,
    /// Mean squared error of the filled-in voxels.
    pub mse: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct XvalReport {
    pub rows: Vec<XvalRow>,
    /// Error of filling hidden voxels with the per-voxel mean of the
    /// images where they are visible.
    pub mean_fill_mse: f64,
    pub hidden_voxels: usize,
}

impl XvalReport {
    pub fn row(&self, v: Variant) -> Option<&XvalRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,heldout_loglik,mse,objective\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.variant, r.heldout_loglik, r.mse, r.objective));
        }
        out.push_str(&format!("mean-fill,,{},\n", self.mean_fill_mse));
        out
    }
}

fn mean_fill(full: &ImageDataset, hidden: &[Vec<bool>]) -> Vec<f64> {
    let m = full.grid().voxels();
    let c = full.channels();
    let mut sum = vec![0.0; c * m];
    let mut count = vec![0usize; m];
    for (i, hid) in hidden.iter().enumerate() {
        let f = full.image(i);
        let mask = full.mask(i);
        for v in (0..m).filter(|&v| mask[v] && !hid[v]) {
            count[v] += 1;
            for k in 0..c {
                sum[k * m + v] += f[k * m + v];
            }
        }
    }
    let seen: usize = count.iter().sum();
    let overall: Vec<f64> = (0..c)
        .map(|k| (0..m).map(|v| sum[k * m + v]).sum::<f64>() / seen.max(1) as f64)
        .collect();
    (0..c * m)
        .map(|i| {
            let v = i % m;
            if count[v] > 0 {
                sum[i] / count[v] as f64
            } else {
                overall[i / m]
            }
        })
        .collect()
}

/// Hides `hidden` voxels, trains each variant on what is left and scores
/// the predictions of the hidden voxels against `full`.
pub fn cross_validate(
    full: &ImageDataset,
    hidden: &[Vec<bool>],
    variants: &[(Variant, HyperParams)],
    seed: u64,
) -> Result<XvalReport> {
    let m = full.grid().voxels();
    let c = full.channels();
    if hidden.len() != full.len() || hidden.iter().any(|h| h.len() != m) {
        return Err(Error::Shape("one hidden mask per image is required".into()));
    }
    let eval: Vec<Vec<bool>> = hidden
        .iter()
        .enumerate()
        .map(|(i, h)| h.iter().zip(full.mask(i)).map(|(&a, &b)| a && b).collect())
        .collect();
    let hidden_voxels: usize = eval.iter().map(|e| e.iter().filter(|&&b| b).count()).sum();
    if hidden_voxels == 0 {
        return Err(Error::Dataset("no voxels are hidden".into()));
    }
    let mut masked = full.clone();
    for (i, h) in hidden.iter().enumerate() {
        masked.hide(i, h);
    }
    let fill = mean_fill(full, hidden);
    let mut mean_se = 0.0;
    for (i, e) in eval.iter().enumerate() {
        let f = full.image(i);
        for v in (0..m).filter(|&v| e[v]) {
            for k in 0..c {
                mean_se += (f[k * m + v] - fill[k * m + v]).powi(2);
            }
        }
    }
    let denom = (hidden_voxels * c) as f64;

    let mut rows = Vec::with_capacity(variants.len());
    for (variant, hyper) in variants {
        log::info!("cross-validating the {variant} model");
        let (model, _, report) = train(&masked, hyper, seed)?;
        let inf = Inference::new(model)?;
        let score = |i: usize| -> Result<(f64, f64)> {
            if !eval[i].iter().any(|&b| b) {
                return Ok((0.0, 0.0));
            }
            let f = full.image(i);
            let ll = inf.heldout_loglik(&f, masked.mask(i), &eval[i])?;
            let filled = inf.impute(&masked.image(i), masked.mask(i))?;
            let mut se = 0.0;
            for v in (0..m).filter(|&v| eval[i][v]) {
                for k in 0..c {
                    se += (filled[k * m + v] - f[k * m + v]).powi(2);
                }
            }
            Ok((ll, se))
        };
        #[cfg(feature = "parallel")]
        let scores: Vec<(f64, f64)> = {
            use rayon::prelude::*;
            (0..full.len()).into_par_iter().map(score).collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let scores: Vec<(f64, f64)> = (0..full.len()).map(score).collect::<Result<_>>()?;
        rows.push(XvalRow {
            variant: *variant,
            heldout_loglik: scores.iter().map(|s| s.0).sum(),
            mse: scores.iter().map(|s| s.1).sum::<f64>() / denom,
            objective: report.final_objective(),
        });
    }
    Ok(XvalReport {
        rows,
        mean_fill_mse: mean_se / denom,
        hidden_voxels,
    })
}

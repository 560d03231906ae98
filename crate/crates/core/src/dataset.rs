//! Image collections on a common grid, and the `SAMD` container.
//!
//! ```text
//! "SAMD" | u16 LE version = 1 | u32 LE header length | JSON header | payload
//! ```
//!
//! The JSON header is `{"dims": [...], "n": N, "channels": C, "kind": ...}`
//! and the payload holds `N x C x M` little-endian `f32`, C-order with the
//! last grid axis fastest. NaN marks a missing voxel.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::likelihood::NoiseKind;

pub const SAMD_MAGIC: &[u8; 4] = b"SAMD";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Continuous,
    Binary,
    Categorical,
    /// Exported latent features; not trainable.
    Features,
}

impl DataKind {
    /// Noise model matching this kind of data.
    pub fn noise_kind(self) -> Option<NoiseKind> {
        match self {
            DataKind::Continuous => Some(NoiseKind::Gaussian),
            DataKind::Binary => Some(NoiseKind::Bernoulli),
            DataKind::Categorical => Some(NoiseKind::Categorical),
            DataKind::Features => None,
        }
    }

    pub fn for_noise(kind: NoiseKind) -> Self {
        match kind {
            NoiseKind::Gaussian => DataKind::Continuous,
            NoiseKind::Bernoulli => DataKind::Binary,
            NoiseKind::Categorical => DataKind::Categorical,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SamdHeader {
    dims: Vec<usize>,
    n: usize,
    channels: usize,
    kind: DataKind,
}

/// `N` images with `C` channels each, plus a per-voxel observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    grid: Grid,
    n: usize,
    channels: usize,
    kind: DataKind,
    values: Vec<f32>,
    mask: Vec<bool>,
}

impl ImageDataset {
    /// Builds a dataset from raw values. Any NaN channel marks the voxel missing.
    pub fn new(grid: Grid, n: usize, channels: usize, kind: DataKind, values: Vec<f32>) -> Result<Self> {
        let m = grid.voxels();
        if channels == 0 {
            return Err(Error::Dataset("at least one channel is required".into()));
        }
        if values.len() != n * channels * m {
            return Err(Error::Dataset(format!(
                "expected {} values for {n} images of {channels} x {m}, got {}",
                n * channels * m,
                values.len()
            )));
        }
        let mut mask = vec![true; n * m];
        for i in 0..n {
            for c in 0..channels {
                let off = (i * channels + c) * m;
                for v in 0..m {
                    if values[off + v].is_nan() {
                        mask[i * m + v] = false;
                    }
                }
            }
        }
        let ds = Self {
            grid,
            n,
            channels,
            kind,
            values,
            mask,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Builds a dataset from `f64` images (each `C x M`).
    pub fn from_images(grid: Grid, channels: usize, kind: DataKind, images: &[Vec<f64>]) -> Result<Self> {
        let values = images.iter().flat_map(|im| im.iter().map(|&x| x as f32)).collect();
        Self::new(grid, images.len(), channels, kind, values)
    }

    fn validate(&self) -> Result<()> {
        let m = self.grid.voxels();
        let c = self.channels;
        for i in 0..self.n {
            for v in (0..m).filter(|&v| self.mask[i * m + v]) {
                let at = |k: usize| self.values[(i * c + k) * m + v];
                match self.kind {
                    DataKind::Binary => {
                        if (0..c).any(|k| !(0.0..=1.0).contains(&at(k))) {
                            return Err(Error::Dataset(format!(
                                "binary image {i} has a value outside [0, 1] at voxel {v}"
                            )));
                        }
                    }
                    DataKind::Categorical => {
                        if c < 2 {
                            return Err(Error::Dataset("categorical data needs at least 2 channels".into()));
                        }
                        let s: f64 = (0..c).map(|k| at(k) as f64).sum();
                        if (0..c).any(|k| at(k) < 0.0) || (s - 1.0).abs() > 1e-5 {
                            return Err(Error::Dataset(format!(
                                "categorical image {i} does not sum to one at voxel {v}"
                            )));
                        }
                    }
                    _ => {
                        if (0..c).any(|k| !at(k).is_finite()) {
                            return Err(Error::Dataset(format!("image {i} has an infinite value")));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    /// Image `i` as a `C x M` array. Unobserved voxels hold NaN.
    pub fn image(&self, i: usize) -> Vec<f64> {
        let m = self.grid.voxels();
        let c = self.channels;
        let mask = self.mask(i);
        let raw = &self.values[i * c * m..(i + 1) * c * m];
        raw.iter()
            .enumerate()
            .map(|(k, &x)| if mask[k % m] { x as f64 } else { f64::NAN })
            .collect()
    }

    pub fn mask(&self, i: usize) -> &[bool] {
        let m = self.grid.voxels();
        &self.mask[i * m..(i + 1) * m]
    }

    /// Marks additional voxels of image `i` as unobserved.
    pub fn hide(&mut self, i: usize, hidden: &[bool]) {
        let m = self.grid.voxels();
        for (dst, &h) in self.mask[i * m..(i + 1) * m].iter_mut().zip(hidden) {
            if h {
                *dst = false;
            }
        }
    }

    /// Copy of the dataset restricted to the given images, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let m = self.grid.voxels();
        let cm = self.channels * m;
        let mut values = Vec::with_capacity(indices.len() * cm);
        let mut mask = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            values.extend_from_slice(&self.values[i * cm..(i + 1) * cm]);
            mask.extend_from_slice(&self.mask[i * m..(i + 1) * m]);
        }
        Self {
            grid: self.grid.clone(),
            n: indices.len(),
            channels: self.channels,
            kind: self.kind,
            values,
            mask,
        }
    }

    /// Splits into `parts` contiguous shards of near-equal size.
    pub fn partition(&self, parts: usize) -> Vec<Self> {
        let parts = parts.max(1);
        (0..parts)
            .map(|p| {
                let lo = p * self.n / parts;
                let hi = (p + 1) * self.n / parts;
                self.subset(&(lo..hi).collect::<Vec<_>>())
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.grid.voxels();
        let c = self.channels;
        let header = serde_json::to_vec(&SamdHeader {
            dims: self.grid.dims().to_vec(),
            n: self.n,
            channels: c,
            kind: self.kind,
        })
        .expect("header serialises");
        let mut out = write_framing(SAMD_MAGIC, &header, 4 * self.values.len());
        for i in 0..self.n {
            let mask = self.mask(i);
            let cm = c * m;
            let raw = &self.values[i * cm..(i + 1) * cm];
            // a voxel hidden through the API is written as missing in every channel
            for (k, &x) in raw.iter().enumerate() {
                let v = k % m;
                let hidden = !mask[v] && (0..c).all(|kk| !raw[kk * m + v].is_nan());
                let x = if hidden { f32::NAN } else { x };
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (SamdHeader, &[u8]) = read_framing(bytes, SAMD_MAGIC)?;
        let grid = Grid::new(&header.dims)?;
        let count = header.n * header.channels * grid.voxels();
        if payload.len() != 4 * count {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header implies {}",
                payload.len(),
                4 * count
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(grid, header.n, header.channels, header.kind, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Parses `magic | version | header length | JSON header` and returns the rest.
pub(crate) fn read_framing<'a, H: serde::de::DeserializeOwned>(
    bytes: &'a [u8],
    magic: &[u8; 4],
) -> Result<(H, &'a [u8])> {
    if bytes.len() < 10 || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "missing {:?} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + len {
        return Err(Error::Format("truncated header".into()));
    }
    let header = serde_json::from_slice(&bytes[10..10 + len])?;
    Ok((header, &bytes[10 + len..]))
}

pub(crate) fn write_framing(magic: &[u8; 4], header: &[u8], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + header.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nan_marks_missing() {
        let g = Grid::new(&[4, 4]).unwrap();
        let mut vals = vec![0.5f32; 32];
        vals[3] = f32::NAN;
        let ds = ImageDataset::new(g, 2, 1, DataKind::Binary, vals).unwrap();
        assert!(!ds.mask(0)[3]);
        assert!(ds.mask(1).iter().all(|&b| b));
        assert!(ds.image(0)[3].is_nan());
    }

    #[test]
    fn validation() {
        let g = Grid::new(&[4, 4]).unwrap();
        assert!(ImageDataset::new(g.clone(), 1, 1, DataKind::Binary, vec![2.0; 16]).is_err());
        let mut cat = vec![0.5f32; 32];
        cat[0] = 0.7;
        assert!(ImageDataset::new(g.clone(), 1, 2, DataKind::Categorical, cat.clone()).is_err());
        cat[0] = f32::NAN;
        assert!(ImageDataset::new(g.clone(), 1, 2, DataKind::Categorical, cat).is_ok());
        assert!(ImageDataset::new(g, 1, 1, DataKind::Continuous, vec![0.0; 15]).is_err());
    }

    #[test]
    fn hidden_voxels_are_saved_missing() {
        let g = Grid::new(&[4, 4]).unwrap();
        let mut ds = ImageDataset::new(g, 1, 2, DataKind::Continuous, vec![1.0; 32]).unwrap();
        let mut hide = vec![false; 16];
        hide[5] = true;
        ds.hide(0, &hide);
        let back = ImageDataset::from_bytes(&ds.to_bytes()).unwrap();
        assert!(!back.mask(0)[5]);
        assert!(back.mask(0)[4]);
        assert_eq!(back.to_bytes(), ds.to_bytes());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(ImageDataset::from_bytes(b"SAMX\x01\x00").is_err());
        let g = Grid::new(&[4, 4]).unwrap();
        let ds = ImageDataset::new(g, 1, 1, DataKind::Continuous, vec![1.0; 16]).unwrap();
        let mut b = ds.to_bytes();
        b.pop();
        assert!(ImageDataset::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            bits in proptest::collection::vec(any::<u32>(), 2 * 3 * 20),
            cat in any::<bool>(),
        ) {
            let g = Grid::new(&[4, 5]).unwrap();
            let (kind, values): (DataKind, Vec<f32>) = if cat {
                // categorical: first channel p, second 1 - p, third 0, with NaN payloads kept
                let mut v = vec![0.0f32; 2 * 3 * 20];
                for i in 0..2 {
                    for x in 0..20 {
                        let b = bits[i * 60 + x];
                        if b % 7 == 0 {
                            v[(i * 3) * 20 + x] = f32::from_bits(0x7fc0_0000 | (b & 0xffff));
                            continue;
                        }
                        let p = (b % 1000) as f32 / 1000.0;
                        v[(i * 3) * 20 + x] = p;
                        v[(i * 3 + 1) * 20 + x] = 1.0 - p;
                    }
                }
                (DataKind::Categorical, v)
            } else {
                let v = bits.iter().map(|&b| {
                    let x = f32::from_bits(b);
                    if x.is_infinite() { 0.0 } else { x }
                }).collect();
                (DataKind::Continuous, v)
            };
            let ds = ImageDataset::new(g, 2, 3, kind, values.clone()).unwrap();
            let bytes = ds.to_bytes();
            let back = ImageDataset::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes.clone());
            let payload = &bytes[bytes.len() - 4 * values.len()..];
            let orig: Vec<u8> = values.iter().flat_map(|x| x.to_le_bytes()).collect();
            prop_assert_eq!(payload, &orig[..]);
        }
    }
}

//! Binary PGM/PPM output for image grids.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// An 8-bit raster with 1 (grey) or 3 (RGB) channels, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    /// `P5` for grey, `P6` for colour.
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PNM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(Error::Format(format!("unsupported PNM type {m}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM field {s}")));
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        if num(&fields[3])? != 255 {
            return Err(Error::Format("only 8-bit PNM is supported".into()));
        }
        let need = width * height * channels;
        if bytes.len() < pos + need {
            return Err(Error::Format("truncated PNM pixels".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }
}

/// Tiles `C x M` images into a `rows x cols` grid, scaling `[lo, hi]` to
/// `[0, 255]`. 3-D images show their middle slice along the first axis.
/// One channel gives grey; otherwise the first three channels map to RGB.
pub fn tile(grid: &Grid, channels: usize, images: &[Vec<f64>], cols: usize, lo: f64, hi: f64) -> Result<Raster> {
    if images.is_empty() || cols == 0 {
        return Err(Error::Shape("nothing to tile".into()));
    }
    let m = grid.voxels();
    let dims = grid.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let offset = if dims.len() == 3 { (dims[0] / 2) * h * w } else { 0 };
    let rows = images.len().div_ceil(cols);
    let out_c = if channels == 1 { 1 } else { 3 };
    let width = cols * w;
    let height = rows * h;
    let mut pixels = vec![0u8; width * height * out_c];
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (i, img) in images.iter().enumerate() {
        if img.len() != channels * m {
            return Err(Error::Shape(format!("image {i} has {} values, expected {}", img.len(), channels * m)));
        }
        let (ty, tx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let v = offset + y * w + x;
                let px = ((ty * h + y) * width + tx * w + x) * out_c;
                for c in 0..out_c.min(channels) {
                    let val = img[c * m + v];
                    let s = if val.is_nan() { 0.0 } else { ((val - lo) / span).clamp(0.0, 1.0) };
                    pixels[px + c] = (s * 255.0).round() as u8;
                }
            }
        }
    }
    Ok(Raster {
        width,
        height,
        channels: out_c,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let g = Grid::new(&[4, 5]).unwrap();
        let a: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let b = vec![1.0; 20];
        let r = tile(&g, 1, &[a, b.clone(), b], 2, 0.0, 1.0).unwrap();
        assert_eq!((r.width, r.height, r.channels), (10, 8, 1));
        assert_eq!(r.pixels[0], 0);
        assert_eq!(r.pixels[3 * 10 + 4], 255);
        assert_eq!(r.pixels[5], 255);
        // empty fourth tile stays black
        assert_eq!(r.pixels[(7 * 10) + 9], 0);
        let bytes = r.encode();
        assert!(bytes.starts_with(b"P5\n10 8\n255\n"));
        assert_eq!(Raster::decode(&bytes).unwrap(), r);
    }

    #[test]
    fn colour_uses_three_channels() {
        let g = Grid::new(&[4, 4]).unwrap();
        let img: Vec<f64> = (0..32).map(|i| if i < 16 { 1.0 } else { 0.0 }).collect();
        let r = tile(&g, 2, &[img], 1, 0.0, 1.0).unwrap();
        assert_eq!(r.channels, 3);
        assert_eq!(&r.pixels[..3], &[255, 0, 0]);
        assert!(r.encode().starts_with(b"P6"));
    }
}

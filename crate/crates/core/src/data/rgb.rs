//! RGB composites with a per-channel percentile contrast stretch.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::msi::MultispectralImage;
use crate::error::{Error, Result};

/// Source band *indices* for the red, green and blue channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandMapping {
    pub red: usize,
    pub green: usize,
    pub blue: usize,
}

impl BandMapping {
    /// B4/B3/B2 → R/G/B, looked up by band id.
    pub fn sentinel2(img: &MultispectralImage) -> Result<Self> {
        let find = |id: u32| {
            img.band_index(id)
                .ok_or_else(|| Error::BandMapping(format!("band id {id} not present")))
        };
        let m = Self {
            red: find(4)?,
            green: find(3)?,
            blue: find(2)?,
        };
        m.validate(img.n_bands())?;
        Ok(m)
    }

    pub fn validate(&self, n_bands: usize) -> Result<()> {
        let idx = [self.red, self.green, self.blue];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_bands) {
            return Err(Error::BandMapping(format!(
                "band index {bad} out of range for {n_bands} bands"
            )));
        }
        if self.red == self.green || self.red == self.blue || self.green == self.blue {
            return Err(Error::BandMapping(format!("bands must be distinct, got {idx:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stretch {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Stretch {
    fn default() -> Self {
        Self { lo: 2.0, hi: 98.0 }
    }
}

impl Stretch {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.lo) || !(0.0..=100.0).contains(&self.hi) || self.lo >= self.hi {
            return Err(Error::InvalidStretch {
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(())
    }
}

/// Linear-interpolated percentile of an ascending slice (`p` in 0..=100).
pub fn percentile(sorted: &[f32], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= n {
        return sorted[n - 1] as f64;
    }
    sorted[i] as f64 + frac * (sorted[i + 1] as f64 - sorted[i] as f64)
}

fn stretch_band(band: &[f32], stretch: Stretch) -> Vec<u8> {
    let mut sorted = band.to_vec();
    sorted.sort_by(f32::total_cmp);
    let lo = percentile(&sorted, stretch.lo);
    let hi = percentile(&sorted, stretch.hi);
    let span = hi - lo;
    band.iter()
        .map(|&v| {
            let v = v as f64;
            if v <= lo {
                0
            } else if v >= hi {
                // a degenerate span only reaches here for values strictly above it
                255
            } else {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

/// 8-bit RGB composite. Values at or below the low percentile map to 0, at or
/// above the high percentile to 255; a constant band maps to 0.
pub fn to_rgb(img: &MultispectralImage, mapping: BandMapping, stretch: Stretch) -> Result<RgbImage> {
    stretch.validate()?;
    mapping.validate(img.n_bands())?;
    let channels = [mapping.red, mapping.green, mapping.blue].map(|b| stretch_band(img.band(b), stretch));
    let (h, w) = (img.height(), img.width());
    let mut raw = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        raw.extend(channels.iter().map(|c| c[i]));
    }
    RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Image("raster size overflow".into()))
}

pub fn encode_png(rgb: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    rgb.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn save_png(path: &Path, rgb: &RgbImage) -> Result<()> {
    let bytes = encode_png(rgb)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

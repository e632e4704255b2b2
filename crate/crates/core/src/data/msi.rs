//! MSI1 multispectral raster container.
//!
//! ```text
//! "MSI1"                    4 magic bytes
//! u32 height, u32 width, u32 bands
//! bands × (u32 band_id, f32 wavelength_nm)
//! height·width·bands × f32  band-planar: [band][row][col]
//! ```
//! All fields little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MSI_MAGIC: &[u8; 4] = b"MSI1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandInfo {
    pub id: u32,
    pub wavelength_nm: f32,
}

/// The twelve Sentinel-2 L2A bands used for scene classification. Band 8A
/// carries id 13 so every id is a plain integer.
pub const SENTINEL2_BANDS: [BandInfo; 12] = [
    BandInfo {
        id: 1,
        wavelength_nm: 443.0,
    },
    BandInfo {
        id: 2,
        wavelength_nm: 490.0,
    },
    BandInfo {
        id: 3,
        wavelength_nm: 560.0,
    },
    BandInfo {
        id: 4,
        wavelength_nm: 665.0,
    },
    BandInfo {
        id: 5,
        wavelength_nm: 705.0,
    },
    BandInfo {
        id: 6,
        wavelength_nm: 740.0,
    },
    BandInfo {
        id: 7,
        wavelength_nm: 783.0,
    },
    BandInfo {
        id: 8,
        wavelength_nm: 842.0,
    },
    BandInfo {
        id: 13,
        wavelength_nm: 865.0,
    },
    BandInfo {
        id: 9,
        wavelength_nm: 945.0,
    },
    BandInfo {
        id: 11,
        wavelength_nm: 1610.0,
    },
    BandInfo {
        id: 12,
        wavelength_nm: 2190.0,
    },
];

/// H×W×B reflectance raster, stored band-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct MultispectralImage {
    height: usize,
    width: usize,
    bands: Vec<BandInfo>,
    data: Vec<f32>,
}

impl MultispectralImage {
    pub fn new(height: usize, width: usize, bands: Vec<BandInfo>, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands.is_empty() {
            return Err(Error::ImageShape {
                expected: "non-empty dimensions".into(),
                found: format!("{height}x{width}x{}", bands.len()),
            });
        }
        let expected = height * width * bands.len();
        if data.len() != expected {
            return Err(Error::MsiSizeMismatch {
                expected: expected * 4,
                found: data.len() * 4,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { offset: i * 4 });
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    /// Bands take default Sentinel-2 metadata when `data` has 12 planes,
    /// otherwise sequential ids with unknown (0) wavelength.
    pub fn from_planes(height: usize, width: usize, n_bands: usize, data: Vec<f32>) -> Result<Self> {
        let bands = if n_bands == SENTINEL2_BANDS.len() {
            SENTINEL2_BANDS.to_vec()
        } else {
            (0..n_bands as u32)
                .map(|id| BandInfo {
                    id: id + 1,
                    wavelength_nm: 0.0,
                })
                .collect()
        };
        Self::new(height, width, bands, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn bands(&self) -> &[BandInfo] {
        &self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, b: usize, row: usize, col: usize) -> f32 {
        self.data[(b * self.height + row) * self.width + col]
    }

    pub fn band_index(&self, id: u32) -> Option<usize> {
        self.bands.iter().position(|b| b.id == id)
    }

    /// Per-band mean reflectance.
    pub fn band_means(&self) -> Vec<f64> {
        (0..self.n_bands())
            .map(|b| {
                let band = self.band(b);
                band.iter().map(|&v| v as f64).sum::<f64>() / band.len() as f64
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.bands.len() * 8 + self.data.len() * 4);
        out.extend_from_slice(MSI_MAGIC);
        for v in [self.height, self.width, self.bands.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for b in &self.bands {
            out.extend_from_slice(&b.id.to_le_bytes());
            out.extend_from_slice(&b.wavelength_nm.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != MSI_MAGIC {
            return Err(Error::MsiBadMagic);
        }
        let mut pos = 4;
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let s = buf.get(*pos..*pos + 4).ok_or(Error::MsiTruncated { offset: *pos })?;
            *pos += 4;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };
        let h = u32_at(&mut pos)? as usize;
        let w = u32_at(&mut pos)? as usize;
        let nb = u32_at(&mut pos)? as usize;
        let mut bands = Vec::with_capacity(nb.min(4096));
        for _ in 0..nb {
            let id = u32_at(&mut pos)?;
            let wl = f32::from_bits(u32_at(&mut pos)?);
            bands.push(BandInfo { id, wavelength_nm: wl });
        }
        let expected = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(nb))
            .and_then(|v| v.checked_mul(4))
            .ok_or(Error::MsiSizeMismatch {
                expected: usize::MAX,
                found: buf.len() - pos,
            })?;
        let payload = &buf[pos..];
        if payload.len() < expected {
            return Err(Error::MsiTruncated { offset: buf.len() });
        }
        if payload.len() > expected {
            return Err(Error::MsiSizeMismatch {
                expected,
                found: payload.len(),
            });
        }
        let mut data = Vec::with_capacity(expected / 4);
        for (i, c) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { offset: pos + i * 4 });
            }
            data.push(v);
        }
        Self::new(h, w, bands, data)
    }
}

pub fn load_msi(path: &Path) -> Result<MultispectralImage> {
    let buf = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    MultispectralImage::from_bytes(&buf)
}

pub fn save_msi(path: &Path, img: &MultispectralImage) -> Result<()> {
    std::fs::write(path, img.to_bytes()).map_err(|e| Error::file(path, e))
}

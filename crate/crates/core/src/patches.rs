//! Tissue detection and uniform rejection sampling of tissue patches.

use std::path::Path;

use image::{ImageError, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from_seed;

pub const DEFAULT_PATCH_SIZE: u32 = 256;
pub const DEFAULT_PATCHES_PER_WSI: usize = 512;
pub const DEFAULT_MIN_COVERAGE: f64 = 0.75;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("window at ({x}, {y}) of size {size} exceeds mask bounds {width}x{height}")]
    OutOfBounds {
        x: u32,
        y: u32,
        size: u32,
        width: u32,
        height: u32,
    },
    #[error("insufficient tissue: found {found} of {requested} patches after {attempts} attempts")]
    InsufficientTissue {
        found: usize,
        requested: usize,
        attempts: usize,
    },
    #[error("image {width}x{height} is smaller than patch size {size}")]
    ImageTooSmall { width: u32, height: u32, size: u32 },
    #[error("min_coverage must lie in [0, 1], got {0}")]
    InvalidCoverage(f64),
    #[error("image error: {0}")]
    Image(#[from] ImageError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Thresholds separating stained tissue from the bright slide background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueMaskParams {
    /// HSV saturation in [0, 1] above which a pixel counts as tissue.
    pub saturation_min: f64,
    /// HSV value (max channel) below which a pixel counts as tissue.
    pub luminance_max: u8,
}

impl Default for TissueMaskParams {
    fn default() -> Self {
        Self {
            saturation_min: 0.08,
            luminance_max: 225,
        }
    }
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    /// Summed-area table with one row/column of zero padding.
    integral: Vec<u32>,
}

impl TissueMask {
    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::from_bits(width, height, bits)
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize);
        let w = width as usize + 1;
        let mut integral = vec![0u32; w * (height as usize + 1)];
        for y in 0..height as usize {
            let mut row = 0u32;
            for x in 0..width as usize {
                row += u32::from(bits[y * width as usize + x]);
                integral[(y + 1) * w + x + 1] = integral[y * w + x + 1] + row;
            }
        }
        Self {
            width,
            height,
            bits,
            integral,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.integral[self.integral.len() - 1] as usize
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    /// Number of set pixels in the `size`×`size` window at (x, y).
    pub fn window_count(&self, x: u32, y: u32, size: u32) -> Result<u64, PatchError> {
        if x.checked_add(size).is_none_or(|r| r > self.width) || y.checked_add(size).is_none_or(|b| b > self.height) {
            return Err(PatchError::OutOfBounds {
                x,
                y,
                size,
                width: self.width,
                height: self.height,
            });
        }
        let w = self.width as usize + 1;
        let (x0, y0, x1, y1) = (x as usize, y as usize, (x + size) as usize, (y + size) as usize);
        let at = |xx: usize, yy: usize| i64::from(self.integral[yy * w + xx]);
        Ok((at(x1, y1) - at(x0, y1) - at(x1, y0) + at(x0, y0)) as u64)
    }
}

/// HSV saturation and value of one pixel.
pub fn saturation_value(px: [u8; 3]) -> (f64, u8) {
    let max = px.iter().copied().max().unwrap_or(0);
    let min = px.iter().copied().min().unwrap_or(0);
    let sat = if max == 0 {
        0.0
    } else {
        f64::from(max - min) / f64::from(max)
    };
    (sat, max)
}

pub fn is_tissue(px: [u8; 3], params: &TissueMaskParams) -> bool {
    let (sat, value) = saturation_value(px);
    sat > params.saturation_min || value < params.luminance_max
}

pub fn tissue_mask(image: &RgbImage, params: &TissueMaskParams) -> TissueMask {
    let bits = image.pixels().map(|p| is_tissue(p.0, params)).collect();
    TissueMask::from_bits(image.width(), image.height(), bits)
}

/// Exact fraction of tissue pixels in the window: count / size².
pub fn tissue_coverage(mask: &TissueMask, x: u32, y: u32, size: u32) -> Result<f64, PatchError> {
    let count = mask.window_count(x, y, size)?;
    Ok(count as f64 / (f64::from(size) * f64::from(size)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub wsi_id: String,
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub pixels: RgbImage,
    pub tissue_coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub n: usize,
    pub size: u32,
    pub min_coverage: f64,
    pub max_attempts: usize,
    pub mask: TissueMaskParams,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self::with_count(DEFAULT_PATCHES_PER_WSI)
    }
}

impl SamplingParams {
    /// Defaults with `n` patches and the matching attempt budget of 100·n.
    pub fn with_count(n: usize) -> Self {
        Self {
            n,
            size: DEFAULT_PATCH_SIZE,
            min_coverage: DEFAULT_MIN_COVERAGE,
            max_attempts: 100 * n,
            mask: TissueMaskParams::default(),
        }
    }
}

/// Accepted patch corners in acceptance order; pixels are not copied.
pub fn sample_locations(
    mask: &TissueMask,
    n: usize,
    size: u32,
    min_coverage: f64,
    seed: u64,
    max_attempts: usize,
) -> Result<Vec<(u32, u32, f64)>, PatchError> {
    if !(0.0..=1.0).contains(&min_coverage) {
        return Err(PatchError::InvalidCoverage(min_coverage));
    }
    if mask.width() < size || mask.height() < size || size == 0 {
        return Err(PatchError::ImageTooSmall {
            width: mask.width(),
            height: mask.height(),
            size,
        });
    }
    let mut rng = rng_from_seed(seed);
    let (max_x, max_y) = (mask.width() - size, mask.height() - size);
    let mut accepted = Vec::with_capacity(n);
    let mut attempts = 0;
    while accepted.len() < n && attempts < max_attempts {
        attempts += 1;
        let x = rng.gen_range(0..=max_x);
        let y = rng.gen_range(0..=max_y);
        let coverage = tissue_coverage(mask, x, y, size)?;
        if coverage >= min_coverage {
            accepted.push((x, y, coverage));
        }
    }
    if accepted.len() < n {
        return Err(PatchError::InsufficientTissue {
            found: accepted.len(),
            requested: n,
            attempts,
        });
    }
    Ok(accepted)
}

/// Draws patch corners uniformly over the valid rectangle and keeps those
/// whose tissue coverage reaches `min_coverage`, until `n` are accepted or
/// `max_attempts` candidates have been drawn. Patches may overlap.
pub fn sample_patches(
    wsi_id: &str,
    image: &RgbImage,
    params: &SamplingParams,
    seed: u64,
) -> Result<Vec<Patch>, PatchError> {
    let mask = tissue_mask(image, &params.mask);
    let locations = sample_locations(
        &mask,
        params.n,
        params.size,
        params.min_coverage,
        seed,
        params.max_attempts,
    )?;
    Ok(locations
        .into_iter()
        .map(|(x, y, tissue_coverage)| Patch {
            wsi_id: wsi_id.to_string(),
            x,
            y,
            size: params.size,
            pixels: image::imageops::crop_imm(image, x, y, params.size, params.size).to_image(),
            tissue_coverage,
        })
        .collect())
}

/// Writes `{wsi_id}_{index}_{x}_{y}.png` files plus `patches.csv` into `dir`.
pub fn dump_patches(dir: &Path, patches: &[Patch]) -> Result<(), PatchError> {
    std::fs::create_dir_all(dir)?;
    let index_path = dir.join("patches.csv");
    let new_index = !index_path.exists();
    let mut index = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&index_path)?;
    use std::io::Write;
    if new_index {
        writeln!(index, "file,wsi_id,index,x,y,size,tissue_coverage")?;
    }
    for (i, p) in patches.iter().enumerate() {
        let name = format!("{}_{}_{}_{}.png", p.wsi_id, i, p.x, p.y);
        p.pixels.save(dir.join(&name))?;
        writeln!(
            index,
            "{name},{},{i},{},{},{},{}",
            p.wsi_id, p.x, p.y, p.size, p.tissue_coverage
        )?;
    }
    Ok(())
}

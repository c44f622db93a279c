//! Synthetic two-class, two-modality slide corpus.
//!
//! Each slide is a star-shaped tissue region on a near-white background.
//! Inside the tissue a pink stroma field carries elliptical "nuclei" whose
//! density, size and hue depend on the class. Frozen slides are the paraffin
//! rendering of the same clean texture passed through [`apply_degradation`]:
//! blur, contrast compression toward mid-gray, additive Gaussian noise and
//! circular near-white holes, in that order.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{write_manifest, Label, ManifestError, Modality, WsiRecord};
use crate::patches::{is_tissue, TissueMask, TissueMaskParams};
use crate::seed::{derive_seed, rng_from_seed, stream, PipelineRng};

pub const DEFAULT_IMAGE_SIZE: u32 = 2048;
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Background gray levels are drawn from this inclusive range.
const BACKGROUND_LEVELS: (u8, u8) = (250, 254);
/// Gray level written into freezing holes.
pub const HOLE_LEVEL: u8 = 252;
/// Stroma colour; each channel sits mid-way inside a 32-level histogram bin
/// so the small field and pixel jitter never move it across a bin edge.
const STROMA_RGB: [f64; 3] = [227.5, 171.5, 195.5];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Expected nuclei per megapixel of tissue.
    pub blob_density: f64,
    pub blob_radius_px: f64,
    /// Nuclear hue in degrees.
    pub base_hue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTextures {
    pub papillary: TextureParams,
    pub follicular: TextureParams,
}

impl ClassTextures {
    pub fn get(&self, label: Label) -> &TextureParams {
        match label {
            Label::Papillary => &self.papillary,
            Label::Follicular => &self.follicular,
        }
    }
}

impl Default for ClassTextures {
    fn default() -> Self {
        Self {
            papillary: TextureParams {
                blob_density: 2040.0,
                blob_radius_px: 4.5,
                base_hue: 278.0,
            },
            follicular: TextureParams {
                blob_density: 1200.0,
                blob_radius_px: 5.5,
                base_hue: 278.0,
            },
        }
    }
}

/// Frozen-section artifact model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub gaussian_blur_sigma: f64,
    /// Standard deviation in 8-bit intensity units.
    pub additive_noise_sigma: f64,
    /// Factor in (0, 1] applied to deviations from 128.
    pub contrast_scale: f64,
    /// Expected holes per megapixel of image area.
    pub hole_density: f64,
    pub hole_radius_px: f64,
}

impl DegradationParams {
    pub const IDENTITY: DegradationParams = DegradationParams {
        gaussian_blur_sigma: 0.0,
        additive_noise_sigma: 0.0,
        contrast_scale: 1.0,
        hole_density: 0.0,
        hole_radius_px: 0.0,
    };

    pub fn validate(&self) -> Result<(), SynthError> {
        let fields = [
            self.gaussian_blur_sigma,
            self.additive_noise_sigma,
            self.contrast_scale,
            self.hole_density,
            self.hole_radius_px,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SynthError::InvalidSpec(
                "degradation parameters must be finite and non-negative".into(),
            ));
        }
        if self.contrast_scale == 0.0 || self.contrast_scale > 1.0 {
            return Err(SynthError::InvalidSpec("contrast_scale must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            gaussian_blur_sigma: 1.5,
            additive_noise_sigma: 6.0,
            contrast_scale: 0.95,
            hole_density: 30.0,
            hole_radius_px: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_per_class_per_modality: usize,
    pub image_size: u32,
    pub class_texture_params: ClassTextures,
    pub frozen_degradation: DegradationParams,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_per_class_per_modality: 20,
            image_size: DEFAULT_IMAGE_SIZE,
            class_texture_params: ClassTextures::default(),
            frozen_degradation: DegradationParams::default(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_per_class_per_modality == 0 {
            return Err(SynthError::InvalidSpec("n_per_class_per_modality must be >= 1".into()));
        }
        if self.image_size < 512 {
            return Err(SynthError::InvalidSpec("image_size must be >= 512".into()));
        }
        for label in Label::ALL {
            let t = self.class_texture_params.get(label);
            if !(t.blob_density >= 0.0 && t.blob_radius_px > 0.0 && t.base_hue.is_finite()) {
                return Err(SynthError::InvalidSpec(format!("bad texture parameters for {label}")));
            }
        }
        self.frozen_degradation.validate()
    }
}

/// Seed of one emitted image: depends on (corpus seed, class, modality, index).
pub fn image_seed(spec_seed: u64, label: Label, modality: Modality, index: usize) -> u64 {
    derive_seed(spec_seed, &[stream::SYNTH, label as u64, modality as u64, index as u64])
}

/// Seed of the clean texture shared by the frozen and paraffin renderings.
fn texture_seed(spec_seed: u64, label: Label, index: usize) -> u64 {
    derive_seed(spec_seed, &[stream::SYNTH, label as u64, u64::MAX, index as u64])
}

/// A rendered slide with the tissue region it was drawn from.
#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub image: RgbImage,
    pub tissue: TissueMask,
}

/// HSV (hue in degrees, s and v in [0,1]) to RGB floats in [0, 255].
pub fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

struct TissueShape {
    cx: f64,
    cy: f64,
    r0: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl TissueShape {
    fn random(size: f64, rng: &mut PipelineRng) -> Self {
        let target = rng.gen_range(0.55..0.65);
        let harmonics: Vec<(f64, f64, f64)> = (2..=5)
            .map(|m| (f64::from(m), rng.gen_range(0.0..0.025), rng.gen_range(0.0..2.0 * PI)))
            .collect();
        let sq: f64 = harmonics.iter().map(|h| h.1 * h.1).sum();
        let r0 = (target * size * size / (PI * (1.0 + 0.5 * sq))).sqrt();
        let amp: f64 = harmonics.iter().map(|h| h.1).sum();
        let slack = (size / 2.0 - r0 * (1.0 + amp) - 2.0).max(0.0);
        Self {
            cx: size / 2.0 + rng.gen_range(-slack..=slack),
            cy: size / 2.0 + rng.gen_range(-slack..=slack),
            r0,
            harmonics,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let d2 = dx * dx + dy * dy;
        // Cheap accept/reject outside the band the harmonics can reach.
        let amp: f64 = self.harmonics.iter().map(|h| h.1).sum();
        let (lo, hi) = (self.r0 * (1.0 - amp), self.r0 * (1.0 + amp));
        if d2 < lo * lo {
            return true;
        }
        if d2 > hi * hi {
            return false;
        }
        let theta = dy.atan2(dx);
        let r = self.r0
            * (1.0
                + self
                    .harmonics
                    .iter()
                    .map(|(m, a, p)| a * (m * theta + p).cos())
                    .sum::<f64>());
        d2 <= r * r
    }
}

/// Smooth scalar field in roughly [-1, 1] built from a few random plane waves.
struct LowFrequencyField {
    waves: Vec<(f64, f64, f64)>,
}

impl LowFrequencyField {
    fn random(size: f64, rng: &mut PipelineRng) -> Self {
        let waves = (0..4)
            .map(|_| {
                let angle = rng.gen_range(0.0..2.0 * PI);
                let wavelength = rng.gen_range(0.2..0.6) * size;
                let k = 2.0 * PI / wavelength;
                (k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        Self { waves }
    }

    /// Field values of one row, using sin(a + b) = sin a cos b + cos a sin b
    /// with the column terms precomputed in `cols`.
    fn row(&self, y: f64, cols: &[Vec<(f64, f64)>], out: &mut [f64]) {
        out.fill(0.0);
        for ((_, ky, p), col) in self.waves.iter().zip(cols) {
            let (sb, cb) = (ky * y + p).sin_cos();
            for (o, (sa, ca)) in out.iter_mut().zip(col) {
                *o += sa * cb + ca * sb;
            }
        }
        out.iter_mut().for_each(|o| *o /= 2.0);
    }

    fn columns(&self, width: u32) -> Vec<Vec<(f64, f64)>> {
        self.waves
            .iter()
            .map(|(kx, _, _)| (0..width).map(|x| (kx * f64::from(x)).sin_cos()).collect())
            .collect()
    }
}

/// Renders the clean (paraffin-quality) texture of one slide.
fn render_clean(label: Label, spec: &CorpusSpec, index: usize) -> SyntheticSlide {
    let size = spec.image_size;
    let sizef = f64::from(size);
    let mut rng = rng_from_seed(texture_seed(spec.seed, label, index));
    let shape = TissueShape::random(sizef, &mut rng);
    let field = LowFrequencyField::random(sizef, &mut rng);
    let tissue = TissueMask::from_fn(size, size, |x, y| {
        shape.contains(f64::from(x) + 0.5, f64::from(y) + 0.5)
    });

    let cols = field.columns(size);
    let mut f = vec![0.0; size as usize];
    let mut image = RgbImage::new(size, size);
    for y in 0..size {
        field.row(f64::from(y), &cols, &mut f);
        for x in 0..size {
            let px = if tissue.get(x, y) {
                let shift = f[x as usize].round() + f64::from(rng.gen_range(-2i8..=2));
                Rgb(STROMA_RGB.map(|c| to_u8(c + shift)))
            } else {
                let g = rng.gen_range(BACKGROUND_LEVELS.0..=BACKGROUND_LEVELS.1);
                Rgb([g, g, g])
            };
            image.put_pixel(x, y, px);
        }
    }

    // Slide-level variation around the class texture.
    let texture = spec.class_texture_params.get(label);
    let density = texture.blob_density * rng.gen_range(0.85..1.15);
    let radius = texture.blob_radius_px * rng.gen_range(0.92..1.08);
    let hue = texture.base_hue + rng.gen_range(-3.0..3.0);
    let expected = density * tissue.count() as f64 / 1.0e6;
    let count = if expected > 0.0 {
        Poisson::new(expected).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
    } else {
        0
    };
    for _ in 0..count {
        let (bx, by) = loop {
            let x = rng.gen_range(0.0..sizef);
            let y = rng.gen_range(0.0..sizef);
            if tissue.get(x as u32, y as u32) {
                break (x, y);
            }
        };
        let ra = radius * rng.gen_range(0.75..1.25);
        let rb = ra * rng.gen_range(0.6..1.0);
        let angle = rng.gen_range(0.0..PI);
        let color = hsv_to_rgb(
            hue + rng.gen_range(-4.0..4.0),
            rng.gen_range(0.42..0.52),
            rng.gen_range(0.42..0.52),
        );
        draw_ellipse(&mut image, &tissue, bx, by, ra, rb, angle, color, &mut rng);
    }
    SyntheticSlide { image, tissue }
}

#[allow(clippy::too_many_arguments)]
fn draw_ellipse(
    image: &mut RgbImage,
    tissue: &TissueMask,
    cx: f64,
    cy: f64,
    ra: f64,
    rb: f64,
    angle: f64,
    color: [f64; 3],
    rng: &mut PipelineRng,
) {
    let (cos, sin) = (angle.cos(), angle.sin());
    let reach = ra.ceil() as i64 + 1;
    let (w, h) = (i64::from(image.width()), i64::from(image.height()));
    for y in (cy as i64 - reach).max(0)..(cy as i64 + reach + 1).min(h) {
        for x in (cx as i64 - reach).max(0)..(cx as i64 + reach + 1).min(w) {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (dx * cos + dy * sin) / ra;
            let v = (-dx * sin + dy * cos) / rb;
            if u * u + v * v <= 1.0 && tissue.get(x as u32, y as u32) {
                let j = rng.gen_range(-6.0..=6.0);
                image.put_pixel(
                    x as u32,
                    y as u32,
                    Rgb([to_u8(color[0] + j), to_u8(color[1] + j), to_u8(color[2] + j)]),
                );
            }
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| (w / total) as f32).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders on an interleaved RGB buffer.
fn blur(buf: &mut [f32], width: usize, height: usize, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0f32; buf.len()];
    tmp.par_chunks_mut(width * 3).enumerate().for_each(|(y, row)| {
        for x in 0..width {
            let mut acc = [0f32; 3];
            for (k, w) in kernel.iter().enumerate() {
                let xx = (x as i64 + k as i64 - radius).clamp(0, width as i64 - 1) as usize;
                let src = (y * width + xx) * 3;
                for c in 0..3 {
                    acc[c] += w * buf[src + c];
                }
            }
            row[x * 3..x * 3 + 3].copy_from_slice(&acc);
        }
    });
    buf.par_chunks_mut(width * 3).enumerate().for_each(|(y, row)| {
        for x in 0..width {
            let mut acc = [0f32; 3];
            for (k, w) in kernel.iter().enumerate() {
                let yy = (y as i64 + k as i64 - radius).clamp(0, height as i64 - 1) as usize;
                let src = (yy * width + x) * 3;
                for c in 0..3 {
                    acc[c] += w * tmp[src + c];
                }
            }
            row[x * 3..x * 3 + 3].copy_from_slice(&acc);
        }
    });
}

/// Applies the frozen-section artifact model: blur, contrast compression
/// toward 128, clamped Gaussian noise, then near-white circular holes
/// centred on tissue pixels of the input.
pub fn apply_degradation(image: &RgbImage, params: &DegradationParams, seed: u64) -> RgbImage {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::DEGRADE]));
    let mut buf: Vec<f32> = image.as_raw().iter().map(|&v| f32::from(v)).collect();

    if params.gaussian_blur_sigma > 0.0 {
        blur(&mut buf, w, h, params.gaussian_blur_sigma);
    }
    if params.contrast_scale != 1.0 {
        let s = params.contrast_scale as f32;
        for v in &mut buf {
            *v = 128.0 + s * (*v - 128.0);
        }
    }
    if params.additive_noise_sigma > 0.0 {
        // One draw per pixel, shared by the channels, so noise does not add saturation.
        let normal = Normal::new(0.0f32, params.additive_noise_sigma as f32).expect("validated noise sigma");
        for px in buf.chunks_exact_mut(3) {
            let n = normal.sample(&mut rng);
            for v in px {
                *v = (*v + n).clamp(0.0, 255.0);
            }
        }
    }
    let mut out = RgbImage::from_raw(
        w as u32,
        h as u32,
        buf.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect(),
    )
    .expect("buffer has image dimensions");

    if params.hole_density > 0.0 && params.hole_radius_px > 0.0 {
        let expected = params.hole_density * (w * h) as f64 / 1.0e6;
        let holes = Poisson::new(expected).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
        let mask_params = TissueMaskParams::default();
        for _ in 0..holes {
            // Centres land on tissue of the undegraded input; give up on blank images.
            let centre = (0..10_000).find_map(|_| {
                let x = rng.gen_range(0..w as u32);
                let y = rng.gen_range(0..h as u32);
                is_tissue(image.get_pixel(x, y).0, &mask_params).then_some((x, y))
            });
            let Some((cx, cy)) = centre else { break };
            let r = params.hole_radius_px * rng.gen_range(0.5..1.5);
            let reach = r.ceil() as i64;
            for y in (i64::from(cy) - reach).max(0)..(i64::from(cy) + reach + 1).min(h as i64) {
                for x in (i64::from(cx) - reach).max(0)..(i64::from(cx) + reach + 1).min(w as i64) {
                    let (dx, dy) = ((x - i64::from(cx)) as f64, (y - i64::from(cy)) as f64);
                    if dx * dx + dy * dy <= r * r {
                        out.put_pixel(x as u32, y as u32, Rgb([HOLE_LEVEL; 3]));
                    }
                }
            }
        }
    }
    out
}

/// Renders one slide together with the tissue region it was drawn in.
pub fn generate_slide(
    label: Label,
    modality: Modality,
    spec: &CorpusSpec,
    index: usize,
) -> Result<SyntheticSlide, SynthError> {
    spec.validate()?;
    if index >= spec.n_per_class_per_modality {
        return Err(SynthError::InvalidSpec(format!(
            "index {index} out of range for {} slides per class and modality",
            spec.n_per_class_per_modality
        )));
    }
    let clean = render_clean(label, spec, index);
    match modality {
        Modality::Paraffin => Ok(clean),
        Modality::Frozen => Ok(SyntheticSlide {
            image: apply_degradation(
                &clean.image,
                &spec.frozen_degradation,
                image_seed(spec.seed, label, modality, index),
            ),
            tissue: clean.tissue,
        }),
        Modality::TranslatedParaffin => Err(SynthError::InvalidSpec(
            "translated slides come from an external translation model".into(),
        )),
    }
}

pub fn generate_wsi(label: Label, modality: Modality, spec: &CorpusSpec, index: usize) -> Result<RgbImage, SynthError> {
    generate_slide(label, modality, spec, index).map(|s| s.image)
}

pub fn wsi_id(label: Label, modality: Modality, index: usize) -> String {
    format!("{}_{}_{index:03}", modality.as_str(), label.as_str())
}

/// Writes the full corpus (PNG images and `manifest.csv`) into `out_dir`
/// and returns the manifest path.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<PathBuf, SynthError> {
    spec.validate()?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    let jobs: Vec<(Label, usize)> = Label::ALL
        .into_iter()
        .flat_map(|l| (0..spec.n_per_class_per_modality).map(move |i| (l, i)))
        .collect();
    let mut records: Vec<WsiRecord> = jobs
        .par_iter()
        .map(|&(label, index)| -> Result<Vec<WsiRecord>, SynthError> {
            let clean = render_clean(label, spec, index).image;
            let frozen = apply_degradation(
                &clean,
                &spec.frozen_degradation,
                image_seed(spec.seed, label, Modality::Frozen, index),
            );
            let mut out = Vec::with_capacity(2);
            for (modality, img) in [(Modality::Paraffin, &clean), (Modality::Frozen, &frozen)] {
                let id = wsi_id(label, modality, index);
                let rel = PathBuf::from("images").join(format!("{id}.png"));
                img.save(out_dir.join(&rel))?;
                out.push(WsiRecord {
                    wsi_id: id,
                    image_path: rel,
                    modality,
                    label,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    records.sort_by(|a, b| (a.modality, a.label, &a.wsi_id).cmp(&(b.modality, b.label, &b.wsi_id)));

    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest_path, &records)?;
    Ok(manifest_path)
}

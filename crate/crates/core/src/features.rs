//! Patch descriptors and the feature-store file format.
//!
//! The built-in extractor produces a 120-dimensional descriptor made only of
//! orientation-free statistics, so it is a pure function of the pixel values:
//!
//! | range    | content                                                   |
//! |----------|-----------------------------------------------------------|
//! | 0..96    | R, G, B 32-bin intensity histograms, each L1-normalized    |
//! | 96..112  | 16-bin luminance gradient-magnitude histogram, L1-normalized |
//! | 112..120 | mean/std of R, G, B and luminance, scaled by 1/255         |
//!
//! Imported stores carry whatever embedding an external network produced.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::RgbImage;
use thiserror::Error;

use rayon::prelude::*;

use crate::manifest::WsiRecord;
use crate::patches::{sample_patches, Patch, PatchError, SamplingParams};
use crate::seed::{derive_seed, hash_str, stream};

pub const HANDCRAFTED_DIM: usize = 120;
const COLOR_BINS: usize = 32;
const GRADIENT_BINS: usize = 16;

/// Largest central-difference magnitude of the integer luminance
/// `299 R + 587 G + 114 B` (range 0..=255000): `sqrt(2) * 255000 / 2`.
const MAX_GRADIENT: f64 = std::f64::consts::SQRT_2 * 127_500.0;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature store parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("dimension mismatch at record {record}: expected {expected}, found {found}")]
    DimensionMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in record {record}")]
    NonFiniteValue { record: usize },
    #[error("wsi `{wsi_id}` has {found} patch records, expected {expected}")]
    UnevenPatchCount {
        wsi_id: String,
        expected: usize,
        found: usize,
    },
    #[error("wsi `{wsi_id}`: {source}")]
    Slide {
        wsi_id: String,
        #[source]
        source: PatchError,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub wsi_id: String,
    pub patch_index: usize,
    pub values: Vec<f64>,
}

/// Descriptors of one slide, in patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct WsiFeatures {
    pub wsi_id: String,
    pub vectors: Vec<FeatureVector>,
}

/// Per-patch descriptors grouped by slide, in order of first appearance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStore {
    dimension: usize,
    groups: Vec<WsiFeatures>,
    index: HashMap<String, usize>,
    /// Set when slides may hold different numbers of patch records.
    pub partial: bool,
}

impl FeatureStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            ..Self::default()
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.vectors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn wsi_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[WsiFeatures] {
        &self.groups
    }

    pub fn get(&self, wsi_id: &str) -> Option<&WsiFeatures> {
        self.index.get(wsi_id).map(|&i| &self.groups[i])
    }

    pub fn records(&self) -> impl Iterator<Item = &FeatureVector> {
        self.groups.iter().flat_map(|g| g.vectors.iter())
    }

    /// Appends one record, validating its dimension and values.
    pub fn push(&mut self, record: FeatureVector) -> Result<(), FeatureError> {
        let n = self.len();
        if self.groups.is_empty() && self.dimension == 0 {
            self.dimension = record.values.len();
        }
        if record.values.len() != self.dimension {
            return Err(FeatureError::DimensionMismatch {
                record: n,
                expected: self.dimension,
                found: record.values.len(),
            });
        }
        if record.values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFiniteValue { record: n });
        }
        match self.index.get(&record.wsi_id) {
            Some(&i) => self.groups[i].vectors.push(record),
            None => {
                self.index.insert(record.wsi_id.clone(), self.groups.len());
                self.groups.push(WsiFeatures {
                    wsi_id: record.wsi_id.clone(),
                    vectors: vec![record],
                });
            }
        }
        Ok(())
    }

    /// Appends all descriptors of one slide.
    pub fn push_wsi(&mut self, wsi_id: &str, vectors: Vec<Vec<f64>>) -> Result<(), FeatureError> {
        for (patch_index, values) in vectors.into_iter().enumerate() {
            self.push(FeatureVector {
                wsi_id: wsi_id.to_string(),
                patch_index,
                values,
            })?;
        }
        Ok(())
    }

    /// Checks that every slide holds the same number of records unless the
    /// store is marked partial.
    pub fn validate_uniform(&self) -> Result<(), FeatureError> {
        if self.partial {
            return Ok(());
        }
        let Some(first) = self.groups.first() else {
            return Ok(());
        };
        let expected = first.vectors.len();
        match self.groups.iter().find(|g| g.vectors.len() != expected) {
            Some(g) => Err(FeatureError::UnevenPatchCount {
                wsi_id: g.wsi_id.clone(),
                expected,
                found: g.vectors.len(),
            }),
            None => Ok(()),
        }
    }
}

fn luminance_milli(p: &[u8]) -> i64 {
    299 * i64::from(p[0]) + 587 * i64::from(p[1]) + 114 * i64::from(p[2])
}

fn mean_std(sum: u128, sum_sq: u128, n: u128, scale: f64) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum as f64 / nf;
    // n * sum_sq - sum^2 is computed exactly in integers.
    let var = (n * sum_sq - sum * sum) as f64 / (nf * nf);
    (mean / scale, var.max(0.0).sqrt() / scale)
}

/// Handcrafted descriptor of an RGB image (see module docs for the layout).
pub fn extract_handcrafted_image(pixels: &RgbImage) -> Vec<f64> {
    let (w, h) = (pixels.width() as usize, pixels.height() as usize);
    let n = (w * h) as u128;
    let raw = pixels.as_raw();

    let mut color_hist = [[0u64; COLOR_BINS]; 3];
    let mut sums = [0u128; 3];
    let mut sums_sq = [0u128; 3];
    let mut lum = Vec::with_capacity(w * h);
    let (mut lum_sum, mut lum_sq) = (0u128, 0u128);
    for p in raw.chunks_exact(3) {
        for c in 0..3 {
            let v = p[c] as usize;
            color_hist[c][v * COLOR_BINS / 256] += 1;
            sums[c] += v as u128;
            sums_sq[c] += (v * v) as u128;
        }
        let l = luminance_milli(p);
        lum_sum += l as u128;
        lum_sq += (l * l) as u128;
        lum.push(l);
    }

    let mut grad_hist = [0u64; GRADIENT_BINS];
    let mut grad_count = 0u64;
    if w >= 3 && h >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let gx = lum[y * w + x + 1] - lum[y * w + x - 1];
                let gy = lum[(y + 1) * w + x] - lum[(y - 1) * w + x];
                let mag = ((gx * gx + gy * gy) as f64).sqrt() / 2.0;
                let bin = ((mag / MAX_GRADIENT) * GRADIENT_BINS as f64) as usize;
                grad_hist[bin.min(GRADIENT_BINS - 1)] += 1;
                grad_count += 1;
            }
        }
    }

    let mut out = Vec::with_capacity(HANDCRAFTED_DIM);
    for hist in &color_hist {
        out.extend(hist.iter().map(|&c| c as f64 / n as f64));
    }
    if grad_count > 0 {
        out.extend(grad_hist.iter().map(|&c| c as f64 / grad_count as f64));
    } else {
        out.push(1.0);
        out.extend(std::iter::repeat_n(0.0, GRADIENT_BINS - 1));
    }
    for c in 0..3 {
        let (m, s) = mean_std(sums[c], sums_sq[c], n, 255.0);
        out.push(m);
        out.push(s);
    }
    let (m, s) = mean_std(lum_sum, lum_sq, n, 255_000.0);
    out.push(m);
    out.push(s);
    debug_assert_eq!(out.len(), HANDCRAFTED_DIM);
    out
}

pub fn extract_handcrafted(patch: &Patch, patch_index: usize) -> FeatureVector {
    FeatureVector {
        wsi_id: patch.wsi_id.clone(),
        patch_index,
        values: extract_handcrafted_image(&patch.pixels),
    }
}

/// Patch-sampling seed of one slide.
pub fn patch_seed(base_seed: u64, wsi_id: &str) -> u64 {
    derive_seed(base_seed, &[stream::PATCHES, hash_str(wsi_id)])
}

/// Samples patches from one slide image and describes each of them.
/// `on_patches` sees the sampled patches before they are dropped.
pub fn extract_slide_features(
    wsi_id: &str,
    image: &RgbImage,
    params: &SamplingParams,
    base_seed: u64,
    on_patches: &(dyn Fn(&[Patch]) -> Result<(), PatchError> + Sync),
) -> Result<Vec<Vec<f64>>, FeatureError> {
    let wrap = |source| FeatureError::Slide {
        wsi_id: wsi_id.to_string(),
        source,
    };
    let patches = sample_patches(wsi_id, image, params, patch_seed(base_seed, wsi_id)).map_err(wrap)?;
    on_patches(&patches).map_err(wrap)?;
    Ok(patches.iter().map(|p| extract_handcrafted_image(&p.pixels)).collect())
}

/// Handcrafted descriptors for every record; images are loaded via `load`.
/// Slides are processed in parallel and stored in record order.
pub fn extract_records_features(
    records: &[&WsiRecord],
    load: &(dyn Fn(&WsiRecord) -> Result<RgbImage, PatchError> + Sync),
    params: &SamplingParams,
    base_seed: u64,
    on_patches: &(dyn Fn(&[Patch]) -> Result<(), PatchError> + Sync),
) -> Result<FeatureStore, FeatureError> {
    let per_slide = records
        .par_iter()
        .map(|r| {
            let image = load(r).map_err(|source| FeatureError::Slide {
                wsi_id: r.wsi_id.clone(),
                source,
            })?;
            extract_slide_features(&r.wsi_id, &image, params, base_seed, on_patches)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut store = FeatureStore::new(HANDCRAFTED_DIM);
    for (r, vectors) in records.iter().zip(per_slide) {
        store.push_wsi(&r.wsi_id, vectors)?;
    }
    Ok(store)
}

/// Writes `#dim=<d>` followed by one `wsi_id<TAB>patch_index<TAB>v0,...` line
/// per record. Values use the shortest representation that round-trips.
pub fn export_features(store: &FeatureStore, path: &Path) -> Result<(), FeatureError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "#dim={}", store.dimension())?;
    let mut line = String::new();
    for r in store.records() {
        line.clear();
        write!(line, "{}\t{}\t", r.wsi_id, r.patch_index).expect("write to string");
        for (i, v) in r.values.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            write!(line, "{v:?}").expect("write to string");
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn import_features(path: &Path) -> Result<FeatureStore, FeatureError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header_dim = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            line.trim()
                .strip_prefix("#dim=")
                .and_then(|d| d.parse::<usize>().ok())
                .ok_or(FeatureError::ParseError {
                    line: 1,
                    message: "expected `#dim=<d>` header".into(),
                })?
        }
        None => {
            return Err(FeatureError::ParseError {
                line: 1,
                message: "empty file".into(),
            })
        }
    };

    let mut store = FeatureStore::new(0);
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| FeatureError::ParseError { line: lineno, message };
        let mut fields = line.split('\t');
        let (Some(wsi_id), Some(idx), Some(values), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(parse_err("expected 3 tab-separated fields".into()));
        };
        let patch_index = idx
            .parse::<usize>()
            .map_err(|e| parse_err(format!("bad patch index: {e}")))?;
        let values = if values.is_empty() {
            Vec::new()
        } else {
            values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("bad value: {e}")))?
        };
        store.push(FeatureVector {
            wsi_id: wsi_id.to_string(),
            patch_index,
            values,
        })?;
    }
    if store.is_empty() {
        store.dimension = header_dim;
    } else if store.dimension != header_dim {
        return Err(FeatureError::DimensionMismatch {
            record: 0,
            expected: header_dim,
            found: store.dimension,
        });
    }
    store.partial = store.validate_uniform().is_err();
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    #[test]
    fn mid_gray_descriptor() {
        let d = extract_handcrafted_image(&RgbImage::from_pixel(256, 256, Rgb([128; 3])));
        assert_eq!(d.len(), HANDCRAFTED_DIM);
        for c in 0..3 {
            let hist = &d[c * 32..(c + 1) * 32];
            assert_eq!(hist[16], 1.0);
            assert_eq!(hist.iter().sum::<f64>(), 1.0);
        }
        assert_eq!(d[96], 1.0);
        assert!(d[97..112].iter().all(|&v| v == 0.0));
        for c in 0..4 {
            assert!((d[112 + 2 * c] - 128.0 / 255.0).abs() < 1e-12);
            assert_eq!(d[113 + 2 * c], 0.0);
        }
    }

    #[test]
    fn rotation_by_180_is_invisible() {
        let img = random_image(4, 64, 48);
        let rotated = image::imageops::rotate180(&img);
        assert_eq!(extract_handcrafted_image(&img), extract_handcrafted_image(&rotated));
    }

    #[test]
    fn histograms_normalized_on_random_patch() {
        let d = extract_handcrafted_image(&random_image(9, 256, 256));
        for range in [0..32, 32..64, 64..96, 96..112] {
            assert!((d[range].iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        assert!(d[112..].iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn extremes_stay_in_range() {
        let mut img = RgbImage::from_pixel(8, 8, Rgb([0; 3]));
        for y in 0..8 {
            for x in (0..8).step_by(2) {
                img.put_pixel(x, y, Rgb([255; 3]));
            }
        }
        let d = extract_handcrafted_image(&img);
        assert!(d.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    fn store_from(records: &[(&str, Vec<f64>)]) -> FeatureStore {
        let mut s = FeatureStore::new(0);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (id, v) in records {
            let c = counts.entry(id).or_default();
            s.push(FeatureVector {
                wsi_id: id.to_string(),
                patch_index: *c,
                values: v.clone(),
            })
            .unwrap();
            *c += 1;
        }
        s
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tsv");
        std::fs::write(&path, "#dim=3\na\t0\t1,2,3\na\t1\t1,2,3,4\n").unwrap();
        assert!(matches!(
            import_features(&path),
            Err(FeatureError::DimensionMismatch {
                record: 1,
                expected: 3,
                found: 4
            })
        ));
        std::fs::write(&path, "#dim=4\na\t0\t1,2,3\n").unwrap();
        assert!(matches!(
            import_features(&path),
            Err(FeatureError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tsv");
        std::fs::write(&path, "dim 3\n").unwrap();
        assert!(matches!(
            import_features(&path),
            Err(FeatureError::ParseError { line: 1, .. })
        ));
        std::fs::write(&path, "#dim=2\na\t0\t1,x\n").unwrap();
        assert!(matches!(
            import_features(&path),
            Err(FeatureError::ParseError { line: 2, .. })
        ));
        std::fs::write(&path, "#dim=2\na\t1,2\n").unwrap();
        assert!(matches!(
            import_features(&path),
            Err(FeatureError::ParseError { line: 2, .. })
        ));
    }

    #[test]
    fn nan_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tsv");
        std::fs::write(&path, "#dim=2\na\t0\t1,2\na\t1\tNaN,2\n").unwrap();
        assert!(matches!(
            import_features(&path),
            Err(FeatureError::NonFiniteValue { record: 1 })
        ));
        let mut s = FeatureStore::new(2);
        assert!(s
            .push(FeatureVector {
                wsi_id: "a".into(),
                patch_index: 0,
                values: vec![f64::INFINITY, 0.0]
            })
            .is_err());
    }

    #[test]
    fn empty_and_single_exports() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tsv");
        export_features(&FeatureStore::new(5), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "#dim=5\n");
        assert_eq!(import_features(&path).unwrap().dimension(), 5);

        let s = store_from(&[("w", vec![0.1, -2.5])]);
        export_features(&s, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "#dim=2\nw\t0\t0.1,-2.5\n");
    }

    #[test]
    fn uneven_stores_are_flagged() {
        let s = store_from(&[("a", vec![1.0]), ("a", vec![2.0]), ("b", vec![3.0])]);
        assert!(matches!(
            s.validate_uniform(),
            Err(FeatureError::UnevenPatchCount { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tsv");
        export_features(&s, &path).unwrap();
        assert!(import_features(&path).unwrap().partial);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn export_import_is_bit_exact(seed: u64, n in 1usize..40, d in 1usize..12) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut s = FeatureStore::new(d);
            for i in 0..n {
                let values: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 10f64.powi(rng.gen_range(-30..30)) - 0.5).collect();
                s.push(FeatureVector { wsi_id: format!("w{}", i % 3), patch_index: i / 3, values }).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("f.tsv");
            export_features(&s, &path).unwrap();
            let mut back = import_features(&path).unwrap();
            back.partial = s.partial;
            proptest::prop_assert_eq!(back, s);
        }
    }
}

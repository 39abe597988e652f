//! On-disk image/mask datasets and the synthetic shape generator.
//!
//! Layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<stem>.ten   (C, H, W) floats in [0, 1]
//! <dir>/masks/<stem>.ten    (K, H, W) binary
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::io::{read_raw_tensor_file, write_raw_tensor_file, RawTensor};
use crate::network::INPUT_MULTIPLE;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Fraction of samples assigned to the evaluation split.
pub const EVAL_FRACTION: f64 = 0.2;
pub const MIN_COVERAGE: f64 = 0.01;
pub const MAX_COVERAGE: f64 = 0.60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub stem: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: usize,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        if m.classes == 0 {
            return Err(Error::Dataset(format!("{}: classes must be positive", path.display())));
        }
        Ok(m)
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }
}

/// Samples of one split held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub stems: Vec<String>,
    /// `(n, C, H, W)`.
    pub images: Tensor<f32>,
    /// `(n, K, H, W)`.
    pub masks: Tensor<f32>,
}

fn sample_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join("images").join(format!("{stem}.ten")), dir.join("masks").join(format!("{stem}.ten")))
}

impl Dataset {
    /// Loads every sample of `split` (all samples when `None`).
    pub fn load(dir: impl AsRef<Path>, split: Option<Split>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = Manifest::load(dir)?;
        let mut stems = Vec::new();
        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut shape: Option<([usize; 3], [usize; 3])> = None;
        for entry in &manifest.samples {
            let (ip, mp) = sample_paths(dir, &entry.stem);
            for p in [&ip, &mp] {
                if !p.is_file() {
                    return Err(Error::Dataset(format!("sample {:?}: missing {}", entry.stem, p.display())));
                }
            }
            if split.is_some_and(|s| s != entry.split) {
                continue;
            }
            let img = read_raw_tensor_file(&ip)?;
            let mask = read_raw_tensor_file(&mp)?;
            let dims3 = |t: &RawTensor, what: &str| -> Result<[usize; 3]> {
                <[usize; 3]>::try_from(t.extents.as_slice()).map_err(|_| {
                    Error::Dataset(format!("sample {:?}: {what} must be 3-D, got {:?}", entry.stem, t.extents))
                })
            };
            let (id, md) = (dims3(&img, "image")?, dims3(&mask, "mask")?);
            if id[1..] != md[1..] {
                return Err(Error::Dataset(format!(
                    "sample {:?}: image {id:?} and mask {md:?} differ spatially",
                    entry.stem
                )));
            }
            if md[0] != manifest.classes {
                return Err(Error::Dataset(format!(
                    "sample {:?}: mask has {} channels, manifest says {}",
                    entry.stem, md[0], manifest.classes
                )));
            }
            match shape {
                None => shape = Some((id, md)),
                Some(s) if s != (id, md) => {
                    return Err(Error::Dataset(format!(
                        "sample {:?}: shape {id:?}/{md:?} differs from {:?}/{:?}",
                        entry.stem, s.0, s.1
                    )));
                }
                _ => {}
            }
            if mask.data.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Dataset(format!("sample {:?}: mask is not binary", entry.stem)));
            }
            stems.push(entry.stem.clone());
            images.extend(img.data);
            masks.extend(mask.data);
        }
        let Some((id, md)) = shape else {
            return Err(Error::Dataset(format!("{}: no samples in split {split:?}", dir.display())));
        };
        let n = stems.len();
        Ok(Self {
            stems,
            images: Tensor::from_vec([n, id[0], id[1], id[2]], images)?,
            masks: Tensor::from_vec([n, md[0], md[1], md[2]], masks)?,
        })
    }

    /// Builds a dataset from in-memory tensors.
    pub fn from_tensors(images: Tensor<f32>, masks: Tensor<f32>) -> Result<Self> {
        let [n, _, h, w] = images.dims();
        let [nm, _, hm, wm] = masks.dims();
        if n != nm || h != hm || w != wm {
            return Err(Error::Shape(format!("images {:?} vs masks {:?}", images.dims(), masks.dims())));
        }
        Ok(Self { stems: (0..n).map(|i| format!("{i:05}")).collect(), images, masks })
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.masks.dims()[1]
    }

    /// Images and masks of the given samples, stacked in order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let imgs: Vec<Tensor<f32>> = indices.iter().map(|&i| self.images.batch_slice(i, 1)).collect::<Result<_>>()?;
        let masks: Vec<Tensor<f32>> = indices.iter().map(|&i| self.masks.batch_slice(i, 1)).collect::<Result<_>>()?;
        Ok((
            Tensor::concat_batch(&imgs.iter().collect::<Vec<_>>())?,
            Tensor::concat_batch(&masks.iter().collect::<Vec<_>>())?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { n: 50, size: 64, classes: 1, channels: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let r = |rng: &mut ChaCha8Rng| rng.random_range(0.06..0.22) * size;
        let cy = rng.random_range(0.15..0.85) * size;
        let cx = rng.random_range(0.15..0.85) * size;
        let (ry, rx) = (r(rng), r(rng));
        if rng.random_bool(0.5) {
            Shape::Ellipse { cy, cx, ry, rx }
        } else {
            Shape::Rect { y0: cy - ry, x0: cx - rx, y1: cy + ry, x1: cx + rx }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
            Shape::Rect { y0, x0, y1, x1 } => (y0..=y1).contains(&y) && (x0..=x1).contains(&x),
        }
    }
}

/// Subsamples per pixel axis for anti-aliased rendering.
const SUPERSAMPLE: usize = 4;

/// Exact mask (pixel centers) and fractional coverage of a union of shapes.
fn rasterize(shapes: &[Shape], size: usize) -> (Vec<f32>, Vec<f32>) {
    let mut mask = vec![0.0f32; size * size];
    let mut alpha = vec![0.0f32; size * size];
    let inside = |y: f64, x: f64| shapes.iter().any(|s| s.contains(y, x));
    for i in 0..size {
        for j in 0..size {
            mask[i * size + j] = inside(i as f64 + 0.5, j as f64 + 0.5) as u8 as f32;
            let mut hits = 0;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let y = i as f64 + (a as f64 + 0.5) / SUPERSAMPLE as f64;
                    let x = j as f64 + (b as f64 + 0.5) / SUPERSAMPLE as f64;
                    hits += inside(y, x) as usize;
                }
            }
            alpha[i * size + j] = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
        }
    }
    (mask, alpha)
}

/// Number of evaluation samples out of `n`.
pub fn eval_count(n: usize) -> usize {
    (n as f64 * EVAL_FRACTION).round() as usize
}

/// Writes `n` synthetic image/mask pairs plus a manifest to `out_dir`.
///
/// Each class gets 1-3 random ellipses or rectangles with its own color on a
/// noisy dark background. Masks are the exact rasterization at pixel centers
/// and every class covers between 1% and 60% of the image. The last
/// `round(0.2 n)` samples form the evaluation split.
pub fn synth_generate(out_dir: impl AsRef<Path>, opts: &SynthOptions) -> Result<Manifest> {
    let SynthOptions { n, size, classes, channels, seed } = *opts;
    if size == 0 || size % INPUT_MULTIPLE != 0 {
        return Err(config_err!("size {size} must be a positive multiple of {INPUT_MULTIPLE}"));
    }
    if classes == 0 || channels == 0 || n == 0 {
        return Err(config_err!("n, classes and channels must be positive"));
    }
    let out_dir = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors: Vec<Vec<f32>> =
        (0..classes).map(|_| (0..channels).map(|_| rng.random_range(0.55f32..1.0)).collect()).collect();
    let hw = size * size;
    let n_eval = eval_count(n);
    let mut samples = Vec::with_capacity(n);
    for s in 0..n {
        let background = rng.random_range(0.05f32..0.3);
        let mut image: Vec<f32> = (0..channels * hw).map(|_| background + rng.random_range(-0.05f32..0.05)).collect();
        let mut mask = Vec::with_capacity(classes * hw);
        for color in &colors {
            let (m, alpha) = loop {
                let count = rng.random_range(1..=3);
                let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(&mut rng, size as f64)).collect();
                let (m, alpha) = rasterize(&shapes, size);
                let coverage = m.iter().sum::<f32>() as f64 / hw as f64;
                if (MIN_COVERAGE..=MAX_COVERAGE).contains(&coverage) {
                    break (m, alpha);
                }
            };
            for (c, &col) in color.iter().enumerate() {
                for (px, &a) in image[c * hw..(c + 1) * hw].iter_mut().zip(&alpha) {
                    *px = *px * (1.0 - a) + col * a;
                }
            }
            mask.extend(m);
        }
        for v in &mut image {
            *v = v.clamp(0.0, 1.0);
        }
        let stem = format!("{s:05}");
        let (ip, mp) = sample_paths(out_dir, &stem);
        write_raw_tensor_file(&ip, &RawTensor { extents: vec![channels, size, size], data: image })?;
        write_raw_tensor_file(&mp, &RawTensor { extents: vec![classes, size, size], data: mask })?;
        let split = if s < n - n_eval { Split::Train } else { Split::Eval };
        samples.push(ManifestEntry { stem, split });
    }
    let manifest = Manifest { classes, samples };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_split_is_a_fifth() {
        assert_eq!(eval_count(50), 10);
        assert_eq!(eval_count(5), 1);
        assert_eq!(eval_count(1), 0);
    }

    #[test]
    fn rect_rasterization_is_exact() {
        let (m, a) = rasterize(&[Shape::Rect { y0: 1.0, x0: 1.0, y1: 3.0, x1: 3.0 }], 4);
        let ones: Vec<usize> = (0..16).filter(|&i| m[i] == 1.0).collect();
        assert_eq!(ones, vec![5, 6, 9, 10]);
        assert!(a.iter().zip(&m).all(|(&a, &m)| a == m));
    }

    #[test]
    fn rejects_indivisible_size() {
        let dir = tempfile::tempdir().unwrap();
        let err = synth_generate(dir.path(), &SynthOptions { size: 65, ..Default::default() }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}

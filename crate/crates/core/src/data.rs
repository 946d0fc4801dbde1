//! Seeded synthetic image classification data.
//!
//! Four classes of 3-channel patterns: horizontal stripes, vertical stripes,
//! a checkerboard and a radial gradient. Each image gets a random period or
//! center, a random color, and Gaussian pixel noise (σ = 0.1), then is clamped
//! to `[0, 1]`. Image `i` has label `i mod 4`, so any prefix is class-balanced.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const SYNTHETIC_CLASSES: usize = 4;
pub const SYNTHETIC_NOISE: f64 = 0.1;
pub const CLASS_NAMES: [&str; SYNTHETIC_CLASSES] = ["horizontal_stripes", "vertical_stripes", "checker", "radial_gradient"];

/// Images `[N, C, H, W]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::input(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!("label {bad} is outside 0..{classes}")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let images = Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn image(&self, index: usize) -> Result<Tensor> {
        if index >= self.len() {
            return Err(Error::input(format!("image index {index} is outside 0..{}", self.len())));
        }
        Ok(self.batch(&[index]).0)
    }
}

/// `count` images of `size × size` pixels, fully determined by `seed`.
pub fn synthetic(count: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("valid σ");
    let plane = size * size;
    let mut data = Vec::with_capacity(count * 3 * plane);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % SYNTHETIC_CLASSES;
        let pattern = pattern(label, size, &mut rng);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..1.0));
        for c in color {
            for &p in &pattern {
                data.push((p * c + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(&[count, 3, size, size], data).expect("synthetic shape");
    Dataset::new(images, labels, SYNTHETIC_CLASSES).expect("synthetic labels")
}

/// Intensity map in `[0, 1]`, row-major.
fn pattern(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let period = rng.random_range(4.0..9.0);
    let phase = rng.random_range(0.0..period);
    let (cy, cx) = (rng.random_range(0.3 * s..0.7 * s), rng.random_range(0.3 * s..0.7 * s));
    let stripe = |t: f64| 0.5 + 0.5 * (2.0 * PI * (t + phase) / period).sin();
    let cell = period.round().max(2.0);
    (0..size * size)
        .map(|k| {
            let (y, x) = ((k / size) as f64, (k % size) as f64);
            match label {
                0 => stripe(y),
                1 => stripe(x),
                2 => {
                    let parity = ((y + phase) / cell).floor() + ((x + phase) / cell).floor();
                    if parity.rem_euclid(2.0) < 1.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => {
                    let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                    (1.0 - r / (0.7 * s)).clamp(0.0, 1.0)
                }
            }
        })
        .collect()
}

/// Sidecar describing a raw dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Raw file name, relative to the manifest.
    pub data_file: String,
    /// `[N, C, H, W]`.
    pub shape: Vec<usize>,
    pub image_dtype: String,
    pub classes: usize,
    pub images_offset: u64,
    pub labels_offset: u64,
    pub label_dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

/// Writes `<stem>.bin` (images, then u32 labels, little-endian) and `<stem>.json`.
pub fn save_dataset(dataset: &Dataset, stem: impl AsRef<Path>, dtype: DType, seed: Option<u64>) -> Result<PathBuf> {
    let stem = stem.as_ref();
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    let mut bytes = Vec::with_capacity(dataset.images.numel() * dtype.size() + 4 * dataset.len());
    for &v in dataset.images.data() {
        match dtype {
            DType::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let labels_offset = bytes.len() as u64;
    for &l in &dataset.labels {
        bytes.extend_from_slice(&(l as u32).to_le_bytes());
    }
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let manifest = DatasetManifest {
        data_file: bin
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::input(format!("{} has no file name", bin.display())))?
            .to_string(),
        shape: dataset.images.shape().to_vec(),
        image_dtype: dtype_name(dtype).to_string(),
        classes: dataset.classes,
        images_offset: 0,
        labels_offset,
        label_dtype: "u32".to_string(),
        seed,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(json)
}

/// Reads a dataset from its JSON manifest.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format("dataset manifest", e.to_string()))?;
    let bad = |r: String| Error::format("dataset", r);
    let dtype = match m.image_dtype.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(bad(format!("unsupported image dtype `{other}`"))),
    };
    if m.label_dtype != "u32" {
        return Err(bad(format!("unsupported label dtype `{}`", m.label_dtype)));
    }
    if m.shape.len() != 4 {
        return Err(bad(format!("shape {:?} is not [N, C, H, W]", m.shape)));
    }
    let bin = path.parent().unwrap_or(Path::new(".")).join(&m.data_file);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let numel: usize = m.shape.iter().product();
    let img_start = m.images_offset as usize;
    let img_end = img_start + numel * dtype.size();
    let lab_start = m.labels_offset as usize;
    let lab_end = lab_start + 4 * m.shape[0];
    if img_end > bytes.len() || lab_end > bytes.len() {
        return Err(bad(format!("{} is shorter than its manifest declares", bin.display())));
    }
    let raw = &bytes[img_start..img_end];
    let data: Vec<f64> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let labels = bytes[lab_start..lab_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    Dataset::new(Tensor::new(&m.shape, data)?, labels, m.classes)
}

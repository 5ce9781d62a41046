//! Image classification datasets: on-disk format and a synthetic generator.
//!
//! A dataset directory holds `meta.json`, and per split (`train`,
//! `validation`, `test`) a raw `<split>.f32` file of little-endian 32-bit
//! floats in NHWC order plus a `<split>_labels.csv` with an `index,label`
//! header.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::phenotype::Shape3;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One split held in memory as `[n, c, h, w]` doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub shape: Shape3,
    pub num_classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let len = self.shape.size();
        &self.images[i * len..(i + 1) * len]
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> DatasetSplit {
        let n = n.min(self.len());
        DatasetSplit {
            shape: self.shape,
            num_classes: self.num_classes,
            images: self.images[..n * self.shape.size()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    fn validate(&self, name: &str) -> Result<(), DataError> {
        if self.images.len() != self.len() * self.shape.size() {
            return Err(DataError::Invalid(format!("{name}: image buffer does not match labels")));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(DataError::Invalid(format!("{name}: label {l} out of range")));
        }
        if !self.images.iter().all(|v| v.is_finite()) {
            return Err(DataError::Invalid(format!("{name}: non-finite pixel")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub validation: DatasetSplit,
    pub test: DatasetSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub layout: String,
    pub dtype: String,
    pub splits: SplitSizes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticSpec>,
}

const SPLITS: [&str; 3] = ["train", "validation", "test"];

impl Dataset {
    pub fn shape(&self) -> Shape3 {
        self.train.shape
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    fn splits(&self) -> [&DatasetSplit; 3] {
        [&self.train, &self.validation, &self.test]
    }

    pub fn meta(&self, generator: Option<SyntheticSpec>) -> DatasetMeta {
        let s = self.shape();
        DatasetMeta {
            height: s.height,
            width: s.width,
            channels: s.channels,
            num_classes: self.num_classes(),
            layout: "NHWC".into(),
            dtype: "float32-le".into(),
            splits: SplitSizes {
                train: self.train.len(),
                validation: self.validation.len(),
                test: self.test.len(),
            },
            generator,
        }
    }

    pub fn write(&self, dir: &Path, generator: Option<SyntheticSpec>) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta_path = dir.join("meta.json");
        let meta = serde_json::to_string_pretty(&self.meta(generator))
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        fs::write(&meta_path, meta + "\n").map_err(io_err(&meta_path))?;
        for (name, split) in SPLITS.iter().zip(self.splits()) {
            let s = split.shape;
            let mut bytes = Vec::with_capacity(split.images.len() * 4);
            for i in 0..split.len() {
                let img = split.image(i);
                for y in 0..s.height {
                    for x in 0..s.width {
                        for c in 0..s.channels {
                            let v = img[(c * s.height + y) * s.width + x] as f32;
                            bytes.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
            let path = dir.join(format!("{name}.f32"));
            fs::write(&path, bytes).map_err(io_err(&path))?;
            let path = dir.join(format!("{name}_labels.csv"));
            let mut f = fs::File::create(&path).map_err(io_err(&path))?;
            let mut text = String::from("index,label\n");
            for (i, l) in split.labels.iter().enumerate() {
                text.push_str(&format!("{i},{l}\n"));
            }
            f.write_all(text.as_bytes()).map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, DataError> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| DataError::Invalid(format!("meta.json: {e}")))?;
        if meta.layout != "NHWC" || meta.dtype != "float32-le" {
            return Err(DataError::Invalid(format!(
                "unsupported layout/dtype {}/{}",
                meta.layout, meta.dtype
            )));
        }
        let shape = Shape3::new(meta.height, meta.width, meta.channels);
        if shape.size() == 0 || meta.num_classes < 2 {
            return Err(DataError::Invalid("empty image shape or fewer than 2 classes".into()));
        }
        let sizes = [meta.splits.train, meta.splits.validation, meta.splits.test];
        let mut splits = Vec::with_capacity(3);
        for (name, &n) in SPLITS.iter().zip(&sizes) {
            let path = dir.join(format!("{name}.f32"));
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if bytes.len() != n * shape.size() * 4 {
                return Err(DataError::Invalid(format!(
                    "{name}.f32 holds {} bytes, expected {}",
                    bytes.len(),
                    n * shape.size() * 4
                )));
            }
            let raw: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let mut images = vec![0.0; raw.len()];
            let (h, w, c) = (shape.height, shape.width, shape.channels);
            for i in 0..n {
                let off = i * shape.size();
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            images[off + (ch * h + y) * w + x] = raw[off + (y * w + x) * c + ch];
                        }
                    }
                }
            }
            let path = dir.join(format!("{name}_labels.csv"));
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let mut labels = vec![usize::MAX; n];
            for (line_no, line) in text.lines().enumerate().skip(1) {
                if line.trim().is_empty() {
                    continue;
                }
                let bad = || DataError::Invalid(format!("{name}_labels.csv line {}: `{line}`", line_no + 1));
                let (idx, label) = line.split_once(',').ok_or_else(bad)?;
                let idx: usize = idx.trim().parse().map_err(|_| bad())?;
                let label: usize = label.trim().parse().map_err(|_| bad())?;
                *labels.get_mut(idx).ok_or_else(bad)? = label;
            }
            if labels.contains(&usize::MAX) {
                return Err(DataError::Invalid(format!("{name}_labels.csv is missing labels")));
            }
            let split = DatasetSplit {
                shape,
                num_classes: meta.num_classes,
                images,
                labels,
            };
            split.validate(name)?;
            splits.push(split);
        }
        let test = splits.pop().unwrap();
        let validation = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        if train.is_empty() || validation.is_empty() {
            return Err(DataError::Invalid("train and validation splits must be non-empty".into()));
        }
        Ok(Dataset {
            train,
            validation,
            test,
        })
    }
}

/// Parameters of the synthetic pattern dataset. Class 0 is a Gaussian blob,
/// class 1 oriented stripes, class 2 a checkerboard and class 3 a ring;
/// position, scale, frequency and phase vary per sample and pixel noise is
/// added on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub samples: usize,
    /// train : validation : test
    pub ratios: [f64; 3],
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 1,
            num_classes: 2,
            samples: 400,
            ratios: [70.0, 15.0, 15.0],
            noise: 0.6,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(DataError::Invalid("image dimensions must be positive".into()));
        }
        if !(2..=4).contains(&self.num_classes) {
            return Err(DataError::Invalid("synthetic data supports 2 to 4 classes".into()));
        }
        if self.ratios.iter().any(|r| !(*r >= 0.0)) || self.ratios.iter().sum::<f64>() <= 0.0 {
            return Err(DataError::Invalid("split ratios must be non-negative".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(DataError::Invalid("noise must be non-negative".into()));
        }
        let sizes = self.split_sizes();
        if sizes[0] < self.num_classes || sizes[1] == 0 {
            return Err(DataError::Invalid(format!(
                "{} samples are too few for the requested splits",
                self.samples
            )));
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        let total: f64 = self.ratios.iter().sum();
        let train = (self.samples as f64 * self.ratios[0] / total).round() as usize;
        let validation = (self.samples as f64 * self.ratios[1] / total).round() as usize;
        let validation = validation.min(self.samples - train.min(self.samples));
        let train = train.min(self.samples);
        [train, validation, self.samples - train - validation]
    }

    pub fn generate(&self) -> Result<Dataset, DataError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let shape = Shape3::new(self.height, self.width, self.channels);
        let mut splits = self.split_sizes().into_iter().map(|n| {
            let mut labels: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
            labels.shuffle(&mut rng);
            let mut images = Vec::with_capacity(n * shape.size());
            for &label in &labels {
                self.render(label, &mut rng, &mut images);
            }
            DatasetSplit {
                shape,
                num_classes: self.num_classes,
                images,
                labels,
            }
        });
        let train = splits.next().unwrap();
        let validation = splits.next().unwrap();
        let test = splits.next().unwrap();
        Ok(Dataset {
            train,
            validation,
            test,
        })
    }

    fn render(&self, label: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        let (h, w) = (self.height as f64, self.width as f64);
        let scale = h.min(w);
        let cy = rng.gen_range(0.3..0.7) * h;
        let cx = rng.gen_range(0.3..0.7) * w;
        let size = rng.gen_range(0.10..0.22) * scale;
        let freq = rng.gen_range(2.0..3.5) / scale;
        let angle = rng.gen_range(0.0..PI);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amp = rng.gen_range(0.8..1.2);
        let (sa, ca) = angle.sin_cos();
        let pattern = |y: f64, x: f64| -> f64 {
            let (dy, dx) = (y - cy, x - cx);
            match label {
                0 => (-(dy * dy + dx * dx) / (2.0 * size * size)).exp(),
                1 => 0.5 * (2.0 * PI * freq * (x * ca + y * sa) + phase).sin(),
                2 => {
                    let cell = (2.0 * size).max(1.0);
                    let parity = ((y / cell).floor() + (x / cell).floor()) as i64;
                    if parity.rem_euclid(2) == 0 { 0.5 } else { -0.5 }
                }
                _ => {
                    let r = (dy * dy + dx * dx).sqrt();
                    (-(r - 2.0 * size).powi(2) / (0.5 * size * size)).exp()
                }
            }
        };
        for _c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let clean = amp * pattern(y as f64 + 0.5, x as f64 + 0.5);
                    let n: f64 = rng.sample(StandardNormal);
                    out.push(clean + self.noise * n);
                }
            }
        }
    }
}

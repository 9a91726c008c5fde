//! Procedural texture datasets and the on-disk formats.
//!
//! Tensor files (`.tnsr`): the bytes `TNSR`, then little-endian `u32` version (1),
//! `u32` rank, one `u32` per extent, then row-major little-endian `f32` values.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Largest element count accepted when decoding, to reject corrupt extents early.
const MAX_ELEMENTS: u64 = 1 << 31;

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(TNSR_MAGIC);
    out.extend_from_slice(&TNSR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    out
}

/// Decodes a tensor; `Err` carries a human-readable reason.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> std::result::Result<Tensor<T>, String> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> std::result::Result<&[u8], String> {
        let chunk = bytes.get(pos..pos + n).ok_or_else(|| format!("truncated while reading {what}"))?;
        pos += n;
        Ok(chunk)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    if take(4, "magic")? != TNSR_MAGIC {
        return Err("bad magic, expected TNSR".into());
    }
    let version = u32_at(take(4, "version")?);
    if version != TNSR_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let ndim = u32_at(take(4, "rank")?) as usize;
    if ndim == 0 {
        return Err("rank 0 tensors are not supported".into());
    }
    let mut shape = Vec::with_capacity(ndim.min(16));
    let mut count: u64 = 1;
    for _ in 0..ndim {
        let e = u32_at(take(4, "extent")?);
        if e == 0 {
            return Err("zero extent".into());
        }
        count = count.checked_mul(u64::from(e)).filter(|&c| c <= MAX_ELEMENTS).ok_or("dimension overflow")?;
        shape.push(e as usize);
    }
    let body = take(4 * count as usize, "data")?;
    let data = body.chunks_exact(4).map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))).collect();
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - pos));
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|m| Error::format(path, m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    Grating,
    Speckle,
    SmoothGradient,
    Spotted,
}

/// One texture class: pattern kind, carrier band in cycles/pixel, orientation range, pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureClassSpec {
    pub name: String,
    pub kind: PatternKind,
    pub freq: (f64, f64),
    pub orientation: (f64, f64),
    pub noise: f64,
}

impl TextureClassSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.freq;
        if !(0.0 <= lo && lo <= hi && hi < 0.5) {
            return Err(Error::Config(format!("class {}: band {:?} must lie in [0, 0.5)", self.name, self.freq)));
        }
        if self.orientation.0 > self.orientation.1 || self.noise < 0.0 {
            return Err(Error::Config(format!("class {}: bad orientation range or noise", self.name)));
        }
        Ok(())
    }
}

/// Low-frequency grating, high-frequency grating, speckle, smooth gradient.
pub fn default_classes() -> Vec<TextureClassSpec> {
    vec![
        TextureClassSpec {
            name: "low-grating".into(),
            kind: PatternKind::Grating,
            freq: (0.05, 0.10),
            orientation: (0.0, PI),
            noise: 0.05,
        },
        TextureClassSpec {
            name: "high-grating".into(),
            kind: PatternKind::Grating,
            freq: (0.30, 0.45),
            orientation: (0.0, PI),
            noise: 0.05,
        },
        TextureClassSpec {
            name: "speckle".into(),
            kind: PatternKind::Speckle,
            freq: (0.0, 0.49),
            orientation: (0.0, PI),
            noise: 0.05,
        },
        TextureClassSpec {
            name: "smooth-gradient".into(),
            kind: PatternKind::SmoothGradient,
            freq: (0.0, 0.10),
            orientation: (0.0, 2.0 * PI),
            noise: 0.05,
        },
    ]
}

/// Spot texture, available for custom class lists.
pub fn spotted_class() -> TextureClassSpec {
    TextureClassSpec {
        name: "spotted".into(),
        kind: PatternKind::Spotted,
        freq: (0.08, 0.16),
        orientation: (0.0, PI),
        noise: 0.05,
    }
}

/// `size×size` image in `[0, 1]`, row-major; `x` runs along columns.
pub fn gen_sample(spec: &TextureClassSpec, size: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = uniform(&mut rng, spec.freq);
    let theta = uniform(&mut rng, spec.orientation);
    let (sin, cos) = theta.sin_cos();
    let mut img = vec![0.0; size * size];
    match spec.kind {
        PatternKind::Grating => {
            let phase = rng.gen_range(0.0..2.0 * PI);
            for (p, v) in img.iter_mut().enumerate() {
                let (x, y) = ((p % size) as f64, (p / size) as f64);
                *v = 0.5 + 0.4 * (2.0 * PI * f * (x * cos + y * sin) + phase).cos();
            }
        }
        PatternKind::Speckle => {
            img.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        }
        PatternKind::SmoothGradient => {
            let half = (size as f64 - 1.0) / 2.0;
            let amp = rng.gen_range(0.5..0.8);
            for (p, v) in img.iter_mut().enumerate() {
                let (x, y) = ((p % size) as f64 - half, (p / size) as f64 - half);
                *v = 0.5 + amp * 0.5 * (x * cos + y * sin) / half.max(1.0) / std::f64::consts::SQRT_2;
            }
        }
        PatternKind::Spotted => {
            // spots on a jittered lattice with period 1/f
            let period = 1.0 / f.max(1e-3);
            let radius = period / 4.0;
            let n = (size as f64 / period).ceil() as usize + 1;
            let mut centers = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    let jy = rng.gen_range(-0.15..0.15) * period;
                    let jx = rng.gen_range(-0.15..0.15) * period;
                    centers.push(((i as f64 + 0.5) * period + jy, (j as f64 + 0.5) * period + jx));
                }
            }
            for (p, v) in img.iter_mut().enumerate() {
                let (y, x) = ((p / size) as f64, (p % size) as f64);
                let near = centers
                    .iter()
                    .map(|&(cy, cx)| (y - cy).powi(2) + (x - cx).powi(2))
                    .fold(f64::INFINITY, f64::min);
                *v = 0.15 + 0.7 * (-near / (2.0 * radius * radius)).exp();
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("non-negative noise");
        img.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Seed of sample `index` of class `label` under `master`.
pub fn sample_seed(master: u64, label: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((label as u64) << 32) | index as u64);
    rng.gen()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json { path: path.into(), source: e })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", m.version)));
        }
        if let Some(s) = m.samples.iter().find(|s| s.label >= m.classes.len()) {
            return Err(Error::format(path, format!("sample {} has label {} of {}", s.path, s.label, m.classes.len())));
        }
        Ok(m)
    }
}

/// Training count per class: the split total `round(total·ratio)` spread as evenly as
/// possible, earlier classes taking the remainder.
pub fn train_counts(classes: usize, per_class: usize, ratio: f64) -> Vec<usize> {
    let total = ((classes * per_class) as f64 * ratio).round() as usize;
    let total = total.min(classes * per_class);
    (0..classes).map(|c| (total / classes + usize::from(c < total % classes)).min(per_class)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub label: usize,
    pub name: String,
}

/// Images held in memory, `size×size` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub size: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn synthesize(specs: &[TextureClassSpec], per_class: usize, ratio: f64, size: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
        }
        for s in specs {
            s.validate()?;
        }
        let counts = train_counts(specs.len(), per_class, ratio);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (label, spec) in specs.iter().enumerate() {
            for i in 0..per_class {
                let sample = Sample {
                    image: gen_sample(spec, size, sample_seed(seed, label, i)),
                    label,
                    name: format!("{}_{i:03}", spec.name),
                };
                if i < counts[label] {
                    train.push(sample);
                } else {
                    test.push(sample);
                }
            }
        }
        Ok(Self { classes: specs.iter().map(|s| s.name.clone()).collect(), size, train, test })
    }

    /// Writes one tensor file per sample plus `manifest.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut samples = Vec::new();
        for (split, set) in [(Split::Train, &self.train), (Split::Test, &self.test)] {
            for s in set {
                let rel = format!("{}.tnsr", s.name);
                let t = Tensor::new(vec![self.size, self.size], s.image.clone())?;
                write_tensor(dir.join(&rel), &t)?;
                samples.push(SampleEntry { path: rel, label: s.label, split });
            }
        }
        let manifest = DatasetManifest { version: MANIFEST_VERSION, classes: self.classes.clone(), samples };
        manifest.write(dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    /// Loads a manifest and every tensor it lists; paths are relative to the manifest.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::read(manifest_path)?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let mut size = None;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for entry in &manifest.samples {
            let path = base.join(&entry.path);
            let t: Tensor<f64> = read_tensor(&path)?;
            let s = match t.shape() {
                &[h, w] if h == w => h,
                &[1, h, w] if h == w => h,
                other => return Err(Error::format(&path, format!("expected a square image, got {other:?}"))),
            };
            if *size.get_or_insert(s) != s {
                return Err(Error::format(&path, format!("image size {s} differs from the first sample")));
            }
            let name = Path::new(&entry.path).file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let sample = Sample { image: t.into_data(), label: entry.label, name };
            match entry.split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        let size = size.ok_or_else(|| Error::format(manifest_path, "manifest lists no samples"))?;
        Ok(Self { classes: manifest.classes, size, train, test })
    }
}

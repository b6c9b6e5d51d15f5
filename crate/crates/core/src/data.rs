//! Datasets and on-disk formats.
//!
//! * Tensor manifests: a directory holding `manifest.json` (a JSON array of
//!   `{name, shape, dtype, file, byte_order}`) and one raw little-endian file
//!   per tensor.
//! * CIFAR binary batches: records of 1 label byte + 3072 pixel bytes
//!   (channel-major 3×32×32).
//! * Synthetic blob/bar patterns for desk-scale experiments.
//! * Event text streams: one `t x y p` line per event (`t` in microseconds,
//!   `p` ∈ {0, 1}); blank lines and lines starting with `#` are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I32,
    U8,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub file: String,
    pub byte_order: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::I32(_) => Dtype::I32,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
        }
    }

    fn from_bytes(dtype: Dtype, bytes: &[u8]) -> Self {
        let words = || bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        match dtype {
            Dtype::F32 => TensorData::F32(words().map(f32::from_le_bytes).collect()),
            Dtype::I32 => TensorData::I32(words().map(i32::from_le_bytes).collect()),
            Dtype::U8 => TensorData::U8(bytes.to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: &[usize], data: TensorData) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!("tensor `{name}` has shape {shape:?} but {} values", data.len())));
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            data,
        })
    }
}

fn file_name_for(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

/// Writes `tensors` and their manifest into `dir` (created if needed).
pub fn save_tensors(dir: &Path, tensors: &[NamedTensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let file = file_name_for(&t.name);
        let path = dir.join(&file);
        fs::write(&path, t.data.to_bytes()).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: t.data.dtype(),
            file,
            byte_order: "little-endian".to_string(),
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&entries)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads every tensor listed in `dir/manifest.json`, checking file sizes.
pub fn load_tensors(dir: &Path) -> Result<Vec<NamedTensor>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        offset: 0,
        message: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let file = dir.join(&e.file);
        if e.byte_order != "little-endian" {
            return Err(Error::Format {
                path: file,
                offset: 0,
                message: format!("unsupported byte order `{}`", e.byte_order),
            });
        }
        let bytes = fs::read(&file).map_err(|err| Error::io(&file, err))?;
        let expected = e.shape.iter().product::<usize>() * e.dtype.width();
        if bytes.len() != expected {
            return Err(Error::Format {
                path: file,
                offset: bytes.len().min(expected) as u64,
                message: format!("expected {expected} bytes for shape {:?} {:?}, found {}", e.shape, e.dtype, bytes.len()),
            });
        }
        out.push(NamedTensor {
            name: e.name,
            shape: e.shape,
            data: TensorData::from_bytes(e.dtype, &bytes),
        });
    }
    Ok(out)
}

/// Labelled samples. Static images are `[C, H, W]`; event samples are
/// `[T, C, H, W]` frame stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::dim(format!("{} inputs but {} labels", inputs.len(), labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Argument(format!("label {y} out of range for {num_classes} classes")));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.shape() != first.shape()) {
                return Err(Error::dim("dataset samples differ in shape".to_string()));
            }
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples in the order given by `idx`.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// A seeded permutation of the samples.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.select(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().for_each(|&y| c[y] += 1);
        c
    }

    /// Stores inputs as one `f32` tensor `[N, ...]` and labels as `i32`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let first = self.inputs.first().ok_or_else(|| Error::Argument("cannot save an empty dataset".into()))?;
        let mut shape = vec![self.len()];
        shape.extend_from_slice(first.shape());
        let data: Vec<f32> = self.inputs.iter().flat_map(|x| x.data().iter().copied()).collect();
        let labels: Vec<i32> = self.labels.iter().map(|&y| y as i32).collect();
        save_tensors(
            dir,
            &[
                NamedTensor::new("inputs", &shape, TensorData::F32(data))?,
                NamedTensor::new("labels", &[self.len()], TensorData::I32(labels))?,
                NamedTensor::new("num_classes", &[1], TensorData::I32(vec![self.num_classes as i32]))?,
            ],
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let tensors = load_tensors(dir)?;
        let find = |n: &str| {
            tensors
                .iter()
                .find(|t| t.name == n)
                .ok_or_else(|| Error::Format {
                    path: dir.join(MANIFEST_FILE),
                    offset: 0,
                    message: format!("dataset manifest lacks `{n}`"),
                })
        };
        let inputs = find("inputs")?;
        let (TensorData::F32(x), TensorData::I32(y), TensorData::I32(c)) =
            (&inputs.data, &find("labels")?.data, &find("num_classes")?.data)
        else {
            return Err(Error::Format {
                path: dir.join(MANIFEST_FILE),
                offset: 0,
                message: "dataset tensors have unexpected dtypes".into(),
            });
        };
        let sample_shape = &inputs.shape[1..];
        let per: usize = sample_shape.iter().product();
        let samples = x
            .chunks(per)
            .map(|c| Tensor::new(sample_shape, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, y.iter().map(|&v| v as usize).collect(), c[0] as usize)
    }
}

/// Per-channel normalization constants for CIFAR images.
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses a raw CIFAR-10 batch into normalized `[3, 32, 32]` images.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() % CIFAR_RECORD
            ),
        });
    }
    let mut inputs = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (r * CIFAR_RECORD) as u64,
                message: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        let img = Tensor::from_fn(&[3, 32, 32], |i| {
            let c = i / 1024;
            (rec[1 + i] as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]
        });
        inputs.push(img);
        labels.push(label);
    }
    Dataset::new(inputs, labels, 10)
}

pub fn load_cifar_batch(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_batch(&bytes, path)
}

/// Parameters of the synthetic pattern dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Std of additive Gaussian pixel noise.
    pub noise: f32,
    /// Maximum absolute pattern shift in pixels.
    pub jitter: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Two classes of 16×16 single-channel patterns.
    pub fn toy(samples: usize, seed: u64) -> Self {
        Self {
            classes: 2,
            samples,
            channels: 1,
            height: 16,
            width: 16,
            noise: 0.1,
            jitter: 2,
            seed,
        }
    }
}

/// Renders the archetype of `class`/`variant` centred at `(cy, cx)`.
///
/// Class 0 is a filled disc (small or large by variant). Class `c ≥ 1` is a
/// full-length bar two pixels thick at angle `θ_c` (variant 0) or
/// `θ_c + π/2` (variant 1), with `θ_c = (c-1)·π / (2·(classes-1))`.
fn archetype(spec: &SynthSpec, class: usize, variant: usize, cy: f32, cx: f32) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let short = h.min(w) as f32;
    let mut img = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
            let on = if class == 0 {
                let r = if variant == 0 { short / 7.0 } else { short / 4.5 };
                dy * dy + dx * dx <= r * r
            } else {
                let base = (class - 1) as f32 * std::f32::consts::PI / (2.0 * (spec.classes - 1).max(1) as f32);
                let theta = base + variant as f32 * std::f32::consts::FRAC_PI_2;
                (dx * theta.sin() - dy * theta.cos()).abs() <= 1.0
            };
            img[y * w + x] = f32::from(u8::from(on));
        }
    }
    img
}

/// Deterministic labelled patterns; classes are balanced round-robin and
/// each sample picks one of two variants of its class archetype.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.samples == 0 || spec.channels == 0 || spec.height < 4 || spec.width < 4 {
        return Err(Error::Argument(format!("degenerate synthetic spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).map_err(|e| Error::Argument(e.to_string()))?;
    let (h, w) = (spec.height, spec.width);
    let j = spec.jitter as i64;
    let mut inputs = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        let variant = rng.random_range(0..2);
        let (oy, ox) = if j > 0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0, 0)
        };
        let base = archetype(spec, class, variant, h as f32 / 2.0 + oy as f32, w as f32 / 2.0 + ox as f32);
        let mut data = Vec::with_capacity(spec.channels * h * w);
        for _ in 0..spec.channels {
            for &v in &base {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(v + n);
            }
        }
        inputs.push(Tensor::new(&[spec.channels, h, w], data)?);
        labels.push(class);
    }
    Dataset::new(inputs, labels, spec.classes)
}

/// One DVS event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: usize,
    pub height: usize,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: usize, height: usize) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.x as usize >= width || e.y as usize >= height {
                return Err(Error::Argument(format!(
                    "event {i} at ({}, {}) lies outside {width}x{height}",
                    e.x, e.y
                )));
            }
            if e.polarity > 1 {
                return Err(Error::Argument(format!("event {i} has polarity {}", e.polarity)));
            }
            if i > 0 && e.t < events[i - 1].t {
                return Err(Error::Argument(format!("event {i} goes back in time")));
            }
        }
        Ok(Self { events, width, height })
    }

    /// Parses the `t x y p` text format.
    pub fn parse(text: &str, width: usize, height: usize, path: &Path) -> Result<Self> {
        let mut events = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let body = line.trim();
            if !body.is_empty() && !body.starts_with('#') {
                let bad = |m: String| Error::Format {
                    path: path.to_path_buf(),
                    offset,
                    message: m,
                };
                let f: Vec<&str> = body.split_whitespace().collect();
                if f.len() != 4 {
                    return Err(bad(format!("expected `t x y p`, got `{body}`")));
                }
                let num = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("`{s}` is not a nonnegative integer")));
                let (t, x, y, p) = (num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?);
                if x > u16::MAX as u64 || y > u16::MAX as u64 || p > 1 {
                    return Err(bad(format!("field out of range in `{body}`")));
                }
                events.push(Event {
                    t,
                    x: x as u16,
                    y: y as u16,
                    polarity: p as u8,
                });
            }
            offset += line.len() as u64;
        }
        Self::new(events, width, height)
    }

    pub fn load(path: &Path, width: usize, height: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, width, height, path)
    }
}

/// Bins events into `[T, 2, H, W]` count frames over `T` equal windows of
/// the stream's span. Channel 0 counts polarity 0, channel 1 polarity 1.
/// Counts are clipped at `cap` when given.
pub fn bin_events(stream: &EventStream, steps: usize, cap: Option<u32>) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Argument("need at least one time bin".into()));
    }
    let (h, w) = (stream.height, stream.width);
    let mut frames = vec![0u32; steps * 2 * h * w];
    let (Some(first), Some(last)) = (stream.events.first(), stream.events.last()) else {
        log::warn!("empty event stream; returning zero frames");
        return Tensor::new(&[steps, 2, h, w], vec![0.0; frames.len()]);
    };
    let span = (last.t - first.t + 1) as u128;
    for e in &stream.events {
        let bin = ((e.t - first.t) as u128 * steps as u128 / span) as usize;
        let idx = ((bin * 2 + e.polarity as usize) * h + e.y as usize) * w + e.x as usize;
        frames[idx] += 1;
    }
    let cap = cap.unwrap_or(u32::MAX);
    Tensor::new(&[steps, 2, h, w], frames.into_iter().map(|c| c.min(cap) as f32).collect())
}

/// Directory of `*.txt` event files with a `labels.json` mapping file name
/// to class index, binned into a frame dataset.
pub fn load_event_dataset(dir: &Path, width: usize, height: usize, steps: usize, cap: Option<u32>) -> Result<Dataset> {
    let path = dir.join("labels.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let labels: std::collections::BTreeMap<String, usize> = serde_json::from_str(&text)?;
    let num_classes = labels.values().max().map_or(0, |m| m + 1);
    let mut inputs = Vec::new();
    let mut ys = Vec::new();
    for (file, &y) in &labels {
        let p: PathBuf = dir.join(file);
        let stream = EventStream::load(&p, width, height)?;
        inputs.push(bin_events(&stream, steps, cap)?);
        ys.push(y);
    }
    Dataset::new(inputs, ys, num_classes)
}

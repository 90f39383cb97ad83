//! Labelled image datasets: on-disk shards, a synthetic generator, seeded
//! subset sampling and batching.
//!
//! # On-disk layout
//!
//! A dataset directory holds `meta.json` and one or more shards named
//! `data_000.bin`, `data_001.bin`, ... read in lexical order. A shard is a
//! flat sequence of fixed-width records:
//!
//! ```text
//! [label: u8][pixels: channels * height * width bytes, u8, C-H-W row-major]
//! ```
//!
//! There is no header and no padding, so every shard length is a multiple of
//! `1 + channels * height * width`. Pixels are scaled by `1/255` on load.
//! `meta.json` carries `name`, `classes`, `channels`, `height`, `width`,
//! `count` and `split`; `count` must equal the number of records across all
//! shards.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use atop_tensor::Tensor;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Default records per shard when writing.
pub const RECORDS_PER_SHARD: usize = 10_000;

/// Default evaluation subset size.
pub const EVAL_SUBSET: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".to_string()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    name: String,
    classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    count: usize,
    #[serde(default = "default_split")]
    split: String,
}

impl MetaFile {
    fn new(meta: &DatasetMeta, count: usize) -> Self {
        Self {
            name: meta.name.clone(),
            classes: meta.classes,
            channels: meta.channels,
            height: meta.height,
            width: meta.width,
            count,
            split: meta.split.clone(),
        }
    }

    fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            name: self.name.clone(),
            classes: self.classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
            split: self.split.clone(),
        }
    }
}

impl DatasetMeta {
    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn record_len(&self) -> usize {
        1 + self.pixels_per_image()
    }
}

/// Images in `[0, 1]` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    meta: DatasetMeta,
}

/// A slice of a dataset: images `[N, C, H, W]`, labels, and the dataset row
/// each entry came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl LabeledDataset {
    /// Validates the dataset invariants (pixel range, label range, shapes).
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!("images must be NCHW, got {:?}", images.shape())));
        }
        let (n, c, h, w) = images.dims4();
        if (c, h, w) != (meta.channels, meta.height, meta.width) {
            return Err(Error::Shape(format!(
                "images are {c}x{h}x{w} but metadata says {}x{}x{}",
                meta.channels, meta.height, meta.width
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("image sides must be positive".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= meta.classes) {
            return Err(Error::LabelRange {
                label,
                classes: meta.classes,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.meta.channels, self.meta.height, self.meta.width]
    }

    /// Rows `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        ImageBatch {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        }
    }

    /// A new dataset of rows `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let b = self.batch(indices);
        Self {
            images: b.images,
            labels: b.labels,
            meta: self.meta.clone(),
        }
    }

    /// Same labels and metadata with replacement images (e.g. adversarial
    /// copies). Validated like [`LabeledDataset::new`].
    pub fn with_images(&self, images: Tensor<f32>) -> Result<Self> {
        Self::new(images, self.labels.clone(), self.meta.clone())
    }

    pub fn whole(&self) -> ImageBatch {
        ImageBatch {
            images: self.images.clone(),
            labels: self.labels.clone(),
            indices: (0..self.len()).collect(),
        }
    }
}

fn shard_name(i: usize) -> String {
    format!("data_{i:03}.bin")
}

fn list_shards(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut shards: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_") && n.ends_with(".bin"))
        })
        .collect();
    shards.sort();
    Ok(shards)
}

/// Expected shape a loaded dataset must match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetShape {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Loads a dataset directory (see the module docs for the layout).
pub fn load_image_dataset(dir: &Path, expected: Option<DatasetShape>) -> Result<LabeledDataset> {
    if !dir.exists() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingPath(meta_path));
    }
    let malformed = |path: &Path, message: String| Error::MalformedDataset {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let file: MetaFile = serde_json::from_str(&text).map_err(|e| malformed(&meta_path, e.to_string()))?;
    let meta = file.meta();
    if meta.channels == 0 || meta.height == 0 || meta.width == 0 || meta.classes == 0 {
        return Err(malformed(&meta_path, "dimensions must be positive".into()));
    }
    if meta.classes > 256 {
        return Err(malformed(&meta_path, "labels are stored as one byte".into()));
    }
    if let Some(exp) = expected {
        let got = DatasetShape {
            classes: meta.classes,
            channels: meta.channels,
            height: meta.height,
            width: meta.width,
        };
        if got != exp {
            return Err(malformed(&meta_path, format!("expected {exp:?}, found {got:?}")));
        }
    }

    let rec = meta.record_len();
    let pix = meta.pixels_per_image();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for shard in list_shards(dir)? {
        let bytes = fs::read(&shard).map_err(|e| Error::io(&shard, e))?;
        if bytes.len() % rec != 0 {
            return Err(malformed(
                &shard,
                format!(
                    "size {} is not a multiple of the record size {rec}; truncated record at byte offset {}",
                    bytes.len(),
                    bytes.len() - bytes.len() % rec
                ),
            ));
        }
        for record in bytes.chunks_exact(rec) {
            let label = record[0] as usize;
            if label >= meta.classes {
                return Err(Error::LabelOutOfRange {
                    path: shard.clone(),
                    record: labels.len(),
                    label,
                    classes: meta.classes,
                });
            }
            labels.push(label);
            data.extend(record[1..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::NoRecords);
    }
    if labels.len() != file.count {
        return Err(malformed(
            &meta_path,
            format!(
                "meta.json count {} but shards hold {} records",
                file.count,
                labels.len()
            ),
        ));
    }
    debug_assert_eq!(data.len(), labels.len() * pix);
    let images = Tensor::new(vec![labels.len(), meta.channels, meta.height, meta.width], data);
    LabeledDataset::new(images, labels, meta)
}

/// Quantizes a pixel in `[0, 1]` to the stored byte.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `ds` in the on-disk layout, creating `dir` if needed.
pub fn write_image_dataset(ds: &LabeledDataset, dir: &Path, records_per_shard: usize) -> Result<()> {
    if records_per_shard == 0 {
        return Err(Error::InvalidConfig("records_per_shard must be at least 1".into()));
    }
    if ds.meta.classes > 256 {
        return Err(Error::InvalidConfig("labels are stored as one byte".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for stale in list_shards(dir)? {
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    let meta = MetaFile::new(&ds.meta, ds.len());
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for (s, chunk) in indices.chunks(records_per_shard).enumerate() {
        let path = dir.join(shard_name(s));
        let mut buf = Vec::with_capacity(chunk.len() * ds.meta.record_len());
        for &i in chunk {
            buf.push(ds.labels[i] as u8);
            buf.extend(ds.images.row(i).iter().map(|&v| quantize(v)));
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub per_class: usize,
    /// Seed of the class templates. Train and test splits must share it.
    #[serde(default)]
    pub template_seed: u64,
    /// Per-pixel Gaussian noise added to every image.
    #[serde(default = "default_pixel_noise")]
    pub pixel_noise: f32,
    /// Template contrast is drawn uniformly from this range.
    #[serde(default = "default_contrast")]
    pub contrast: (f32, f32),
    /// Maximum template shift in pixels along each axis.
    #[serde(default = "default_jitter")]
    pub jitter: f32,
}

fn default_channels() -> usize {
    3
}
fn default_pixel_noise() -> f32 {
    0.02
}
// Low-contrast templates leave class margins within a few 8-bit steps, so an
// undefended classifier is as brittle under l_inf 8/255 as on natural images.
fn default_contrast() -> (f32, f32) {
    (0.10, 0.12)
}
fn default_jitter() -> f32 {
    2.0
}

impl SyntheticSpec {
    pub fn new(classes: usize, height: usize, width: usize, per_class: usize) -> Self {
        Self {
            classes,
            channels: default_channels(),
            height,
            width,
            per_class,
            template_seed: 0,
            pixel_noise: default_pixel_noise(),
            contrast: default_contrast(),
            jitter: default_jitter(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic dataset: {m}")));
        if self.classes < 2 {
            return bad("at least two classes are required");
        }
        if self.classes > 256 {
            return bad("at most 256 classes are supported");
        }
        if self.height != self.width || self.height < 8 {
            return bad("images must be square with side at least 8");
        }
        if self.per_class < 1 {
            return bad("per_class must be at least 1");
        }
        if self.channels < 1 {
            return bad("channels must be at least 1");
        }
        if !(self.pixel_noise >= 0.0) || !(self.contrast.0 > 0.0 && self.contrast.1 >= self.contrast.0) {
            return bad("noise must be non-negative and contrast a positive range");
        }
        Ok(())
    }
}

/// A smooth class template: two coloured Gaussian blobs plus an oriented,
/// coloured grating. Evaluated analytically so it can be shifted by
/// sub-pixel amounts.
struct Template {
    blobs: Vec<([f32; 2], f32, Vec<f32>)>,
    freq: f32,
    angle: f32,
    phase: f32,
    grating_color: Vec<f32>,
}

impl Template {
    fn sample(rng: &mut SeededRng, channels: usize, side: usize) -> Self {
        let s = side as f32;
        let color = |rng: &mut SeededRng| -> Vec<f32> { (0..channels).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
        let blobs = (0..2)
            .map(|_| {
                let center = [rng.gen_range(0.25 * s..0.75 * s), rng.gen_range(0.25 * s..0.75 * s)];
                let radius = rng.gen_range(0.12 * s..0.25 * s);
                (center, radius, color(rng))
            })
            .collect();
        Self {
            blobs,
            freq: rng.gen_range(1.5f32..4.0),
            angle: rng.gen_range(0.0f32..std::f32::consts::PI),
            phase: rng.gen_range(0.0f32..std::f32::consts::TAU),
            grating_color: color(rng),
        }
    }

    fn eval(&self, ch: usize, y: f32, x: f32, side: usize) -> f32 {
        let mut v = 0.0;
        for (c, r, col) in &self.blobs {
            let d2 = (y - c[0]).powi(2) + (x - c[1]).powi(2);
            v += col[ch] * (-d2 / (2.0 * r * r)).exp();
        }
        let t = (x * self.angle.cos() + y * self.angle.sin()) / side as f32;
        v + 0.5 * self.grating_color[ch] * (std::f32::consts::TAU * self.freq * t + self.phase).sin()
    }
}

/// Class-conditioned synthetic images: each class owns a smooth template
/// (fixed by `spec.template_seed`); every sample places it with random
/// shift, contrast and background, adds pixel noise, and quantizes to 8 bits.
/// Records are interleaved by class and the result depends only on
/// `(rng seed, spec)`.
pub fn make_synthetic_dataset(rng: &mut SeededRng, spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let side = spec.height;
    let mut trng = SeededRng::new(spec.template_seed).derive("synthetic-templates");
    let templates: Vec<Template> = (0..spec.classes)
        .map(|_| Template::sample(&mut trng, spec.channels, side))
        .collect();
    let noise = Normal::new(0.0f32, spec.pixel_noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let n = spec.classes * spec.per_class;
    let pix = spec.channels * side * side;
    let mut data = Vec::with_capacity(n * pix);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.per_class {
        for (class, tpl) in templates.iter().enumerate() {
            let dy = rng.gen_range(-spec.jitter..=spec.jitter);
            let dx = rng.gen_range(-spec.jitter..=spec.jitter);
            let contrast = rng.gen_range(spec.contrast.0..=spec.contrast.1);
            let base = rng.gen_range(0.35f32..0.65);
            let tint: Vec<f32> = (0..spec.channels).map(|_| rng.gen_range(-0.08f32..0.08)).collect();
            for ch in 0..spec.channels {
                for i in 0..side {
                    for j in 0..side {
                        let t = tpl.eval(ch, i as f32 - dy, j as f32 - dx, side);
                        let v = base + tint[ch] + contrast * t + noise.sample(rng);
                        data.push(f32::from(quantize(v)) / 255.0);
                    }
                }
            }
            labels.push(class);
        }
    }
    let meta = DatasetMeta {
        name: format!("synthetic-{}c-{}px", spec.classes, side),
        classes: spec.classes,
        channels: spec.channels,
        height: side,
        width: side,
        split: "train".into(),
    };
    LabeledDataset::new(Tensor::new(vec![n, spec.channels, side, side], data), labels, meta)
}

/// `n` distinct rows drawn uniformly without replacement.
pub fn sample_eval_subset(ds: &LabeledDataset, n: usize, rng: &mut SeededRng) -> Result<LabeledDataset> {
    if n > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot sample {n} records from a dataset of {}",
            ds.len()
        )));
    }
    let idx = sample(rng, ds.len(), n).into_vec();
    Ok(ds.subset(&idx))
}

/// One epoch of batches. Every record appears exactly once; the last batch
/// may be short.
pub fn batches<'a>(
    ds: &'a LabeledDataset,
    batch_size: usize,
    rng: &mut SeededRng,
    shuffle: bool,
) -> Result<Batches<'a>> {
    if batch_size < 1 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

pub struct Batches<'a> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.ds.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }
}

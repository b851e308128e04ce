//! Datasets: an in-memory image container, loaders for the standard
//! CIFAR-style binary records, a raw on-disk format for generated data,
//! and a synthetic oriented-gradient generator for self-contained runs.
//!
//! Images are stored as raw bytes and converted to floats in `[0, 1]`
//! (division by 255) only when a batch is assembled; no mean/std
//! normalization is applied anywhere. Labels are class indices.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, GaussianSource, ROLE_SYNTH};
use crate::tensor::Scalar;

/// An in-memory labeled image set with uniform geometry.
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    classes: usize,
    channels: usize,
    image_size: usize,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("records", &self.len())
            .field("classes", &self.classes)
            .field("channels", &self.channels)
            .field("image_size", &self.image_size)
            .finish()
    }
}

impl Dataset {
    /// Builds a dataset from raw planar image bytes (`records * channels *
    /// size * size`, channel-major per record) and one label per record.
    pub fn from_parts(
        images: Vec<u8>,
        labels: Vec<u8>,
        classes: usize,
        channels: usize,
        image_size: usize,
    ) -> Result<Self> {
        if classes < 2 || classes > 256 {
            return Err(Error::Config(format!("class count {classes} is outside 2..=256")));
        }
        if channels == 0 || image_size == 0 {
            return Err(Error::Config("images need at least one channel and one pixel".into()));
        }
        let record = channels * image_size * image_size;
        if images.len() != labels.len() * record {
            return Err(Error::Data(format!(
                "{} labels require {} image bytes, got {}",
                labels.len(),
                labels.len() * record,
                images.len()
            )));
        }
        if let Some((i, &bad)) =
            labels.iter().enumerate().find(|(_, &l)| usize::from(l) >= classes)
        {
            return Err(Error::Data(format!(
                "label {bad} at record {i} out of range for {classes} classes"
            )));
        }
        Ok(Dataset { images, labels, classes, channels, image_size })
    }

    /// Number of records.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// True when there are no records.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of classes labels may take.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Channels per image.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Height and width of every (square) image.
    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Label of record `i`.
    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    /// Raw bytes of record `i`.
    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let record = self.channels * self.image_size * self.image_size;
        &self.images[i * record..(i + 1) * record]
    }

    /// Records per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.classes];
        for &l in &self.labels {
            hist[usize::from(l)] += 1;
        }
        hist
    }

    /// Assembles the pixel buffer and label list for the given records.
    /// Pixels are scaled to `[0, 1]`; the buffer is laid out
    /// `(record, channel, y, x)` and sized for a tensor of shape
    /// `(indices.len(), channels, image_size, image_size)`.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Result<(Vec<S>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("batch needs at least one record".into()));
        }
        let record = self.channels * self.image_size * self.image_size;
        let mut pixels = Vec::with_capacity(indices.len() * record);
        let mut labels = Vec::with_capacity(indices.len());
        let scale = S::from_f64(1.0 / 255.0);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidInput(format!(
                    "record index {i} out of range for {} records",
                    self.len()
                )));
            }
            pixels.extend(self.image_bytes(i).iter().map(|&b| S::from_usize(usize::from(b)) * scale));
            labels.push(self.label(i));
        }
        Ok((pixels, labels))
    }

    /// The first `n` records as their own dataset (handy for reduced runs).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidInput(format!(
                "cannot take {n} records from a set of {}",
                self.len()
            )));
        }
        let record = self.channels * self.image_size * self.image_size;
        Dataset::from_parts(
            self.images[..n * record].to_vec(),
            self.labels[..n].to_vec(),
            self.classes,
            self.channels,
            self.image_size,
        )
    }
}

/// Which CIFAR-style record layout to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// One label byte, ten classes, files `data_batch_1..5.bin` and
    /// `test_batch.bin`.
    Ten,
    /// Coarse and fine label bytes (the fine one is used), one hundred
    /// classes, files `train.bin` and `test.bin`.
    Hundred,
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Parses one CIFAR-style binary file, appending to `images`/`labels`.
fn parse_cifar_file(
    path: &Path,
    variant: CifarVariant,
    images: &mut Vec<u8>,
    labels: &mut Vec<u8>,
) -> Result<usize> {
    let bytes = read_file(path)?;
    let (record_len, label_offset) = match variant {
        CifarVariant::Ten => (1 + CIFAR_PIXELS, 0),
        CifarVariant::Hundred => (2 + CIFAR_PIXELS, 1),
    };
    if bytes.is_empty() || bytes.len() % record_len != 0 {
        return Err(Error::Data(format!(
            "{} is {} bytes, not a whole number of {record_len}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let classes: usize = match variant {
        CifarVariant::Ten => 10,
        CifarVariant::Hundred => 100,
    };
    for (rec, chunk) in bytes.chunks_exact(record_len).enumerate() {
        if variant == CifarVariant::Hundred && usize::from(chunk[0]) >= 20 {
            return Err(Error::Data(format!(
                "coarse label {} at record {rec} of {} (byte offset {}) is out of range",
                chunk[0],
                path.display(),
                rec * record_len
            )));
        }
        let label = chunk[label_offset];
        if usize::from(label) >= classes {
            return Err(Error::Data(format!(
                "label {label} at record {rec} of {} (byte offset {}) is out of range for {classes} classes",
                path.display(),
                rec * record_len + label_offset
            )));
        }
        labels.push(label);
        images.extend_from_slice(&chunk[label_offset + 1..]);
    }
    Ok(bytes.len() / record_len)
}

/// Loads the train or test split of a CIFAR-style directory, validating
/// the canonical record counts (50,000 train / 10,000 test).
pub fn load_cifar(dir: &Path, variant: CifarVariant, train: bool) -> Result<Dataset> {
    let files: Vec<std::path::PathBuf> = match (variant, train) {
        (CifarVariant::Ten, true) => {
            (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
        }
        (CifarVariant::Ten, false) => vec![dir.join("test_batch.bin")],
        (CifarVariant::Hundred, true) => vec![dir.join("train.bin")],
        (CifarVariant::Hundred, false) => vec![dir.join("test.bin")],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut total = 0;
    for f in &files {
        total += parse_cifar_file(f, variant, &mut images, &mut labels)?;
    }
    let expect = if train { 50_000 } else { 10_000 };
    if total != expect {
        return Err(Error::Data(format!(
            "expected {expect} records in the {} split, found {total}",
            if train { "train" } else { "test" }
        )));
    }
    let classes = match variant {
        CifarVariant::Ten => 10,
        CifarVariant::Hundred => 100,
    };
    Dataset::from_parts(images, labels, classes, 3, 32)
}

/// Parameters of the synthetic oriented-gradient dataset.
///
/// Class `c` is a linear brightness ramp across the image in direction
/// `2*pi*c / classes`, perturbed by Gaussian pixel noise. The classes are
/// linearly separable from flattened pixels at the default noise level,
/// which makes the sets suitable for smoke-testing a full training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Number of classes (directions).
    pub classes: usize,
    /// Training records generated per class.
    pub train_per_class: usize,
    /// Test records generated per class.
    pub test_per_class: usize,
    /// Height and width of the square images.
    pub image_size: usize,
    /// Channels per image (every channel carries the same ramp).
    pub channels: usize,
    /// Standard deviation of the additive pixel noise (in `[0, 1]` pixel
    /// units).
    pub noise: f64,
    /// Seed for the generator stream.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 2,
            train_per_class: 64,
            test_per_class: 32,
            image_size: 32,
            channels: 3,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Checks the numeric ranges.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::Config(format!("synth classes {} outside 2..=256", self.classes)));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("synth needs at least one training record per class".into()));
        }
        if self.test_per_class == 0 {
            return Err(Error::Config("synth needs at least one test record per class".into()));
        }
        if self.image_size < 2 {
            return Err(Error::Config("synth images must be at least 2x2".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("synth images need at least one channel".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("synth noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// A generated train/test pair.
pub struct SynthData {
    /// Training split, `classes * train_per_class` records.
    pub train: Dataset,
    /// Test split, `classes * test_per_class` records.
    pub test: Dataset,
}

/// Generates the synthetic dataset described by `spec`, deterministically
/// in `spec.seed`. Records interleave classes (record `i` has label
/// `i % classes`), so any prefix is class-balanced.
pub fn generate_synth(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let train = synth_split(spec, spec.train_per_class, 0)?;
    let test = synth_split(spec, spec.test_per_class, 1)?;
    Ok(SynthData { train, test })
}

fn synth_split(spec: &SynthSpec, per_class: usize, split_index: u64) -> Result<Dataset> {
    let size = spec.image_size;
    let count = spec.classes * per_class;
    let record = spec.channels * size * size;
    let mut images = Vec::with_capacity(count * record);
    let mut labels = Vec::with_capacity(count);
    let mut noise = GaussianSource::new(crate::rng::stream_seed(spec.seed, ROLE_SYNTH, split_index));
    let amplitude = 0.35;
    for _sample in 0..per_class {
        for class in 0..spec.classes {
            let angle = 2.0 * std::f64::consts::PI * class as f64 / spec.classes as f64;
            let (dir_x, dir_y) = (angle.cos(), angle.sin());
            labels.push(class as u8);
            for _ch in 0..spec.channels {
                for y in 0..size {
                    let v = 2.0 * y as f64 / (size - 1) as f64 - 1.0;
                    for x in 0..size {
                        let u = 2.0 * x as f64 / (size - 1) as f64 - 1.0;
                        let mut value = 0.5 + amplitude * (u * dir_x + v * dir_y);
                        if spec.noise > 0.0 {
                            value += spec.noise * noise.next();
                        }
                        images.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
        }
    }
    Dataset::from_parts(images, labels, spec.classes, spec.channels, size)
}

/// File names of the raw on-disk format produced by [`write_raw`].
const RAW_META: &str = "meta.txt";
const RAW_TRAIN: &str = "train.bin";
const RAW_TEST: &str = "test.bin";

/// Writes a train/test pair to `dir` in a simple raw format: CIFAR-style
/// records (label byte then planar pixels) plus a `meta.txt` describing
/// the geometry. Existing files are overwritten.
pub fn write_raw(data: &SynthData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let meta = format!(
        "channels = {}\nclasses = {}\nimage_size = {}\ntest_records = {}\ntrain_records = {}\n",
        data.train.channels(),
        data.train.classes(),
        data.train.image_size(),
        data.test.len(),
        data.train.len(),
    );
    write_atomic(&dir.join(RAW_META), meta.as_bytes())?;
    for (name, set) in [(RAW_TRAIN, &data.train), (RAW_TEST, &data.test)] {
        let record = set.channels() * set.image_size() * set.image_size();
        let mut bytes = Vec::with_capacity(set.len() * (record + 1));
        for i in 0..set.len() {
            bytes.push(set.label(i) as u8);
            bytes.extend_from_slice(set.image_bytes(i));
        }
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}

/// True when `dir` holds the raw format written by [`write_raw`].
pub fn is_raw_dir(dir: &Path) -> bool {
    dir.join(RAW_META).is_file()
}

/// Loads a raw directory produced by [`write_raw`].
pub fn load_raw(dir: &Path) -> Result<SynthData> {
    let meta_path = dir.join(RAW_META);
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(format!("reading {}", meta_path.display()), e))?;
    let mut channels = None;
    let mut classes = None;
    let mut image_size = None;
    let mut train_records = None;
    let mut test_records = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected `key = value`", meta_path.display(), ln + 1))
        })?;
        let value: usize = value.trim().parse().map_err(|_| {
            Error::Data(format!("{}:{}: `{}` is not a count", meta_path.display(), ln + 1, value.trim()))
        })?;
        match key.trim() {
            "channels" => channels = Some(value),
            "classes" => classes = Some(value),
            "image_size" => image_size = Some(value),
            "train_records" => train_records = Some(value),
            "test_records" => test_records = Some(value),
            other => {
                return Err(Error::Data(format!(
                    "{}:{}: unknown key `{other}`",
                    meta_path.display(),
                    ln + 1
                )))
            }
        }
    }
    let missing = |what: &str| Error::Data(format!("{} lacks `{what}`", meta_path.display()));
    let channels = channels.ok_or_else(|| missing("channels"))?;
    let classes = classes.ok_or_else(|| missing("classes"))?;
    let image_size = image_size.ok_or_else(|| missing("image_size"))?;
    let train_records = train_records.ok_or_else(|| missing("train_records"))?;
    let test_records = test_records.ok_or_else(|| missing("test_records"))?;

    let record = channels * image_size * image_size;
    let mut sets = Vec::new();
    for (name, expect) in [(RAW_TRAIN, train_records), (RAW_TEST, test_records)] {
        let path = dir.join(name);
        let bytes = read_file(&path)?;
        if bytes.len() != expect * (record + 1) {
            return Err(Error::Data(format!(
                "{} is {} bytes, expected {} records of {} bytes",
                path.display(),
                bytes.len(),
                expect,
                record + 1
            )));
        }
        let mut images = Vec::with_capacity(expect * record);
        let mut labels = Vec::with_capacity(expect);
        for chunk in bytes.chunks_exact(record + 1) {
            labels.push(chunk[0]);
            images.extend_from_slice(&chunk[1..]);
        }
        sets.push(Dataset::from_parts(images, labels, classes, channels, image_size)?);
    }
    let test = sets.pop().expect("two sets");
    let train = sets.pop().expect("two sets");
    Ok(SynthData { train, test })
}

/// Writes `bytes` to `path` through a temporary file and rename, so a
/// crash never leaves a half-written artifact behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::io(format!("renaming {} into place", tmp.display()), e))
}

/// Picks a class-balanced pseudo-random subset of record indices (used by
/// reduced training runs that should still see every class).
pub fn balanced_indices(data: &Dataset, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count > data.len() {
        return Err(Error::InvalidInput(format!(
            "cannot sample {count} records from {}",
            data.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes()];
    for i in 0..data.len() {
        by_class[data.label(i)].push(i);
    }
    let mut rng = stream_rng(seed, ROLE_SYNTH, 17);
    // Within each class, records are taken in a shuffled order.
    for class_records in &mut by_class {
        for i in (1..class_records.len()).rev() {
            let j = rng.gen_range(0..=i);
            class_records.swap(i, j);
        }
    }
    // Round-robin over classes. This always terminates: once every class
    // is exhausted the picks cover the whole set, and `count <= len`.
    let mut picked = Vec::with_capacity(count);
    let mut cursor = vec![0usize; data.classes()];
    let mut class = 0;
    while picked.len() < count {
        let records = &by_class[class];
        let at = &mut cursor[class];
        if *at < records.len() {
            picked.push(records[*at]);
            *at += 1;
        }
        class = (class + 1) % data.classes();
    }
    Ok(picked)
}

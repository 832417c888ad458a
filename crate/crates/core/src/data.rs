//! Datasets: the CIFAR binary layout, seeded synthetic image sets,
//! per-channel standardization and train-time augmentation.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Environment variable naming the directory that holds the CIFAR folders.
pub const DATA_DIR_ENV: &str = "REWINDLAB_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

/// Images stored as interleaved `N x H x W x C` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<usize>,
    shape: [usize; 3],
    class_count: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<usize>,
        shape: [usize; 3],
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || class_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "dataset needs a non-empty image shape and classes, got {shape:?} / {class_count}"
            )));
        }
        if images.len() != labels.len() * per {
            return Err(Error::InvalidArgument(format!(
                "{} image bytes for {} labels of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {l} of example {i} is not below class count {class_count}"
            )));
        }
        Ok(Self {
            images,
            labels,
            shape,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]`.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// The first `n` examples by index (all of them if `n >= len`).
    pub fn first(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            shape: self.shape,
            class_count: self.class_count,
            split: self.split,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Label bytes ahead of each image: CIFAR-100 stores coarse then fine.
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    fn folder(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }

    fn files(self, split: Split) -> Vec<String> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => {
                (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
            }
            (CifarVariant::Cifar10, Split::Validation) => vec!["test_batch.bin".into()],
            (CifarVariant::Cifar100, Split::Train) => vec!["train.bin".into()],
            (CifarVariant::Cifar100, Split::Validation) => vec!["test.bin".into()],
        }
    }

    /// Example count of a full split.
    pub fn split_len(self, split: Split) -> usize {
        match split {
            Split::Train => 50_000,
            Split::Validation => 10_000,
        }
    }
}

/// Record geometry of a CIFAR-style binary file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CifarLayout {
    pub variant: CifarVariant,
    /// `[H, W, C]`.
    pub shape: [usize; 3],
}

impl CifarLayout {
    pub fn standard(variant: CifarVariant) -> Self {
        Self {
            variant,
            shape: [32, 32, 3],
        }
    }

    pub fn record_len(&self) -> usize {
        self.variant.label_bytes() + self.shape.iter().product::<usize>()
    }
}

/// Parses records of `layout` from `bytes`, converting channel-planar
/// pixels to interleaved `H x W x C`.
pub fn parse_cifar(bytes: &[u8], layout: CifarLayout, split: Split, path: &Path) -> Result<Dataset> {
    let record = layout.record_len();
    let format_err = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if !bytes.len().is_multiple_of(record) {
        let whole = bytes.len() / record;
        return Err(format_err(
            whole * record,
            format!(
                "truncated record {whole}: {} of {record} bytes present",
                bytes.len() % record
            ),
        ));
    }
    let [h, w, c] = layout.shape;
    let plane = h * w;
    let label_bytes = layout.variant.label_bytes();
    let classes = layout.variant.classes();
    let n = bytes.len() / record;
    let mut images = vec![0u8; n * plane * c];
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        // CIFAR-100 keeps the fine label in the second byte.
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(format_err(
                i * record + label_bytes - 1,
                format!("label {label} out of range for {classes} classes"),
            ));
        }
        labels.push(label);
        let pixels = &rec[label_bytes..];
        let out = &mut images[i * plane * c..(i + 1) * plane * c];
        for ch in 0..c {
            for p in 0..plane {
                out[p * c + ch] = pixels[ch * plane + p];
            }
        }
    }
    Dataset::new(images, labels, layout.shape, classes, split)
}

/// Inverse of [`parse_cifar`]. CIFAR-100 coarse labels are written as 0.
pub fn encode_cifar(dataset: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if dataset.class_count() > variant.classes() {
        return Err(Error::InvalidArgument(format!(
            "{} classes do not fit the {variant:?} layout",
            dataset.class_count()
        )));
    }
    let [h, w, c] = dataset.shape();
    let plane = h * w;
    let layout = CifarLayout {
        variant,
        shape: dataset.shape(),
    };
    let mut buf = Vec::with_capacity(dataset.len() * layout.record_len());
    for i in 0..dataset.len() {
        if variant == CifarVariant::Cifar100 {
            buf.push(0);
        }
        buf.push(dataset.labels()[i] as u8);
        let img = dataset.image(i);
        for ch in 0..c {
            buf.extend((0..plane).map(|p| img[p * c + ch]));
        }
    }
    Ok(buf)
}

pub fn write_cifar(path: &Path, dataset: &Dataset, variant: CifarVariant) -> Result<()> {
    binio::atomic_write(path, &encode_cifar(dataset, variant)?)
}

pub fn read_cifar_file(path: &Path, layout: CifarLayout, split: Split) -> Result<Dataset> {
    parse_cifar(&binio::read_file(path)?, layout, split, path)
}

/// Resolves the dataset root: an explicit directory wins, then
/// `REWINDLAB_DATA_DIR`, then `./data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads a full CIFAR split from `root` (either the extracted folder or
/// its parent) and checks the record count.
pub fn load_cifar(root: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let nested = root.join(variant.folder());
    let dir = if nested.is_dir() { nested } else { root.to_path_buf() };
    let layout = CifarLayout::standard(variant);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in variant.files(split) {
        let path = dir.join(file);
        let part = read_cifar_file(&path, layout, split)?;
        images.extend_from_slice(part.images());
        labels.extend_from_slice(part.labels());
    }
    let expected = variant.split_len(split);
    if labels.len() != expected {
        return Err(Error::Format {
            path: dir,
            offset: (labels.len() * layout.record_len()) as u64,
            message: format!("{split} split has {} records, expected {expected}", labels.len()),
        });
    }
    Dataset::new(images, labels, layout.shape, variant.classes(), split)
}

/// Parameters of the seeded synthetic image task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train: usize,
    pub validation: usize,
    pub image_size: usize,
    /// Standard deviation of per-pixel noise, in prototype units.
    pub noise: f64,
    /// Largest weight of the distractor prototype mixed into each image.
    pub distractor: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train: 8000,
            validation: 2000,
            image_size: 16,
            noise: 1.4,
            distractor: 0.8,
            seed: 17,
        }
    }
}

/// Class prototypes are sums of coloured sinusoidal gratings plus a
/// coloured blob. Each example scales its prototype, shifts it cyclically
/// by up to two pixels, blends in a random other class and adds noise.
pub fn synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.classes > 256 || spec.image_size < 5 {
        return Err(Error::InvalidArgument(format!(
            "synthetic set needs 1..=256 classes and images of at least 5 pixels, got {} / {}",
            spec.classes, spec.image_size
        )));
    }
    let s = spec.image_size;
    let c = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.classes).map(|_| prototype(s, c, &mut rng)).collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("synthetic noise: {e}")))?;
    let mut make = |n: usize, split: Split| -> Result<Dataset> {
        let mut images = Vec::with_capacity(n * s * s * c);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % spec.classes;
            let other = (label + rng.random_range(1..spec.classes.max(2))) % spec.classes;
            let amp = rng.random_range(0.7..1.3);
            let mix = rng.random_range(0.0..spec.distractor.max(f64::MIN_POSITIVE));
            let dy = rng.random_range(0..5) + s - 2;
            let dx = rng.random_range(0..5) + s - 2;
            for y in 0..s {
                for x in 0..s {
                    let src = (((y + dy) % s) * s + (x + dx) % s) * c;
                    for ch in 0..c {
                        let v = amp * prototypes[label][src + ch]
                            + mix * prototypes[other][src + ch]
                            + noise.sample(&mut rng);
                        images.push((128.0 + 48.0 * v).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            labels.push(label);
        }
        Dataset::new(images, labels, [s, s, c], spec.classes, split)
    };
    let train = make(spec.train, Split::Train)?;
    let validation = make(spec.validation, Split::Validation)?;
    Ok((train, validation))
}

fn prototype(s: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p = vec![0.0; s * s * c];
    let tau = std::f64::consts::TAU;
    for _ in 0..3 {
        let fy = rng.random_range(0..3) as f64;
        let fx = rng.random_range(if fy == 0.0 { 1 } else { 0 }..3) as f64;
        let phase = rng.random_range(0.0..tau);
        let colour: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        for y in 0..s {
            for x in 0..s {
                let v = (tau * (fy * y as f64 + fx * x as f64) / s as f64 + phase).cos();
                for ch in 0..c {
                    p[(y * s + x) * c + ch] += 0.5 * v * colour[ch];
                }
            }
        }
    }
    let (by, bx) = (rng.random_range(0.0..s as f64), rng.random_range(0.0..s as f64));
    let radius = s as f64 / 5.0;
    let colour: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    for y in 0..s {
        for x in 0..s {
            let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
            let v = (-d2 / (2.0 * radius * radius)).exp();
            for ch in 0..c {
                p[(y * s + x) * c + ch] += v * colour[ch];
            }
        }
    }
    p
}

/// Per-channel mean and population standard deviation over every pixel.
pub fn standardize_stats(dataset: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = dataset.shape()[2];
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("statistics of an empty dataset".into()));
    }
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for px in dataset.images().chunks_exact(c) {
        for (ch, &v) in px.iter().enumerate() {
            let v = f64::from(v);
            sum[ch] += v;
            sq[ch] += v * v;
        }
    }
    let n = (dataset.images().len() / c) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let var = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0);
        if var == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "channel {ch} has zero standard deviation"
            )));
        }
        std.push(var.sqrt());
    }
    Ok((mean, std))
}

/// Standardize, random horizontal flip, reflection pad and random crop
/// back to the input size. Validation images are only standardized.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPipeline {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub pad: usize,
    pub flip_probability: f64,
}

impl AugmentPipeline {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        Self {
            mean,
            std,
            pad: 4,
            flip_probability: 0.5,
        }
    }

    pub fn from_dataset(train: &Dataset) -> Result<Self> {
        let (mean, std) = standardize_stats(train)?;
        Ok(Self::new(mean, std))
    }

    pub fn standardize(&self, image: &[u8], out: &mut [f32]) {
        let c = self.mean.len();
        for (i, (&v, o)) in image.iter().zip(out.iter_mut()).enumerate() {
            let ch = i % c;
            *o = ((f64::from(v) - self.mean[ch]) / self.std[ch]) as f32;
        }
    }

    /// Deterministic core of [`augment`](Self::augment): `(top, left)` is
    /// the crop origin inside the padded image, so `(pad, pad)` is centred.
    pub fn augment_with(
        &self,
        image: &[u8],
        shape: [usize; 3],
        flip: bool,
        top: usize,
        left: usize,
        out: &mut [f32],
    ) {
        let [h, w, c] = shape;
        let pad = self.pad as isize;
        for y in 0..h {
            let sy = reflect(y as isize + top as isize - pad, h);
            for x in 0..w {
                let mut sx = reflect(x as isize + left as isize - pad, w);
                if flip {
                    sx = w - 1 - sx;
                }
                for ch in 0..c {
                    let v = f64::from(image[(sy * w + sx) * c + ch]);
                    out[(y * w + x) * c + ch] = ((v - self.mean[ch]) / self.std[ch]) as f32;
                }
            }
        }
    }

    pub fn augment(&self, image: &[u8], shape: [usize; 3], rng: &mut impl Rng, out: &mut [f32]) {
        let flip = rng.random_bool(self.flip_probability);
        let top = rng.random_range(0..=2 * self.pad);
        let left = rng.random_range(0..=2 * self.pad);
        self.augment_with(image, shape, flip, top, left, out);
    }
}

/// Mirror index into `0..n` without repeating the edge pixel.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// A mini-batch: images `[B, H, W, C]` and class indices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Endless stream of training batches. Each epoch is a seeded
/// Fisher-Yates shuffle; an epoch's tail shorter than a batch is dropped.
pub struct BatchStream<'d> {
    data: &'d Dataset,
    pipeline: &'d AugmentPipeline,
    augment: bool,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'d> BatchStream<'d> {
    pub fn new(
        data: &'d Dataset,
        pipeline: &'d AugmentPipeline,
        augment: bool,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 || batch_size > data.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} must lie in 1..={}",
                data.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            data,
            pipeline,
            augment,
            batch_size,
            order,
            cursor: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let shape = self.data.shape();
        let per = self.data.image_len();
        let mut x = vec![0.0f32; self.batch_size * per];
        let mut labels = Vec::with_capacity(self.batch_size);
        for (slot, &i) in self.order[self.cursor..self.cursor + self.batch_size]
            .iter()
            .enumerate()
        {
            let out = &mut x[slot * per..(slot + 1) * per];
            if self.augment {
                self.pipeline.augment(self.data.image(i), shape, &mut self.rng, out);
            } else {
                self.pipeline.standardize(self.data.image(i), out);
            }
            labels.push(self.data.labels()[i]);
        }
        self.cursor += self.batch_size;
        let [h, w, c] = shape;
        Batch {
            images: Tensor::new(vec![self.batch_size, h, w, c], x).expect("batch shape"),
            labels,
        }
    }
}

/// Standardized examples `start..end` in index order.
pub fn eval_batch(data: &Dataset, pipeline: &AugmentPipeline, start: usize, end: usize) -> Batch {
    let per = data.image_len();
    let mut x = vec![0.0f32; (end - start) * per];
    for (slot, i) in (start..end).enumerate() {
        pipeline.standardize(data.image(i), &mut x[slot * per..(slot + 1) * per]);
    }
    let [h, w, c] = data.shape();
    Batch {
        images: Tensor::new(vec![end - start, h, w, c], x).expect("batch shape"),
        labels: data.labels()[start..end].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(images: Vec<u8>, labels: Vec<usize>, shape: [usize; 3]) -> Dataset {
        Dataset::new(images, labels, shape, 10, Split::Train).unwrap()
    }

    #[test]
    fn two_pixel_channel_stats() {
        let d = tiny(vec![0, 2], vec![0, 1], [1, 1, 1]);
        let (m, s) = standardize_stats(&d).unwrap();
        assert_eq!((m[0], s[0]), (1.0, 1.0));
    }

    #[test]
    fn zero_std_is_an_error() {
        let d = tiny(vec![0; 6], vec![0, 1], [1, 1, 3]);
        assert!(standardize_stats(&d).is_err());
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-4..9).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![4, 3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn identity_path_is_standardization() {
        let img: Vec<u8> = (0..5 * 6 * 3).map(|v| (v * 7 % 256) as u8).collect();
        let p = AugmentPipeline::new(vec![10.0, 20.0, 30.0], vec![2.0, 4.0, 8.0]);
        let mut a = vec![0.0; img.len()];
        let mut b = vec![0.0; img.len()];
        p.augment_with(&img, [5, 6, 3], false, 4, 4, &mut a);
        p.standardize(&img, &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img: Vec<u8> = (0..4 * 4 * 2).map(|v| v as u8).collect();
        let p = AugmentPipeline::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let mut once = vec![0.0; img.len()];
        p.augment_with(&img, [4, 4, 2], true, 4, 4, &mut once);
        let flipped: Vec<u8> = once.iter().map(|&v| v as u8).collect();
        let mut twice = vec![0.0; img.len()];
        p.augment_with(&flipped, [4, 4, 2], true, 4, 4, &mut twice);
        let back: Vec<u8> = twice.iter().map(|&v| v as u8).collect();
        assert_eq!(back, img);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let layout = CifarLayout {
            variant: CifarVariant::Cifar10,
            shape: [2, 2, 3],
        };
        let bytes = vec![1u8; layout.record_len() * 2 + 5];
        let err = parse_cifar(&bytes, layout, Split::Train, Path::new("x.bin")).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 26),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let spec = SyntheticSpec {
            train: 50,
            validation: 20,
            ..Default::default()
        };
        let (a, va) = synthetic(&spec).unwrap();
        let (b, _) = synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(va.len(), 20);
        assert_eq!(a.labels()[..10], (0..10).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn batches_cycle_through_epochs() {
        let d = tiny((0..6).map(|v| v * 40).collect(), (0..6).collect(), [1, 1, 1]);
        let p = AugmentPipeline::new(vec![0.0], vec![1.0]);
        let mut s = BatchStream::new(&d, &p, false, 4, 3).unwrap();
        let first = s.next_batch();
        let second = s.next_batch();
        assert_eq!(first.labels.len(), 4);
        let mut seen = first.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        assert_eq!(second.images.shape(), &[4, 1, 1, 1]);
        for (x, &l) in first.images.data().iter().zip(&first.labels) {
            assert_eq!(*x, (l * 40) as f32);
        }
    }
}

//! Dataset ingestion: MNIST (IDX) and CIFAR-10 (binary batches), held in
//! memory as bytes, normalized per channel when batches are assembled.

pub mod cifar;
pub mod idx;

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable consulted when no dataset root is given.
pub const ROOT_ENV: &str = "SDBNN_DATA";
pub const DEFAULT_ROOT: &str = "/root/data";

/// SHA-256 of the uncompressed MNIST files.
pub const MNIST_DIGESTS: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    ("train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    ("t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    ("t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// Image shape as [C, H, W].
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    pub fn classes(self) -> usize {
        10
    }

    /// Directory below the dataset root.
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            _ => Err(Error::Config(format!("unknown dataset {s:?} (expected mnist or cifar10)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Resolves the dataset root: explicit value, then [`ROOT_ENV`], then the default.
pub fn resolve_root(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub split: Split,
    /// Verify raw files before parsing them.
    pub verify: bool,
}

impl DatasetSource {
    pub fn new(kind: DatasetKind, root: impl Into<PathBuf>, split: Split) -> Self {
        DatasetSource { kind, root: root.into(), split, verify: true }
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(self.kind.dir_name())
    }

    /// Raw files making up the split, in load order.
    pub fn files(&self) -> Vec<PathBuf> {
        let dir = self.dir();
        match (self.kind, self.split) {
            (DatasetKind::Mnist, Split::Train) => {
                vec![dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")]
            }
            (DatasetKind::Mnist, Split::Test) => {
                vec![dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte")]
            }
            (DatasetKind::Cifar10, Split::Train) => cifar::TRAIN_FILES.iter().map(|f| dir.join(f)).collect(),
            (DatasetKind::Cifar10, Split::Test) => vec![dir.join(cifar::TEST_FILE)],
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Known-digest check for MNIST; CIFAR-10 batches have no published
/// per-file digests, so they are checked for their exact record count.
fn verify(kind: DatasetKind, path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    match kind {
        DatasetKind::Mnist => {
            let expected = MNIST_DIGESTS
                .iter()
                .find(|(f, _)| *f == name)
                .map(|(_, d)| *d)
                .ok_or_else(|| Error::Format(format!("no known digest for {name}")))?;
            let found = sha256_hex(bytes);
            if found != expected {
                return Err(Error::Checksum { file: path.display().to_string(), expected: expected.into(), found });
            }
        }
        DatasetKind::Cifar10 => {
            let expected = cifar::RECORDS_PER_BATCH * cifar::RECORD_BYTES;
            if bytes.len() != expected {
                return Err(Error::Checksum {
                    file: path.display().to_string(),
                    expected: format!("{expected} bytes"),
                    found: format!("{} bytes", bytes.len()),
                });
            }
        }
    }
    Ok(())
}

/// An in-memory split. Pixels are stored as raw bytes in [N, C, H, W] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub split: Split,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn from_raw(kind: DatasetKind, split: Split, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let per = kind.image_shape().iter().product::<usize>();
        if pixels.len() != labels.len() * per {
            return Err(Error::shape(format!("{} labels but {} pixel bytes", labels.len(), pixels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= kind.classes()) {
            return Err(Error::Label { label: l as usize, classes: kind.classes() });
        }
        Ok(Dataset { kind, split, pixels, labels })
    }

    pub fn load(src: &DatasetSource) -> Result<Self> {
        let files = src.files();
        let mut blobs = Vec::with_capacity(files.len());
        for f in &files {
            let bytes = read(f)?;
            if src.verify {
                verify(src.kind, f, &bytes)?;
            }
            blobs.push(bytes);
        }
        match src.kind {
            DatasetKind::Mnist => {
                let images = idx::parse_images(&blobs[0])?;
                let labels = idx::parse_labels(&blobs[1])?;
                if (images.rows, images.cols) != (28, 28) || images.count != labels.len() {
                    return Err(Error::Format(format!(
                        "mnist: {} images of {}x{} with {} labels",
                        images.count,
                        images.rows,
                        images.cols,
                        labels.len()
                    )));
                }
                Dataset::from_raw(src.kind, src.split, images.pixels, labels)
            }
            DatasetKind::Cifar10 => {
                let (mut pixels, mut labels) = (Vec::new(), Vec::new());
                for b in &blobs {
                    let (l, p) = cifar::parse_batch(b)?;
                    labels.extend(l);
                    pixels.extend(p);
                }
                Dataset::from_raw(src.kind, src.split, pixels, labels)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.kind.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.kind.classes()];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// First `n` items, for quick runs.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            kind: self.kind,
            split: self.split,
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Re-serializes the split into its raw file format, one blob per file
    /// of [`DatasetSource::files`].
    pub fn to_raw_files(&self) -> Result<Vec<Vec<u8>>> {
        match self.kind {
            DatasetKind::Mnist => {
                let images = idx::IdxImages { count: self.len(), rows: 28, cols: 28, pixels: self.pixels.clone() };
                Ok(vec![idx::write_images(&images), idx::write_labels(&self.labels)])
            }
            DatasetKind::Cifar10 => {
                let per = cifar::RECORDS_PER_BATCH;
                let chunks = self.len().div_ceil(per).max(1);
                (0..chunks)
                    .map(|k| {
                        let (a, b) = (k * per, ((k + 1) * per).min(self.len()));
                        cifar::write_batch(&self.labels[a..b], &self.pixels[a * cifar::PIXELS..b * cifar::PIXELS])
                    })
                    .collect()
            }
        }
    }

    /// Copies the selected items into a raw batch.
    pub fn gather(&self, indices: &[usize]) -> RawBatch {
        let [c, h, w] = self.kind.image_shape();
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        RawBatch {
            shape: [indices.len(), c, h, w],
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Per-channel mean and standard deviation on the [0, 1] pixel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn compute(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::shape("normalization of an empty dataset"));
        }
        let [c, h, w] = data.kind.image_shape();
        let plane = h * w;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for (i, &p) in data.pixels.iter().enumerate() {
            let v = p as f64 / 255.0;
            let ch = (i / plane) % c;
            sum[ch] += v;
            sq[ch] += v * v;
        }
        let n = (data.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n - m * m).max(0.0)).sqrt().max(1e-6) as f32).collect();
        Ok(Normalization { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Comma-separated text for the run config.
    pub fn to_strings(&self) -> (String, String) {
        let join = |v: &[f32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        (join(&self.mean), join(&self.std))
    }

    pub fn parse(mean: &str, std: &str) -> Result<Self> {
        let split = |s: &str| -> Result<Vec<f32>> {
            s.split(',')
                .map(|t| t.trim().parse::<f32>().map_err(|_| Error::Config(format!("bad normalization value {t:?}"))))
                .collect()
        };
        let n = Normalization { mean: split(mean)?, std: split(std)? };
        if n.mean.len() != n.std.len() || n.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("normalization needs matching mean/std lists with std > 0".into()));
        }
        Ok(n)
    }

    pub fn apply(&self, raw: &RawBatch) -> Result<Tensor<f32>> {
        let [_, c, h, w] = raw.shape;
        if c != self.channels() {
            return Err(Error::shape(format!("{c}-channel batch with {}-channel normalization", self.channels())));
        }
        let plane = h * w;
        let scale: Vec<f32> = self.std.iter().map(|s| 1.0 / (255.0 * s)).collect();
        let offset: Vec<f32> = self.mean.iter().zip(&self.std).map(|(m, s)| m / s).collect();
        let data = raw
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ch = (i / plane) % c;
                p as f32 * scale[ch] - offset[ch]
            })
            .collect();
        Tensor::new(raw.shape.to_vec(), data)
    }
}

/// Un-normalized batch of bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawBatch {
    pub shape: [usize; 4],
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    /// Zero padding before a random crop back to the original size.
    pub crop_pad: usize,
    pub flip: bool,
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig { crop_pad: 0, flip: false };

    /// Pad-4 crop and horizontal flip for CIFAR-10, nothing for MNIST.
    pub fn standard(kind: DatasetKind) -> Self {
        match kind {
            DatasetKind::Mnist => Self::NONE,
            DatasetKind::Cifar10 => AugmentConfig { crop_pad: 4, flip: true },
        }
    }

    pub fn is_identity(&self) -> bool {
        self.crop_pad == 0 && !self.flip
    }
}

/// Random crop and flip, deterministic in `seed`.
pub fn augment(batch: &RawBatch, cfg: AugmentConfig, seed: u64) -> RawBatch {
    if cfg.is_identity() {
        return batch.clone();
    }
    let [n, c, h, w] = batch.shape;
    let pad = cfg.crop_pad as isize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u8; batch.pixels.len()];
    let per = c * h * w;
    for i in 0..n {
        let dy = rng.gen_range(-pad..=pad);
        let dx = rng.gen_range(-pad..=pad);
        let flip = cfg.flip && rng.gen::<bool>();
        let src = &batch.pixels[i * per..(i + 1) * per];
        let dst = &mut out[i * per..(i + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    RawBatch { shape: batch.shape, pixels: out, labels: batch.labels.clone() }
}

/// Seed for one (epoch, step) slot of a base seed, via an independent
/// ChaCha stream per epoch.
pub fn derive_seed(base: u64, epoch: usize, step: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(epoch as u64);
    rng.set_word_pos(2 * step as u128);
    rng.gen()
}

/// Index order for one epoch: shuffled when a seed is given, sequential
/// otherwise. The final short batch is kept.
pub fn batch_order(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub epoch: usize,
    pub step: usize,
}

/// How one epoch is cut into batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: Option<u64>,
    pub augment: AugmentConfig,
    pub augment_seed: u64,
    pub epoch: usize,
}

impl BatchPlan {
    /// Sequential, unaugmented batches for evaluation.
    pub fn eval(batch_size: usize) -> Self {
        BatchPlan { batch_size, shuffle_seed: None, augment: AugmentConfig::NONE, augment_seed: 0, epoch: 0 }
    }
}

/// Deterministic batch iterator over a dataset. The eval split is never
/// augmented regardless of the plan.
pub struct Batches<'a> {
    data: &'a Dataset,
    norm: &'a Normalization,
    plan: BatchPlan,
    order: std::vec::IntoIter<Vec<usize>>,
    step: usize,
}

pub fn batches<'a>(data: &'a Dataset, norm: &'a Normalization, plan: BatchPlan) -> Result<Batches<'a>> {
    if norm.channels() != data.kind.image_shape()[0] {
        return Err(Error::Config(format!("normalization has {} channels for {}", norm.channels(), data.kind)));
    }
    let order = batch_order(data.len(), plan.batch_size, plan.shuffle_seed)?;
    Ok(Batches { data, norm, plan, order: order.into_iter(), step: 0 })
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.order.next()?;
        let step = self.step;
        self.step += 1;
        let mut raw = self.data.gather(&idx);
        if self.data.split == Split::Train && !self.plan.augment.is_identity() {
            raw = augment(&raw, self.plan.augment, derive_seed(self.plan.augment_seed, self.plan.epoch, step));
        }
        Some(self.norm.apply(&raw).map(|images| Batch {
            images,
            labels: raw.labels.iter().map(|&l| l as usize).collect(),
            epoch: self.plan.epoch,
            step,
        }))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.order.size_hint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(kind: DatasetKind, n: usize) -> Dataset {
        let per = kind.image_shape().iter().product::<usize>();
        let pixels = (0..n * per).map(|i| (i * 7 % 256) as u8).collect();
        Dataset::from_raw(kind, Split::Train, pixels, (0..n).map(|i| (i % 10) as u8).collect()).unwrap()
    }

    #[test]
    fn batch_sizes_keep_the_short_tail() {
        let order = batch_order(10, 3, Some(4)).unwrap();
        assert_eq!(order.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = order.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(order, batch_order(10, 3, Some(4)).unwrap());
        assert_ne!(order, batch_order(10, 3, Some(5)).unwrap());
        assert_eq!(batch_order(4, 4, None).unwrap(), vec![vec![0, 1, 2, 3]]);
        assert!(batch_order(4, 0, None).is_err());
    }

    #[test]
    fn augmentation_is_seeded_and_shape_preserving() {
        let data = toy(DatasetKind::Cifar10, 4);
        let raw = data.gather(&[0, 1, 2, 3]);
        let cfg = AugmentConfig::standard(DatasetKind::Cifar10);
        let a = augment(&raw, cfg, 9);
        assert_eq!(a, augment(&raw, cfg, 9));
        assert_ne!(a, raw);
        assert_eq!(a.shape, raw.shape);
        assert_eq!(a.labels, raw.labels);
        assert_eq!(augment(&raw, AugmentConfig::NONE, 9), raw);
    }

    #[test]
    fn flip_only_mirrors_rows() {
        let raw = RawBatch { shape: [1, 1, 1, 3], pixels: vec![1, 2, 3], labels: vec![0] };
        let cfg = AugmentConfig { crop_pad: 0, flip: true };
        let outs: Vec<_> = (0..16).map(|s| augment(&raw, cfg, s).pixels).collect();
        assert!(outs.iter().all(|p| p == &[1, 2, 3] || p == &[3, 2, 1]));
        assert!(outs.contains(&vec![3, 2, 1]));
    }

    #[test]
    fn normalization_centres_the_training_split() {
        let data = toy(DatasetKind::Cifar10, 6);
        let norm = Normalization::compute(&data).unwrap();
        let x = norm.apply(&data.gather(&(0..6).collect::<Vec<_>>())).unwrap();
        let plane = 32 * 32;
        for ch in 0..3 {
            let vals: Vec<f64> =
                x.data().iter().enumerate().filter(|(i, _)| (i / plane) % 3 == ch).map(|(_, v)| *v as f64).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-3, "channel {ch}: mean {m} var {v}");
        }
        let (m, s) = norm.to_strings();
        assert_eq!(Normalization::parse(&m, &s).unwrap(), norm);
        assert!(Normalization::parse("0.1", "0").is_err());
    }

    #[test]
    fn eval_split_is_never_augmented() {
        let mut data = toy(DatasetKind::Cifar10, 5);
        data.split = Split::Test;
        let norm = Normalization::compute(&data).unwrap();
        let plan = BatchPlan { augment: AugmentConfig::standard(data.kind), augment_seed: 3, ..BatchPlan::eval(2) };
        let got: Vec<Batch> = batches(&data, &norm, plan).unwrap().collect::<Result<_>>().unwrap();
        let want: Vec<Batch> = batches(&data, &norm, BatchPlan::eval(2)).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(got, want);
        assert_eq!(got.iter().map(|b| b.labels.len()).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn epochs_are_reproducible() {
        let data = toy(DatasetKind::Cifar10, 7);
        let norm = Normalization::compute(&data).unwrap();
        let plan = BatchPlan {
            batch_size: 3,
            shuffle_seed: Some(1),
            augment: AugmentConfig::standard(data.kind),
            augment_seed: 2,
            epoch: 1,
        };
        let run = || batches(&data, &norm, plan).unwrap().collect::<Result<Vec<_>>>().unwrap();
        assert_eq!(run(), run());
        assert_ne!(derive_seed(2, 1, 0), derive_seed(2, 1, 1));
        assert_ne!(derive_seed(2, 0, 0), derive_seed(2, 1, 0));
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let err = Dataset::from_raw(DatasetKind::Mnist, Split::Train, vec![0; 784], vec![10]).unwrap_err();
        assert!(matches!(err, Error::Label { label: 10, .. }));
    }

    #[test]
    fn synthetic_mnist_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy(DatasetKind::Mnist, 5);
        let mut src = DatasetSource::new(DatasetKind::Mnist, dir.path(), Split::Train);
        fs::create_dir_all(src.dir()).unwrap();
        let blobs = data.to_raw_files().unwrap();
        for (f, b) in src.files().iter().zip(&blobs) {
            fs::write(f, b).unwrap();
        }
        assert!(matches!(Dataset::load(&src), Err(Error::Checksum { .. })));
        src.verify = false;
        let loaded = Dataset::load(&src).unwrap();
        assert_eq!(loaded, data);
        assert_eq!(loaded.to_raw_files().unwrap(), blobs);
    }

    #[test]
    fn missing_files_name_the_path() {
        let src = DatasetSource::new(DatasetKind::Cifar10, "/nonexistent-root", Split::Test);
        let msg = Dataset::load(&src).unwrap_err().to_string();
        assert!(msg.contains("test_batch.bin"), "{msg}");
    }

    #[test]
    fn cifar_structural_check() {
        let dir = tempfile::tempdir().unwrap();
        let src = DatasetSource::new(DatasetKind::Cifar10, dir.path(), Split::Test);
        fs::create_dir_all(src.dir()).unwrap();
        fs::write(&src.files()[0], cifar::write_batch(&[1], &[0; cifar::PIXELS]).unwrap()).unwrap();
        assert!(matches!(Dataset::load(&src), Err(Error::Checksum { .. })));
    }
}

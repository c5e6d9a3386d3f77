//! Dataset ingestion and batching.
//!
//! Three sources: IDX files (big-endian, magic-tagged), CIFAR-10 binary
//! batches (3073-byte records, channel-planar RGB), and a deterministic
//! synthetic generator for fast property runs. Loaders are pure functions of
//! file bytes. Pixels always land in [0, 1].

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    /// M×C×H×W, values in [0, 1].
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub train_range: Range<usize>,
    pub val_range: Range<usize>,
    pub test_range: Range<usize>,
    pub source: String,
}

impl<T: Scalar> Dataset<T> {
    fn validate(self) -> Result<Self> {
        let m = self.images.shape()[0];
        if self.labels.len() != m {
            return Err(Error::Validation(format!(
                "{} labels for {} images",
                self.labels.len(),
                m
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.class_count) {
            return Err(Error::Validation(format!(
                "label {} out of range for {} classes",
                bad, self.class_count
            )));
        }
        if !self
            .images
            .values()
            .iter()
            .all(|v| *v >= T::ZERO && *v <= T::ONE)
        {
            return Err(Error::Validation("pixel values outside [0, 1]".into()));
        }
        let ranges = [&self.train_range, &self.val_range, &self.test_range];
        for r in ranges {
            if r.end > m || r.start > r.end {
                return Err(Error::Validation(format!("split range {r:?} exceeds {m} samples")));
            }
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train_range.clone(),
            Split::Val => self.val_range.clone(),
            Split::Test => self.test_range.clone(),
        }
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split_range(split).len()
    }

    /// Copies the samples at the given absolute indices into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let (c, h, w) = self.image_shape();
        let plane = c * h * w;
        let vals = self.images.values();
        let mut out = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            out.extend_from_slice(&vals[i * plane..(i + 1) * plane]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(vec![indices.len(), c, h, w], out).expect("gather shape"),
            labels,
        )
    }

    /// Minibatch iterator over a split. With a shuffle seed, indices go
    /// through a seeded Fisher–Yates permutation; the final short batch is
    /// emitted either way.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> BatchIter<'_, T> {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        let mut indices: Vec<usize> = self.split_range(split).collect();
        if let Some(seed) = shuffle_seed {
            Rng::new(seed).shuffle(&mut indices);
        }
        BatchIter {
            dataset: self,
            indices,
            batch_size,
            cursor: 0,
        }
    }
}

pub struct BatchIter<'a, T: Scalar> {
    dataset: &'a Dataset<T>,
    indices: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a, T: Scalar> Iterator for BatchIter<'a, T> {
    type Item = (Tensor<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.indices.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.indices.len());
        let batch = self.dataset.gather(&self.indices[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

// ---------------------------------------------------------------------------
// IDX loader (the Fashion-MNIST distribution format)
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(bytes)
}

fn read_u32_be(bytes: &[u8], off: usize, origin: &str) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(origin, "truncated header"))
}

/// Loads an IDX image/label file pair. Pixel bytes scale linearly so that
/// 0 → 0.0 and 255 → 1.0. Train/val/test ranges: a seeded carve-out is the
/// harness's job, so here train covers everything and val/test are empty;
/// use [`with_standard_split`] to overlay ranges.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let img_origin = images_path.display().to_string();
    let lbl_origin = labels_path.display().to_string();
    let img_bytes = read_file(images_path)?;
    let lbl_bytes = read_file(labels_path)?;

    if read_u32_be(&img_bytes, 0, &img_origin)? != IDX_IMAGES_MAGIC {
        return Err(Error::format(&img_origin, "bad IDX image magic (expected 0x00000803)"));
    }
    if read_u32_be(&lbl_bytes, 0, &lbl_origin)? != IDX_LABELS_MAGIC {
        return Err(Error::format(&lbl_origin, "bad IDX label magic (expected 0x00000801)"));
    }
    let count = read_u32_be(&img_bytes, 4, &img_origin)? as usize;
    let h = read_u32_be(&img_bytes, 8, &img_origin)? as usize;
    let w = read_u32_be(&img_bytes, 12, &img_origin)? as usize;
    let lbl_count = read_u32_be(&lbl_bytes, 4, &lbl_origin)? as usize;
    if count != lbl_count {
        return Err(Error::format(
            &img_origin,
            format!("{count} images but {lbl_count} labels"),
        ));
    }
    let pixel_bytes = img_bytes
        .get(16..)
        .filter(|rest| rest.len() == count * h * w)
        .ok_or_else(|| {
            Error::format(
                &img_origin,
                format!(
                    "expected {} pixel bytes, found {}",
                    count * h * w,
                    img_bytes.len().saturating_sub(16)
                ),
            )
        })?;
    let label_bytes = lbl_bytes
        .get(8..)
        .filter(|rest| rest.len() == count)
        .ok_or_else(|| Error::format(&lbl_origin, "label payload length mismatch"))?;

    let scale = T::from_f64(1.0 / 255.0);
    let values: Vec<T> = pixel_bytes
        .iter()
        .map(|&b| T::from_f64(b as f64) * scale)
        .collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;

    Dataset {
        images: Tensor::from_vec(vec![count, 1, h, w], values)?,
        labels,
        class_count,
        train_range: 0..count,
        val_range: 0..0,
        test_range: 0..0,
        source: format!("idx://{img_origin}"),
    }
    .validate()
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary loader: records of 1 label byte + 3072 channel-planar
// RGB pixel bytes.
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073;
const CIFAR_CLASSES: usize = 10;

pub fn load_cifar_bin<T: Scalar>(paths: &[&Path]) -> Result<Dataset<T>> {
    let mut values: Vec<T> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let scale = T::from_f64(1.0 / 255.0);
    let mut source = String::from("cifar://");
    for (i, path) in paths.iter().enumerate() {
        let origin = path.display().to_string();
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                &origin,
                format!("file size {} is not a multiple of {}", bytes.len(), CIFAR_RECORD),
            ));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::Validation(format!(
                    "label byte {} out of range in {}",
                    record[0], origin
                )));
            }
            labels.push(label);
            values.extend(record[1..].iter().map(|&b| T::from_f64(b as f64) * scale));
        }
        if i > 0 {
            source.push(',');
        }
        source.push_str(&origin);
    }
    let count = labels.len();
    Dataset {
        images: Tensor::from_vec(vec![count, 3, 32, 32], values)?,
        labels,
        class_count: CIFAR_CLASSES,
        train_range: 0..count,
        val_range: 0..0,
        test_range: 0..0,
        source,
    }
    .validate()
}

/// Overlays the standard file-based split: this dataset is all-train with a
/// seeded 10% validation carve-out (taken from the end after a seeded
/// shuffle would be destructive, so the carve-out is the final 10% of a
/// seeded permutation materialized into a reordered dataset).
pub fn with_standard_split<T: Scalar>(mut train: Dataset<T>, seed: u64) -> Dataset<T> {
    let m = train.len();
    let mut order: Vec<usize> = (0..m).collect();
    Rng::derive(seed, 0x5114).shuffle(&mut order);
    let (images, labels) = train.gather(&order);
    let val = m / 10;
    train.images = images;
    train.labels = labels;
    train.train_range = 0..m - val;
    train.val_range = m - val..m;
    train.test_range = 0..0;
    train
}

// ---------------------------------------------------------------------------
// Nearest-neighbor resize
// ---------------------------------------------------------------------------

/// Nearest-neighbor resampling: output pixel (y, x) reads input pixel
/// (floor(y·H/H′), floor(x·W/W′)).
pub fn resize_nn<T: Scalar>(images: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("resize_nn", format!("expected N×C×H×W, got {s:?}")));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::Validation("resize target must be at least 1×1".into()));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (target_h, target_w) {
        return Ok(images.clone());
    }
    let vals = images.values();
    let mut out = Vec::with_capacity(n * c * target_h * target_w);
    for plane in 0..n * c {
        let src = &vals[plane * h * w..(plane + 1) * h * w];
        for y in 0..target_h {
            let sy = y * h / target_h;
            for x in 0..target_w {
                let sx = x * w / target_w;
                out.push(src[sy * w + sx]);
            }
        }
    }
    Tensor::from_vec(vec![n, c, target_h, target_w], out)
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

/// Template contrast above the background. Low enough that an 8/255 ℓ∞
/// perturbation corrupts the class evidence, high enough that the
/// desk-scale classifier separates classes cleanly.
pub const SYNTH_AMPLITUDE: f64 = 0.11;
pub const SYNTH_BACKGROUND: f64 = 0.42;
pub const SYNTH_NOISE_AMPLITUDE: f64 = 0.1;

/// Appearance knobs of the synthetic templates.
#[derive(Debug, Clone, Copy)]
pub struct SynthStyle {
    pub noise: f64,
    pub amplitude: f64,
    pub background: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        SynthStyle {
            noise: SYNTH_NOISE_AMPLITUDE,
            amplitude: SYNTH_AMPLITUDE,
            background: SYNTH_BACKGROUND,
        }
    }
}

/// Per-split sample counts for the synthetic task.
#[derive(Debug, Clone, Copy)]
pub struct SynthSplit {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl SynthSplit {
    /// The 80/10/10 default split of `samples_per_class`.
    pub fn ratio(samples_per_class: usize) -> Self {
        let train = samples_per_class * 8 / 10;
        let val = samples_per_class / 10;
        SynthSplit {
            train_per_class: train,
            val_per_class: val,
            test_per_class: samples_per_class - train - val,
        }
    }
}

/// Deterministic class template on [0,1]: even classes are soft oriented
/// bars through the center, odd classes are soft blobs on a ring. Both are
/// polynomial in pixel coordinates, so the dataset is bit-reproducible.
fn template_value(
    class: usize,
    n_classes: usize,
    h: usize,
    w: usize,
    y: usize,
    x: usize,
    style: &SynthStyle,
) -> f64 {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let py = y as f64 - cy;
    let px = x as f64 - cx;
    let bars = n_classes.div_ceil(2);
    let mask = if class.is_multiple_of(2) {
        // oriented bar: distance from the line through the center at angle θ
        let idx = class / 2;
        let theta = std::f64::consts::PI * idx as f64 / bars as f64;
        let (sin, cos) = theta.sin_cos();
        let dist = (px * sin - py * cos).abs();
        let half_width = 1.6;
        (1.0 - (dist / half_width) * (dist / half_width)).max(0.0)
    } else {
        // blob on a ring around the center
        let blobs = n_classes / 2;
        let idx = class / 2;
        let phi = 2.0 * std::f64::consts::PI * idx as f64 / blobs as f64;
        let r = 0.30 * (h.min(w) as f64);
        let (sy, sx) = (cy + r * phi.sin(), cx + r * phi.cos());
        let d2 = (y as f64 - sy) * (y as f64 - sy) + (x as f64 - sx) * (x as f64 - sx);
        let radius = 3.0;
        (1.0 - d2 / (radius * radius)).max(0.0)
    };
    style.background + style.amplitude * mask
}

/// Seed-deterministic synthetic dataset: per class, a structured template
/// plus uniform noise of the stated amplitude, clamped to [0, 1]. Samples
/// are laid out split-by-split, class-interleaved.
pub fn synth_dataset_with_split<T: Scalar>(
    seed: u64,
    split: SynthSplit,
    n_classes: usize,
    shape: (usize, usize, usize),
    style: SynthStyle,
) -> Result<Dataset<T>> {
    if n_classes < 2 {
        return Err(Error::Validation("synthetic dataset needs at least 2 classes".into()));
    }
    let (c, h, w) = shape;
    if c != 1 {
        return Err(Error::Validation("synthetic templates are single-channel".into()));
    }
    let per_split = [
        split.train_per_class,
        split.val_per_class,
        split.test_per_class,
    ];
    let total: usize = per_split.iter().sum::<usize>() * n_classes;
    let mut values = Vec::with_capacity(total * h * w);
    let mut labels = Vec::with_capacity(total);

    let mut boundaries = [0usize; 4];
    let mut cursor = 0usize;
    for (si, &per_class) in per_split.iter().enumerate() {
        boundaries[si] = cursor;
        for rep in 0..per_class {
            for class in 0..n_classes {
                // stream per (split, rep, class) so counts don't shift other samples
                let label = (si as u64) << 40 | (rep as u64) << 16 | class as u64;
                let mut rng = Rng::derive(seed, label);
                for y in 0..h {
                    for x in 0..w {
                        let base = template_value(class, n_classes, h, w, y, x, &style);
                        let noisy = base + rng.uniform(-style.noise, style.noise);
                        values.push(T::from_f64(noisy.clamp(0.0, 1.0)));
                    }
                }
                labels.push(class);
                cursor += 1;
            }
        }
    }
    boundaries[3] = cursor;

    Dataset {
        images: Tensor::from_vec(vec![total, c, h, w], values)?,
        labels,
        class_count: n_classes,
        train_range: boundaries[0]..boundaries[1],
        val_range: boundaries[1]..boundaries[2],
        test_range: boundaries[2]..boundaries[3],
        source: format!("synth://seed={seed},n={n_classes},shape={c}x{h}x{w}"),
    }
    .validate()
}

/// The ratio-split convenience form: 80/10/10 of `samples_per_class`.
pub fn synth_dataset<T: Scalar>(
    seed: u64,
    samples_per_class: usize,
    n_classes: usize,
    shape: (usize, usize, usize),
) -> Result<Dataset<T>> {
    synth_dataset_with_split(
        seed,
        SynthSplit::ratio(samples_per_class),
        n_classes,
        shape,
        SynthStyle::default(),
    )
}

/// Parses a dataset reference of the form
/// `synth://seed=S,n=N,per_class=P[,train=A,val=B,test=C][,noise=F]`,
/// `idx://<images>,<labels>` or `cifar://<file>[,<file>…]`.
/// Relative paths resolve against `data_dir` when given.
pub fn load_ref<T: Scalar>(reference: &str, data_dir: Option<&Path>) -> Result<Dataset<T>> {
    if let Some(spec) = reference.strip_prefix("synth://") {
        let mut seed = 7u64;
        let mut n = 10usize;
        let mut per_class = 100usize;
        let mut explicit: (Option<usize>, Option<usize>, Option<usize>) = (None, None, None);
        let mut style = SynthStyle::default();
        for part in spec.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed synth parameter {part:?}")))?;
            let bad = |k: &str| Error::Config(format!("invalid synth value for {k}"));
            match k {
                "seed" => seed = v.parse().map_err(|_| bad(k))?,
                "n" => n = v.parse().map_err(|_| bad(k))?,
                "per_class" => per_class = v.parse().map_err(|_| bad(k))?,
                "train" => explicit.0 = Some(v.parse().map_err(|_| bad(k))?),
                "val" => explicit.1 = Some(v.parse().map_err(|_| bad(k))?),
                "test" => explicit.2 = Some(v.parse().map_err(|_| bad(k))?),
                "noise" => style.noise = v.parse().map_err(|_| bad(k))?,
                "amp" => style.amplitude = v.parse().map_err(|_| bad(k))?,
                "bg" => style.background = v.parse().map_err(|_| bad(k))?,
                other => return Err(Error::Config(format!("unknown synth parameter {other:?}"))),
            }
        }
        let split = match explicit {
            (None, None, None) => SynthSplit::ratio(per_class),
            (t, v, s) => SynthSplit {
                train_per_class: t.unwrap_or(0),
                val_per_class: v.unwrap_or(0),
                test_per_class: s.unwrap_or(0),
            },
        };
        return synth_dataset_with_split(seed, split, n, (1, 16, 16), style);
    }

    let resolve = |raw: &str| -> std::path::PathBuf {
        let p = Path::new(raw);
        match (p.is_relative(), data_dir) {
            (true, Some(dir)) => dir.join(p),
            _ => p.to_path_buf(),
        }
    };

    if let Some(spec) = reference.strip_prefix("idx://") {
        let (images, labels) = spec.split_once(',').ok_or_else(|| {
            Error::Config("idx:// reference needs <images_path>,<labels_path>".into())
        })?;
        return load_idx(&resolve(images), &resolve(labels));
    }
    if let Some(spec) = reference.strip_prefix("cifar://") {
        let paths: Vec<std::path::PathBuf> = spec.split(',').map(resolve).collect();
        let borrowed: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
        return load_cifar_bin(&borrowed);
    }
    Err(Error::Config(format!(
        "unrecognized dataset reference {reference:?} (expected synth://, idx:// or cifar://)"
    )))
}

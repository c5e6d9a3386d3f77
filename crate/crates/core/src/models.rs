//! The target classifier and its persistence.
//!
//! The classifier is a miniature residual network: a 3×3 stem, three
//! residual stages at 16→32→64 channels with stride-2 transitions between
//! them, global average pooling, and a dense head. No batch normalization —
//! He-style uniform init plus ReLU keeps train and inference behavior
//! identical, so attack gradients are unambiguous. The head is
//! zero-initialized: an untrained classifier emits all-zero logits, which
//! makes the ln(n) starting loss exact.
//!
//! Pixels are expected in [0, 1]; no input normalization layer exists, so
//! attack budgets operate directly in pixel units.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ConvLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvLayer<T> {
    /// He-style uniform init: U(−b, b) with b = sqrt(6 / fan_in). Uniform
    /// rather than normal so initialization needs no transcendentals beyond
    /// sqrt and stays bit-reproducible.
    pub fn he(rng: &mut Rng, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        ConvLayer {
            weight: Tensor::rand_uniform(rng, vec![cout, cin, k, k], -bound, bound),
            bias: Tensor::zeros(vec![cout]),
            stride,
            padding,
        }
    }

    pub fn zeros(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros(vec![cout, cin, k, k]),
            bias: Tensor::zeros(vec![cout]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let w = tape.leaf(&self.weight, train);
        let b = tape.leaf(&self.bias, train);
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<T>)>,
    ) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn he(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        DenseLayer {
            weight: Tensor::rand_uniform(rng, vec![fan_in, fan_out], -bound, bound),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        DenseLayer {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let w = tape.leaf(&self.weight, train);
        let b = tape.leaf(&self.bias, train);
        tape.dense(x, w, b)
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<T>)>,
    ) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct ResidualStage<T: Scalar> {
    /// Stride-2 channel-widening conv; absent for the first stage.
    pub transition: Option<ConvLayer<T>>,
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
}

#[derive(Debug, Clone)]
pub struct Classifier<T: Scalar> {
    pub stem: ConvLayer<T>,
    pub stages: Vec<ResidualStage<T>>,
    pub head: DenseLayer<T>,
    pub num_classes: usize,
    /// C×H×W of a single input image.
    pub input_shape: (usize, usize, usize),
    pub widths: Vec<usize>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(
        rng: &mut Rng,
        input_shape: (usize, usize, usize),
        widths: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("classifier needs at least one stage width".into()));
        }
        let (c_in, _, _) = input_shape;
        let stem = ConvLayer::he(rng, c_in, widths[0], 3, 1, 1);
        let mut stages = Vec::with_capacity(widths.len());
        let mut prev = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let transition = if i == 0 {
                None
            } else {
                Some(ConvLayer::he(rng, prev, w, 3, 2, 1))
            };
            stages.push(ResidualStage {
                transition,
                conv1: ConvLayer::he(rng, w, w, 3, 1, 1),
                conv2: ConvLayer::he(rng, w, w, 3, 1, 1),
            });
            prev = w;
        }
        // Zero head: all-zero logits before training.
        let head = DenseLayer::zeros(prev, num_classes);
        Ok(Classifier {
            stem,
            stages,
            head,
            num_classes,
            input_shape,
            widths: widths.to_vec(),
        })
    }

    /// Desk-scale default: widths 16→32→64 on the given input geometry.
    pub fn desk_scale(rng: &mut Rng, input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        Classifier::new(rng, input_shape, &[16, 32, 64], num_classes).expect("static config")
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::shape(
                "classifier_forward",
                format!("input {:?} does not match expected N×{}×{}×{}", shape, c, h, w),
            ));
        }
        Ok(())
    }

    /// Records the forward pass onto the tape and returns the logits var.
    /// With `train` set, parameters are registered as gradient-bearing
    /// leaves; otherwise only gradients w.r.t. the input can flow.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let mut feat = self.stem.forward(tape, x, train)?;
        feat = tape.relu(feat);
        for stage in &self.stages {
            if let Some(tr) = &stage.transition {
                feat = tr.forward(tape, feat, train)?;
                feat = tape.relu(feat);
            }
            let mut r = stage.conv1.forward(tape, feat, train)?;
            r = tape.relu(r);
            r = stage.conv2.forward(tape, r, train)?;
            let sum = tape.add(feat, r)?;
            feat = tape.relu(sum);
        }
        let pooled = tape.global_avg_pool(feat)?;
        self.head.forward(tape, pooled, train)
    }

    /// Plain inference: logits for a batch, no gradient bookkeeping kept.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, xv, false)?;
        Ok(tape.tensor(out))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(argmax_rows(&logits))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.stem.collect("stem", &mut out);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(tr) = &stage.transition {
                tr.collect(&format!("stage{i}.transition"), &mut out);
            }
            stage.conv1.collect(&format!("stage{i}.conv1"), &mut out);
            stage.conv2.collect(&format!("stage{i}.conv2"), &mut out);
        }
        self.head.collect("head", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.stem.collect_mut("stem", &mut out);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            if let Some(tr) = &mut stage.transition {
                tr.collect_mut(&format!("stage{i}.transition"), &mut out);
            }
            stage.conv1.collect_mut(&format!("stage{i}.conv1"), &mut out);
            stage.conv2.collect_mut(&format!("stage{i}.conv2"), &mut out);
        }
        self.head.collect_mut("head", &mut out);
        out
    }

    /// FNV-1a over all parameter bit patterns, for frozen-model guards.
    pub fn params_checksum(&self) -> u64 {
        params_checksum(&self.named_params())
    }

    pub fn descriptor(&self) -> String {
        let (c, h, w) = self.input_shape;
        format!(
            "miniresnet-v1;in={}x{}x{};classes={};widths={}",
            c,
            h,
            w,
            self.num_classes,
            self.widths
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_meta(path, &CheckpointMeta::default())
    }

    pub fn save_with_meta(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let descriptor = format!("{}{}", self.descriptor(), meta.suffix());
        write_checkpoint(path, &descriptor, &self.named_params())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (descriptor, params) = read_checkpoint::<T>(path)?;
        let origin = path.display().to_string();
        let fields = parse_descriptor(&descriptor, &origin, "miniresnet-v1")?;
        let (c, h, w) = fields.shape3("in", &origin)?;
        let classes = fields.usize_field("classes", &origin)?;
        let widths = fields.usize_list("widths", &origin)?;
        let mut rng = Rng::new(0);
        let mut model = Classifier::new(&mut rng, (c, h, w), &widths, classes)?;
        fill_params(&mut model.named_params_mut(), params, &origin)?;
        Ok((model, fields.meta()))
    }
}

/// FNV-1a over parameter bit patterns in declaration order.
pub fn params_checksum<T: Scalar>(params: &[(String, &Tensor<T>)]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for (_, t) in params {
        for v in t.values() {
            for byte in v.to_bits_u64().to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
    }
    hash
}

/// Row-wise argmax of an N×K tensor; ties resolve to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "argmax_rows expects N×K");
    let (n, k) = (shape[0], shape[1]);
    let vals = logits.values();
    (0..n)
        .map(|row| {
            let r = &vals[row * k..(row + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "GSCK", version u32, length-prefixed UTF-8
// architecture descriptor, parameter count u32, then per parameter
// (name length u32, name bytes, tensor blob). Shared by classifier and
// restoration-network checkpoints, which differ only in their descriptor.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Training provenance carried inside the descriptor string.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epochs: Option<u32>,
    pub final_accuracy: Option<f64>,
}

impl CheckpointMeta {
    pub(crate) fn suffix(&self) -> String {
        let mut s = String::new();
        if let Some(e) = self.epochs {
            s.push_str(&format!(";meta.epochs={e}"));
        }
        if let Some(a) = self.final_accuracy {
            s.push_str(&format!(";meta.final_acc={a}"));
        }
        s
    }
}

pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    descriptor: &str,
    params: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    let desc = descriptor.as_bytes();
    buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    buf.extend_from_slice(desc);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        tensor.write_blob(&mut buf);
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parameters as they appear in a checkpoint, in file order.
pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(String, NamedTensors<T>)> {
    let origin = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(origin.clone(), e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(origin.clone(), e))?;

    let need = |want: usize| -> Result<()> {
        if bytes.len() < want {
            Err(Error::format(
                &origin,
                format!("truncated checkpoint: need {} bytes, have {}", want, bytes.len()),
            ))
        } else {
            Ok(())
        }
    };

    need(12)?;
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(&origin, "bad checkpoint magic (expected GSCK)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(
            &origin,
            format!(
                "unsupported checkpoint version {} (expected {})",
                version, CHECKPOINT_FORMAT_VERSION
            ),
        ));
    }
    let desc_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    need(12 + desc_len + 4)?;
    let descriptor = String::from_utf8(bytes[12..12 + desc_len].to_vec())
        .map_err(|_| Error::format(&origin, "descriptor is not valid UTF-8"))?;
    let mut off = 12 + desc_len;
    let count = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    off += 4;

    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        need(off + 4)?;
        let name_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(off + name_len)?;
        let name = String::from_utf8(bytes[off..off + name_len].to_vec())
            .map_err(|_| Error::format(&origin, "parameter name is not valid UTF-8"))?;
        off += name_len;
        let (tensor, consumed) = Tensor::<T>::read_blob(&bytes[off..], &origin)?;
        off += consumed;
        params.push((name, tensor));
    }
    if off != bytes.len() {
        return Err(Error::format(
            &origin,
            format!("{} trailing bytes after last parameter", bytes.len() - off),
        ));
    }
    Ok((descriptor, params))
}

/// Moves loaded parameters into a freshly constructed model, by name,
/// validating shapes and completeness.
pub fn fill_params<T: Scalar>(
    slots: &mut [(String, &mut Tensor<T>)],
    loaded: NamedTensors<T>,
    origin: &str,
) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Tensor<T>> = loaded.into_iter().collect();
    for (name, slot) in slots.iter_mut() {
        let tensor = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::format(origin, format!("checkpoint is missing parameter {name}"))
        })?;
        if tensor.shape() != slot.shape() {
            return Err(Error::format(
                origin,
                format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                ),
            ));
        }
        **slot = tensor;
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::format(
            origin,
            format!("checkpoint has unexpected parameter {name}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Descriptor parsing shared by model kinds.
// ---------------------------------------------------------------------------

pub struct DescriptorFields {
    fields: std::collections::HashMap<String, String>,
}

impl DescriptorFields {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(|s| s.as_str())
    }

    pub fn usize_field(&self, key: &str, origin: &str) -> Result<usize> {
        self.get(key)
            .ok_or_else(|| Error::format(origin, format!("descriptor missing field {key}")))?
            .parse()
            .map_err(|_| Error::format(origin, format!("descriptor field {key} is not an integer")))
    }

    pub fn usize_list(&self, key: &str, origin: &str) -> Result<Vec<usize>> {
        self.get(key)
            .ok_or_else(|| Error::format(origin, format!("descriptor missing field {key}")))?
            .split(',')
            .map(|v| {
                v.parse().map_err(|_| {
                    Error::format(origin, format!("descriptor field {key} has non-integer entry"))
                })
            })
            .collect()
    }

    pub fn str_field(&self, key: &str, origin: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(origin, format!("descriptor missing field {key}")))
    }

    pub fn shape3(&self, key: &str, origin: &str) -> Result<(usize, usize, usize)> {
        let raw = self.str_field(key, origin)?;
        let parts: Vec<&str> = raw.split('x').collect();
        if parts.len() != 3 {
            return Err(Error::format(origin, format!("field {key} must be CxHxW")));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(origin, format!("field {key} has non-integer extent")))
        };
        Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            epochs: self.get("meta.epochs").and_then(|v| v.parse().ok()),
            final_accuracy: self.get("meta.final_acc").and_then(|v| v.parse().ok()),
        }
    }
}

/// Splits `tag;k=v;k=v` and checks the architecture tag.
pub fn parse_descriptor(descriptor: &str, origin: &str, expected_tag: &str) -> Result<DescriptorFields> {
    let mut parts = descriptor.split(';');
    let tag = parts.next().unwrap_or_default();
    if tag != expected_tag {
        return Err(Error::format(
            origin,
            format!("unknown architecture tag {tag:?} (expected {expected_tag:?})"),
        ));
    }
    let mut fields = std::collections::HashMap::new();
    for part in parts {
        if part.is_empty() {
            continue;
        }
        let (k, v) = part.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("malformed descriptor entry {part:?}"))
        })?;
        fields.insert(k.to_string(), v.to_string());
    }
    Ok(DescriptorFields { fields })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_classifier() -> Classifier<f32> {
        let mut rng = Rng::new(1234);
        Classifier::new(&mut rng, (1, 8, 8), &[4, 8], 5).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_softmax_and_ln_n_loss() {
        let model = tiny_classifier();
        let x = Tensor::rand_uniform(&mut Rng::new(8), vec![3, 1, 8, 8], 0.0, 1.0);
        let logits = model.logits(&x).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));

        let mut tape = Tape::new();
        let lv = tape.constant(&logits);
        let loss = tape.softmax_cross_entropy(lv, &[0, 1, 2]).unwrap();
        assert!((tape.scalar_value(loss) - (5.0f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn batch_size_does_not_change_logits() {
        let mut rng = Rng::new(77);
        let mut model = tiny_classifier();
        // randomize the head so logits are nontrivial
        model.head = DenseLayer::he(&mut rng, 8, 5);
        let x2 = Tensor::rand_uniform(&mut rng, vec![2, 1, 8, 8], 0.0, 1.0);
        let first = Tensor::from_vec(vec![1, 1, 8, 8], x2.values()[..64].to_vec()).unwrap();
        let l2 = model.logits(&x2).unwrap();
        let l1 = model.logits(&first).unwrap();
        for (a, b) in l1.values().iter().zip(&l2.values()[..5]) {
            assert!((a - b).abs() < 1e-6, "batch independence: {} vs {}", a, b);
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let model = tiny_classifier();
        let x = Tensor::<f32>::zeros(vec![1, 3, 8, 8]);
        assert!(model.logits(&x).is_err());
    }

    #[test]
    fn argmax_is_invariant_under_logit_shift() {
        let mut rng = Rng::new(5);
        let logits = Tensor::rand_uniform(&mut rng, vec![6, 4], -2.0, 2.0);
        let shifted = Tensor::from_vec(
            vec![6, 4],
            logits.values().iter().map(|v| v + 17.5f64).collect(),
        )
        .unwrap();
        assert_eq!(argmax_rows(&logits), argmax_rows(&shifted));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.gsck");
        let mut rng = Rng::new(42);
        let mut model = tiny_classifier();
        model.head = DenseLayer::he(&mut rng, 8, 5);
        model
            .save_with_meta(
                &path,
                &CheckpointMeta {
                    epochs: Some(3),
                    final_accuracy: Some(91.25),
                },
            )
            .unwrap();
        let (loaded, meta) = Classifier::<f32>::load(&path).unwrap();
        assert_eq!(meta.epochs, Some(3));
        assert_eq!(meta.final_accuracy, Some(91.25));
        for ((an, at), (bn, bt)) in model.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(an, bn);
            assert!(at.bitwise_eq(bt), "parameter {an} differs after roundtrip");
        }

        // logits reproduce exactly
        let x = Tensor::rand_uniform(&mut rng, vec![2, 1, 8, 8], 0.0, 1.0);
        let before = model.logits(&x).unwrap();
        let after = loaded.logits(&x).unwrap();
        assert!(before.bitwise_eq(&after));
    }

    #[test]
    fn truncated_checkpoint_is_an_error_not_a_crash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.gsck");
        tiny_classifier().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, bytes).unwrap();
        let err = Classifier::<f32>::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn unknown_architecture_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weird.gsck");
        let t = Tensor::<f32>::zeros(vec![2]);
        write_checkpoint(&path, "alexnet-v9;in=1x8x8", &[("w".to_string(), &t)]).unwrap();
        let err = Classifier::<f32>::load(&path).unwrap_err();
        assert!(err.to_string().contains("unknown architecture tag"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.gsck");
        tiny_classifier().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // bump version field
        std::fs::write(&path, bytes).unwrap();
        let err = Classifier::<f32>::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn repeated_evaluation_is_stable() {
        let mut rng = Rng::new(3);
        let mut model = tiny_classifier();
        model.head = DenseLayer::he(&mut rng, 8, 5);
        let x = Tensor::rand_uniform(&mut rng, vec![4, 1, 8, 8], 0.0, 1.0);
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert_eq!(a, b);
    }
}

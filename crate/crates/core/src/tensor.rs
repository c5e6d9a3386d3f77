//! Dense N-dimensional tensors.
//!
//! Values live behind an `Arc` so tensors are cheap to clone and a recorded
//! tape can keep forward intermediates alive without copying. A tensor is
//! immutable after construction except for its gradient slot, which training
//! code fills after a backward pass.
//!
//! The elementwise suite here (`add`, `sub`, `scalar_mul`, `sign`, `clamp`)
//! is deliberately not differentiable: these are the out-of-graph update and
//! projection steps of the attack loops. Differentiable operations live on
//! [`crate::tape::Tape`].

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Identity of a tensor, used to look up gradients computed by a tape.
/// Clones share the id: they are views of the same logical tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
}

#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    values: Arc<Vec<T>>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    id: TensorId,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} implies {} elements but {} values were given",
                    shape,
                    numel,
                    values.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            values: Arc::new(values),
            grad: None,
            requires_grad: false,
            id: fresh_id(),
        })
    }

    pub(crate) fn from_arc(shape: Vec<usize>, values: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
            id: fresh_id(),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: Arc::new(vec![T::ZERO; numel]),
            grad: None,
            requires_grad: false,
            id: fresh_id(),
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: Arc::new(vec![value; numel]),
            grad: None,
            requires_grad: false,
            id: fresh_id(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::filled(vec![1], value)
    }

    /// Uniform values in [lo, hi), drawn from the given generator.
    pub fn rand_uniform(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.uniform_s::<T>(lo, hi)).collect();
        Tensor {
            shape,
            values: Arc::new(values),
            grad: None,
            requires_grad: false,
            id: fresh_id(),
        }
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.values)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.values.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::shape(
                "set_grad",
                format!("gradient length {} != tensor numel {}", grad.len(), self.numel()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Mutable access to the values, for in-place parameter updates.
    /// Copies the buffer first if a tape or another clone still shares it.
    pub fn values_mut(&mut self) -> &mut [T] {
        let vec: &mut Vec<T> = Arc::make_mut(&mut self.values);
        vec.as_mut_slice()
    }

    /// Replaces the values buffer, keeping identity and shape.
    pub fn set_values(&mut self, values: Vec<T>) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::shape(
                "set_values",
                format!("{} values for numel {}", values.len(), self.numel()),
            ));
        }
        self.values = Arc::new(values);
        Ok(())
    }

    pub fn is_all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("left {:?} vs right {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_arc(self.shape.clone(), Arc::new(values)))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_arc(self.shape.clone(), Arc::new(values)))
    }

    pub fn scalar_mul(&self, c: T) -> Self {
        let values = self.values.iter().map(|&v| v * c).collect();
        Tensor::from_arc(self.shape.clone(), Arc::new(values))
    }

    /// Elementwise sign: x>0 → 1, x<0 → −1, x==0 → 0. The zero case means a
    /// sign-gradient attack leaves pixels with exactly-zero gradient alone.
    pub fn sign(&self) -> Self {
        let values = self
            .values
            .iter()
            .map(|&v| {
                if v > T::ZERO {
                    T::ONE
                } else if v < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                }
            })
            .collect();
        Tensor::from_arc(self.shape.clone(), Arc::new(values))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Result<Self> {
        if lo > hi {
            return Err(Error::Validation(format!(
                "clamp lower bound {} exceeds upper bound {}",
                lo, hi
            )));
        }
        let values = self
            .values
            .iter()
            .map(|&v| v.max_s(lo).min_s(hi))
            .collect();
        Ok(Tensor::from_arc(self.shape.clone(), Arc::new(values)))
    }

    pub fn linf_distance(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "linf_distance")?;
        let mut worst = 0.0f64;
        for (&a, &b) in self.values.iter().zip(other.values.iter()) {
            let d = (a - b).abs().to_f64();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }
}

// ---------------------------------------------------------------------------
// Serialization: "GTNS" magic, version u32, rank u32, extents u32 each,
// scalar-type tag u8 (0 = f32, 1 = f64), then raw little-endian values.
// ---------------------------------------------------------------------------

const TENSOR_MAGIC: &[u8; 4] = b"GTNS";
pub const TENSOR_FORMAT_VERSION: u32 = 1;

impl<T: Scalar> Tensor<T> {
    pub fn write_blob(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(T::DTYPE_TAG);
        for &v in self.values.iter() {
            v.write_le(out);
        }
    }

    pub fn read_blob(bytes: &[u8], origin: &str) -> Result<(Self, usize)> {
        let fail = |detail: String| Error::format(origin, detail);
        let need = |have: usize, want: usize| -> Result<()> {
            if have < want {
                Err(Error::format(
                    origin,
                    format!("truncated tensor blob: need {} bytes, have {}", want, have),
                ))
            } else {
                Ok(())
            }
        };

        need(bytes.len(), 13)?;
        if &bytes[0..4] != TENSOR_MAGIC {
            return Err(fail("bad tensor magic (expected GTNS)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != TENSOR_FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported tensor format version {} (expected {})",
                version, TENSOR_FORMAT_VERSION
            )));
        }
        let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut off = 12;
        need(bytes.len(), off + 4 * rank + 1)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let tag = bytes[off];
        off += 1;
        if tag != T::DTYPE_TAG {
            return Err(fail(format!(
                "scalar type tag {} does not match requested {} (tag {})",
                tag,
                T::NAME,
                T::DTYPE_TAG
            )));
        }
        let numel: usize = shape.iter().product();
        need(bytes.len(), off + numel * T::BYTES)?;
        let mut values = Vec::with_capacity(numel);
        for i in 0..numel {
            values.push(T::read_le(&bytes[off + i * T::BYTES..]));
        }
        off += numel * T::BYTES;
        let tensor = Tensor::from_vec(shape, values).map_err(|e| fail(e.to_string()))?;
        Ok((tensor, off))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_blob(&mut buf);
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let (tensor, consumed) = Tensor::read_blob(&bytes, &path.display().to_string())?;
        if consumed != bytes.len() {
            return Err(Error::format(
                path.display().to_string(),
                format!("{} trailing bytes after tensor blob", bytes.len() - consumed),
            ));
        }
        Ok(tensor)
    }
}

/// Index of the flat offset for [n, c, h, w] in an N×C×H×W tensor.
#[inline]
pub fn idx4(c_dim: usize, h_dim: usize, w_dim: usize, n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * c_dim + c) * h_dim + h) * w_dim + w
}

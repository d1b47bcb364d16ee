//! Dense row-major f32 tensors and the binary interchange format.
//!
//! This is the universal numeric carrier: images, activations, CAV weights,
//! masks and gradients are all `Tensor`s. Storage is 32-bit; every reduction
//! (dot products, norms, pooling) accumulates in 64-bit in flat index order
//! so results are bit-identical between runs.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Magic bytes of the tensor interchange format.
pub const TENSOR_MAGIC: &[u8; 4] = b"CAVT";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Sum,
    Mean,
    Max,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Format {
                format: "tensor",
                message: format!("extents must be positive, got {shape:?}"),
            });
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            off = off * d + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f32) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn require_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Sum of elementwise products, accumulated in f64 in flat order.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.require_same_shape(other, "dot")?;
        let mut acc = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += (*a as f64) * (*b as f64);
        }
        Ok(acc)
    }

    /// Euclidean norm, f64 accumulation.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for a in &self.data {
            acc += (*a as f64) * (*a as f64);
        }
        acc.sqrt()
    }

    /// Rescales direction and bias by the same factor so the decision rule
    /// `sign(v.z + b)` is unchanged while the direction becomes unit-norm.
    pub fn normalize_with_bias(&self, bias: f64) -> Result<(Tensor, f64)> {
        let n = self.norm();
        if n <= 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        let inv = 1.0 / n;
        let data = self.data.iter().map(|&x| (x as f64 * inv) as f32).collect();
        Ok((
            Tensor {
                shape: self.shape.clone(),
                data,
            },
            bias * inv,
        ))
    }

    /// Per-channel spatial reduction of a rank-3 `[C, H, W]` tensor.
    pub fn pool(&self, mode: PoolMode) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::ShapeMismatch {
                context: "pool",
                expected: vec![0, 0, 0],
                got: self.shape.clone(),
            });
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let hw = h * w;
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &self.data[ch * hw..(ch + 1) * hw];
            let v = match mode {
                PoolMode::Sum => plane.iter().fold(0.0f64, |acc, &x| acc + x as f64) as f32,
                PoolMode::Mean => {
                    (plane.iter().fold(0.0f64, |acc, &x| acc + x as f64) / hw as f64) as f32
                }
                PoolMode::Max => plane.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)),
            };
            out.push(v);
        }
        Tensor::new(vec![c], out)
    }

    pub fn scaled(&self, s: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    /// self += s * other
    pub fn add_scaled(&mut self, other: &Tensor, s: f32) -> Result<()> {
        self.require_same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * *b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    // ---- binary interchange format ----------------------------------------
    // "CAVT", 1-byte rank, rank x u32 LE extents, then f32 LE data row-major.

    pub fn write_cavt<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&[self.rank() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cavt<R: Read>(mut r: R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format {
                format: "cavt",
                message: format!("bad magic {magic:?}"),
            });
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let rank = rank[0] as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format {
                format: "cavt",
                message: format!("unsupported rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            let d = u32::from_le_bytes(b) as usize;
            if d == 0 {
                return Err(Error::Format {
                    format: "cavt",
                    message: "zero extent".into(),
                });
            }
            shape.push(d);
        }
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        let mut data = Vec::with_capacity(len);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::Format {
                    format: "cavt",
                    message: "non-finite element".into(),
                });
            }
            data.push(v);
        }
        Tensor::new(shape, data)
    }

    pub fn save_cavt(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_cavt(std::io::BufWriter::new(file))
    }

    pub fn load_cavt(path: &Path) -> Result<Tensor> {
        let file = std::fs::File::open(path)?;
        Self::read_cavt(std::io::BufReader::new(file))
    }
}

/// Fills a tensor with uniform values from the given generator.
pub fn random_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut crate::rng::SplitMix64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.range_f32(lo, hi)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

//! Dense row-major `f32` tensors, the handful of kernels the pipeline needs,
//! and the splitmix64 generator every weight and noise sample is drawn from.
//!
//! Every reduction runs in a fixed order so that results are bitwise
//! reproducible across runs and thread counts.

use std::cell::Cell;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LAYER_NORM_EPS: f32 = 1e-5;
const COSINE_NORM_FLOOR: f64 = 1e-12;
/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// splitmix64. Identical seeds give identical streams in any language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeededGenerator {
    state: u64,
}

impl SeededGenerator {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream for `(seed, stream)`: the first output of a generator
    /// seeded with `seed + stream * golden_gamma`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut g = Self::new(seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        Self::new(g.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) from the top 53 bits.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Standard normal via Box-Muller (cosine branch only; two draws per sample).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_unit();
        let u2 = self.next_unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: &[usize], value: f32) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self {
            dims: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension of a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            0 | 1 => 1,
            _ => self.dims[..self.dims.len() - 1].iter().product(),
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            dims: vec![c, r],
            data: out,
        })
    }

    /// Rows `idx` (in the given order) of a matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.matrix_dims("select_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::shape(format!("row {i} out of range {r}")));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            dims: vec![idx.len(), c],
            data,
        })
    }

    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let (r, c) = self.matrix_dims("slice_rows")?;
        if range.end > r || range.start > range.end {
            return Err(Error::shape(format!("row range {range:?} out of {r}")));
        }
        Ok(Self {
            dims: vec![range.len(), c],
            data: self.data[range.start * c..range.end * c].to_vec(),
        })
    }

    /// Columns `idx` of a matrix.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.matrix_dims("select_cols")?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape(format!("column {bad} out of range {c}")));
        }
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = self.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(Self {
            dims: vec![r, idx.len()],
            data,
        })
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.matrix_dims("concat_rows")?;
            if c != cols {
                return Err(Error::shape(format!("concat: {c} columns vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            dims: vec![rows, cols],
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Add a length-`cols` vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f32]) -> Result<()> {
        let c = self.cols();
        if bias.len() != c {
            return Err(Error::shape(format!("bias {} vs {c} columns", bias.len())));
        }
        for row in self.data.chunks_exact_mut(c) {
            for (a, b) in row.iter_mut().zip(bias) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when both tensors have the same dims and identical bit patterns.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// FNV-1a over dims and little-endian value bytes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for &d in &self.dims {
            feed(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            feed(&v.to_le_bytes());
        }
        h
    }

    fn matrix_dims(&self, op: &str) -> Result<(usize, usize)> {
        if self.dims.len() != 2 {
            return Err(Error::shape(format!(
                "{op} expects a matrix, got dims {:?}",
                self.dims
            )));
        }
        Ok((self.dims[0], self.dims[1]))
    }
}

thread_local! {
    static MATMUL_FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` and returns its result with the `2·m·n·k` FLOPs of every matmul it
/// issued on this thread.
pub fn count_matmul_flops<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MATMUL_FLOPS.with(Cell::get);
    let out = f();
    let after = MATMUL_FLOPS.with(Cell::get);
    (out, after - before)
}

/// `a[m×k] · b[k×n]`. Each output element accumulates over `k` left to right,
/// starting from the first product, regardless of how rows are scheduled.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims: [{m}×{k}] · [{k2}×{n}]"
        )));
    }
    MATMUL_FLOPS.with(|c| c.set(c.get() + 2 * (m * n * k) as u64));

    let mut out = vec![0.0f32; m * n];
    if n == 0 {
        return Tensor::new(vec![m, n], out);
    }
    let kernel = |(i, orow): (usize, &mut [f32])| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    Tensor::new(vec![m, n], out)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    if c > 0 {
        out.data.chunks_exact_mut(c).for_each(softmax_in_place);
    }
    out
}

/// Cosine similarity clamped to [-1, 1]; 0 when either norm is below 1e-12.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine_similarity on unequal lengths");
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu.sqrt() < COSINE_NORM_FLOOR || nv.sqrt() < COSINE_NORM_FLOOR {
        return 0.0;
    }
    (dot / (nu * nv).sqrt()).clamp(-1.0, 1.0)
}

/// Normalizes every trailing-dimension vector to zero mean, unit variance
/// (epsilon 1e-5), then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &[f32], bias: &[f32]) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(format!(
            "layer_norm over {d} features with gain {} / bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_exact_mut(d) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Xavier-uniform values in `[-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`,
/// drawn in row-major order.
pub fn uniform_init(gen: &mut SeededGenerator, dims: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let u = 2.0 * gen.next_unit() - 1.0;
            let v = (u * a) as f32;
            // f32 rounding can land exactly on +a
            if v as f64 >= a {
                f32::from_bits(v.to_bits() - 1)
            } else {
                v
            }
        })
        .collect();
    Tensor {
        dims: dims.to_vec(),
        data,
    }
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

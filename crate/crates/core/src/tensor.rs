//! Dense row-major `f32` tensors.
//!
//! A [`Tensor`] is a plain value: a shape and a flat buffer. Gradient
//! bookkeeping lives on the [`Tape`](crate::autograd::Tape) and in the
//! [`ParamStore`](crate::params::ParamStore), so tensors can be shared and
//! compared freely.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Zero-mean normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Bytes of the little-endian `f32` payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Rearrange `[H, W, r*r*C]` into `[r*H, r*W, C]`.
///
/// Channel block `(i, j)` (channel `c * r * r + i * r + j`) lands at offset
/// `(i, j)` of each `r x r` output cell.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w, cin) = dims3("pixel_shuffle", x)?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(shape_err(
            "pixel_shuffle",
            format!("{cin} channels not divisible by r^2 = {}", r * r),
        ));
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; x.numel()];
    let src = x.data();
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * cin;
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let oy = y * r + i;
                        let ox = xx * r + j;
                        out[(oy * ow + ox) * c + ch] = src[base + ch * r * r + i * r + j];
                    }
                }
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (oh, ow, c) = dims3("pixel_unshuffle", x)?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(shape_err(
            "pixel_unshuffle",
            format!("spatial extents {oh}x{ow} not divisible by {r}"),
        ));
    }
    let (h, w) = (oh / r, ow / r);
    let cin = c * r * r;
    let mut out = vec![0.0; x.numel()];
    let src = x.data();
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * cin;
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let oy = y * r + i;
                        let ox = xx * r + j;
                        out[base + ch * r * r + i * r + j] = src[(oy * ow + ox) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, cin], out)
}

/// Stable ascending argsort: equal keys keep their original relative order.
pub fn stable_argsort(keys: &[usize]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..keys.len()).collect();
    // slice::sort_by_key is a stable merge sort.
    perm.sort_by_key(|&i| keys[i]);
    perm
}

/// `inv[perm[j]] = j`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

pub(crate) fn dims3(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(shape_err(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

pub(crate) fn dims2(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

//! Dense-array kernels shared by every layer of the decoder.
//!
//! All reductions run sequentially over the contracted axis in ascending index
//! order, so results are bit-reproducible no matter how callers schedule work
//! across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default epsilon for [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major array of finite reals with positive extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawArray", into = "RawArray")]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<RawArray> for DenseArray {
    type Error = Error;

    fn try_from(raw: RawArray) -> Result<Self> {
        DenseArray::new(raw.shape, raw.values)
    }
}

impl From<DenseArray> for RawArray {
    fn from(a: DenseArray) -> Self {
        RawArray {
            shape: a.shape,
            values: a.values,
        }
    }
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::config(format!(
                "array extents must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::config(format!(
                "shape {shape:?} needs {len} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite value {} at flat index {i}",
                values[i]
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "extents must be positive"
        );
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut a = Self::zeros(shape);
        a.values.iter_mut().for_each(|v| *v = value);
        a
    }

    /// 2-D array from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::config("ragged rows"));
        }
        Self::new(vec![n, m], rows.concat())
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.values[self.flat_index(index)]
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            assert!(i < e, "index {i} out of bounds for extent {e}");
            acc * e + i
        })
    }

    /// Row `i` of a 2-D array.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let m = self.shape[1];
        &self.values[i * m..(i + 1) * m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.last_dim())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.values.clone())
    }

    /// Transpose of a 2-D array.
    pub fn transpose(&self) -> Self {
        assert_eq!(self.rank(), 2, "transpose needs a 2-D array");
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.values[i * m + j];
            }
        }
        Self {
            shape: vec![m, n],
            values: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.shape.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Array with entries drawn uniformly from `[-bound, bound]`.
pub fn uniform_array(rng: &mut impl rand::Rng, shape: &[usize], bound: f64) -> DenseArray {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            if bound > 0.0 {
                rng.random_range(-bound..=bound)
            } else {
                0.0
            }
        })
        .collect();
    DenseArray::new(shape.to_vec(), values).expect("finite uniform draws")
}

/// `x·w + bias` for a single input vector; `w` is `a×b` row-major.
pub fn linear_vec(x: &[f64], w: &DenseArray, bias: &DenseArray) -> Result<Vec<f64>> {
    check_linear_shapes(x.len(), w, bias)?;
    Ok(affine_row(x, w.values(), bias.values()))
}

fn check_linear_shapes(a: usize, w: &DenseArray, bias: &DenseArray) -> Result<()> {
    if w.rank() != 2 || w.shape()[0] != a {
        return Err(Error::config(format!(
            "linear: input width {a} does not match weight shape {:?}",
            w.shape()
        )));
    }
    if bias.rank() != 1 || bias.len() != w.shape()[1] {
        return Err(Error::config(format!(
            "linear: bias shape {:?} does not match weight shape {:?}",
            bias.shape(),
            w.shape()
        )));
    }
    Ok(())
}

fn affine_row(x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let b = bias.len();
    let mut acc = vec![0.0; b];
    for (k, &xk) in x.iter().enumerate() {
        let wrow = &w[k * b..(k + 1) * b];
        for (o, &wkj) in acc.iter_mut().zip(wrow) {
            *o += xk * wkj;
        }
    }
    for (o, &bj) in acc.iter_mut().zip(bias) {
        *o += bj;
    }
    acc
}

/// Plain matrix product of row-major `n×k` and `k×m` slices.
pub fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `y[i,j] = Σ_k x[i,k]·w[k,j] + bias[j]`.
pub fn linear(x: &DenseArray, w: &DenseArray, bias: &DenseArray) -> Result<DenseArray> {
    if x.rank() != 2 {
        return Err(Error::config(format!(
            "linear: expected 2-D input, got shape {:?}",
            x.shape()
        )));
    }
    let (n, a) = (x.shape()[0], x.shape()[1]);
    check_linear_shapes(a, w, bias)?;
    let b = w.shape()[1];
    let mut out = Vec::with_capacity(n * b);
    for row in x.rows() {
        out.extend(affine_row(row, w.values(), bias.values()));
    }
    DenseArray::new(vec![n, b], out)
}

/// In-place numerically stable softmax of one slice.
pub fn softmax_slice(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

/// Softmax along `axis`.
pub fn softmax(x: &DenseArray, axis: usize) -> Result<DenseArray> {
    if axis >= x.rank() {
        return Err(Error::config(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let extent = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.values().to_vec();
    let mut lane = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (k, slot) in lane.iter_mut().enumerate() {
                *slot = out[base + k * inner];
            }
            softmax_slice(&mut lane);
            for (k, &v) in lane.iter().enumerate() {
                out[base + k * inner] = v;
            }
        }
    }
    DenseArray::new(x.shape().to_vec(), out)
}

/// Layer norm of one slice, biased variance.
pub fn layer_norm_slice(xs: &mut [f64], gain: &[f64], shift: &[f64], eps: f64) {
    let c = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / c;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    let inv = 1.0 / (var + eps).sqrt();
    for ((v, &g), &s) in xs.iter_mut().zip(gain).zip(shift) {
        *v = (*v - mean) * inv * g + s;
    }
}

/// Layer norm over the last axis.
pub fn layer_norm(
    x: &DenseArray,
    gain: &DenseArray,
    shift: &DenseArray,
    eps: f64,
) -> Result<DenseArray> {
    let c = x.last_dim();
    if gain.len() != c || shift.len() != c {
        return Err(Error::config(format!(
            "layer_norm: gain/shift length {}/{} must equal channel count {c}",
            gain.len(),
            shift.len()
        )));
    }
    let mut out = x.values().to_vec();
    for slice in out.chunks_mut(c) {
        layer_norm_slice(slice, gain.values(), shift.values(), eps);
    }
    DenseArray::new(x.shape().to_vec(), out)
}

pub fn relu(x: &DenseArray) -> DenseArray {
    DenseArray {
        shape: x.shape.clone(),
        values: x.values.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Bilinear sample of a `C×H×W` map at pixel `(u, v)`.
///
/// Integer coordinates address texel centers, so `(u, v) = (i, j)` returns
/// `map[:, j, i]` exactly. Neighbor indices clamp to the map edge.
pub fn bilinear_sample(map: &DenseArray, u: f64, v: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; map.shape()[0]];
    bilinear_accumulate(map, u, v, 1.0, &mut out)?;
    Ok(out)
}

/// Adds `weight · bilinear_sample(map, u, v)` into `out`.
pub fn bilinear_accumulate(
    map: &DenseArray,
    u: f64,
    v: f64,
    weight: f64,
    out: &mut [f64],
) -> Result<()> {
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::contract(format!(
            "bilinear_sample at non-finite coordinate ({u}, {v})"
        )));
    }
    if map.rank() != 3 {
        return Err(Error::config(format!(
            "bilinear_sample expects C×H×W, got {:?}",
            map.shape()
        )));
    }
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    debug_assert_eq!(out.len(), c);
    let (x0, x1, fx) = neighbors(u, w);
    let (y0, y1, fy) = neighbors(v, h);
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w01 = fx * (1.0 - fy);
    let w10 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    let plane = h * w;
    let vals = map.values();
    for (ch, o) in out.iter_mut().enumerate() {
        let base = ch * plane;
        let s = w00 * vals[base + y0 * w + x0]
            + w01 * vals[base + y0 * w + x1]
            + w10 * vals[base + y1 * w + x0]
            + w11 * vals[base + y1 * w + x1];
        *o += weight * s;
    }
    Ok(())
}

fn neighbors(coord: f64, extent: usize) -> (usize, usize, f64) {
    let last = (extent - 1) as f64;
    let c = coord.clamp(0.0, last);
    let f = c.floor();
    let i0 = f as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, c - f)
}

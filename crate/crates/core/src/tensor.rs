//! Dense row-major `f32` tensors and the handful of kernels the encoders need.
//!
//! Reductions accumulate in `f64` and store `f32`. Kernels are sequential and
//! pure: the same inputs always give bit-identical outputs.

use std::fmt;

use crate::error::{Error, Result};
use crate::memory;

pub const BATCH_NORM_EPS: f32 = 1e-5;
pub const LAYER_NORM_EPS: f32 = 1e-5;

pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Config(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", "data", numel, data.len()));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        memory::on_alloc(data.len() * 4);
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    /// 2-D tensor from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_parts(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn nbytes(&self) -> usize {
        self.data.len() * 4
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("dims2", "rank", 2, self.shape.len())),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim("reshape", "numel", self.numel(), numel));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        const BLOCK: usize = 32;
        let mut out = vec![0.0f32; r * c];
        for i0 in (0..r).step_by(BLOCK) {
            for j0 in (0..c).step_by(BLOCK) {
                for i in i0..(i0 + BLOCK).min(r) {
                    for j in j0..(j0 + BLOCK).min(c) {
                        out[j * r + i] = self.data[i * c + j];
                    }
                }
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn map_in_place(mut self, f: impl Fn(f32) -> f32) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor, scale: f32) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add", "numel", self.numel(), other.numel()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        memory::on_free(self.data.len() * 4);
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Boolean attention mask; `true` marks a blocked (masked-out) entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut blocked = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                blocked.push(f(i, j));
            }
        }
        Mask { rows, cols, blocked }
    }

    pub fn none(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| false)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.blocked[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `floor((K-1)/2)` zeros on the left, `ceil((K-1)/2)` on the right.
    Same,
    /// The same number of zeros on both sides.
    Explicit(usize),
}

impl Padding {
    pub fn amounts(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Same => ((kernel - 1) / 2, kernel / 2),
            Padding::Explicit(p) => (p, p),
        }
    }
}

/// Output length of a 1-D convolution, or `None` when the padded input is
/// shorter than the kernel.
pub fn conv_out_len(t: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    let (l, r) = padding.amounts(kernel);
    let padded = t + l + r;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

fn check_conv(op: &'static str, t: usize, kernel: usize, stride: usize, padding: Padding) -> Result<usize> {
    if kernel == 0 {
        return Err(Error::dim(op, "kernel", 1, 0));
    }
    if stride == 0 {
        return Err(Error::dim(op, "stride", 1, 0));
    }
    conv_out_len(t, kernel, stride, padding).ok_or(Error::dim(op, "time", kernel, t))
}

/// Grouped 1-D convolution. `x` is `[C_in, T]`, `w` is `[C_out, C_in/groups, K]`.
pub fn conv1d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
    groups: usize,
) -> Result<Tensor> {
    const OP: &str = "conv1d";
    let (c_in, t) = x.dims2()?;
    let [c_out, cpg, k] = w.shape()[..] else {
        return Err(Error::dim(OP, "weight rank", 3, w.shape().len()));
    };
    if groups == 0 || c_in % groups != 0 {
        return Err(Error::dim(OP, "groups", groups.max(1), c_in));
    }
    if c_out % groups != 0 {
        return Err(Error::dim(OP, "out_channels", groups, c_out));
    }
    if cpg != c_in / groups {
        return Err(Error::dim(OP, "in_channels", c_in / groups, cpg));
    }
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::dim(OP, "bias", c_out, b.numel()));
        }
    }
    let t_out = check_conv(OP, t, k, stride, padding)?;
    let (pad_l, _) = padding.amounts(k);
    let out_per_group = c_out / groups;
    let xd = x.data();
    let wd = w.data();
    let mut out = Tensor::zeros(&[c_out, t_out]);
    let od = out.data_mut();
    for o in 0..c_out {
        let g = o / out_per_group;
        let b = bias.map_or(0.0, |b| b.data()[o] as f64);
        for to in 0..t_out {
            let mut acc = 0.0f64;
            for ci in 0..cpg {
                let xrow = &xd[(g * cpg + ci) * t..(g * cpg + ci + 1) * t];
                let wrow = &wd[(o * cpg + ci) * k..(o * cpg + ci + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let pos = (to * stride + kk) as isize - pad_l as isize;
                    if pos >= 0 && (pos as usize) < t {
                        acc += wv as f64 * xrow[pos as usize] as f64;
                    }
                }
            }
            od[o * t_out + to] = (acc + b) as f32;
        }
    }
    Ok(out)
}

/// Depthwise convolution with a `[C, K]` kernel (one filter per channel).
pub fn depthwise_conv1d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    const OP: &str = "depthwise_conv1d";
    let (c, t) = x.dims2()?;
    let (wc, k) = w.dims2()?;
    if wc != c {
        return Err(Error::dim(OP, "channels", c, wc));
    }
    if let Some(b) = bias {
        if b.numel() != c {
            return Err(Error::dim(OP, "bias", c, b.numel()));
        }
    }
    let t_out = check_conv(OP, t, k, stride, padding)?;
    let (pad_l, _) = padding.amounts(k);
    let mut out = Tensor::zeros(&[c, t_out]);
    let od = out.data_mut();
    for ch in 0..c {
        let xrow = x.row(ch);
        let wrow = w.row(ch);
        let b = bias.map_or(0.0, |b| b.data()[ch] as f64);
        for to in 0..t_out {
            od[ch * t_out + to] = (depthwise_tap(xrow, wrow, to * stride, pad_l) + b) as f32;
        }
    }
    Ok(out)
}

#[inline]
fn depthwise_tap(xrow: &[f32], wrow: &[f32], start: usize, pad_l: usize) -> f64 {
    let t = xrow.len();
    let mut acc = 0.0f64;
    for (kk, &wv) in wrow.iter().enumerate() {
        let pos = (start + kk) as isize - pad_l as isize;
        if pos >= 0 && (pos as usize) < t {
            acc += wv as f64 * xrow[pos as usize] as f64;
        }
    }
    acc
}

/// Pointwise (K=1) convolution: `w` is `[C_out, C_in]`.
pub fn pointwise_conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    const OP: &str = "pointwise_conv1d";
    let (c_in, t) = x.dims2()?;
    let (c_out, wc) = w.dims2()?;
    if wc != c_in {
        return Err(Error::dim(OP, "in_channels", c_in, wc));
    }
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::dim(OP, "bias", c_out, b.numel()));
        }
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = Tensor::zeros(&[c_out, t]);
    let od = out.data_mut();
    let mut acc = vec![0.0f64; t];
    for o in 0..c_out {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for ci in 0..c_in {
            let wv = wd[o * c_in + ci] as f64;
            for (a, &xv) in acc.iter_mut().zip(&xd[ci * t..(ci + 1) * t]) {
                *a += wv * xv as f64;
            }
        }
        let b = bias.map_or(0.0, |b| b.data()[o] as f64);
        for (dst, a) in od[o * t..(o + 1) * t].iter_mut().zip(&acc) {
            *dst = (a + b) as f32;
        }
    }
    Ok(out)
}

/// Time-channel separable convolution: depthwise `[C, K]` then pointwise
/// `[C_out, C]`, computed in time tiles so the full depthwise output is never
/// materialized. Bit-identical to [`depthwise_conv1d`] followed by
/// [`pointwise_conv1d`].
pub fn depthwise_separable_conv1d(
    x: &Tensor,
    w_dw: &Tensor,
    w_pw: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    const OP: &str = "depthwise_separable_conv1d";
    const TILE: usize = 64;
    let (c, t) = x.dims2()?;
    let (wc, k) = w_dw.dims2()?;
    if wc != c {
        return Err(Error::dim(OP, "channels", c, wc));
    }
    let (c_out, pc) = w_pw.dims2()?;
    if pc != c {
        return Err(Error::dim(OP, "pointwise in_channels", c, pc));
    }
    let t_out = check_conv(OP, t, k, stride, padding)?;
    let (pad_l, _) = padding.amounts(k);
    let wd = w_pw.data();
    let mut out = Tensor::zeros(&[c_out, t_out]);
    let od = out.data_mut();
    // Tile scratch is constant-size, independent of T.
    let mut tile = vec![0.0f32; c * TILE];
    let mut acc = vec![0.0f64; TILE];
    for t0 in (0..t_out).step_by(TILE) {
        let n = TILE.min(t_out - t0);
        for ch in 0..c {
            let xrow = x.row(ch);
            let wrow = w_dw.row(ch);
            for j in 0..n {
                tile[ch * TILE + j] = depthwise_tap(xrow, wrow, (t0 + j) * stride, pad_l) as f32;
            }
        }
        for o in 0..c_out {
            acc[..n].iter_mut().for_each(|a| *a = 0.0);
            for ch in 0..c {
                let wv = wd[o * c + ch] as f64;
                for (a, &y) in acc[..n].iter_mut().zip(&tile[ch * TILE..ch * TILE + n]) {
                    *a += wv * y as f64;
                }
            }
            for j in 0..n {
                od[o * t_out + t0 + j] = acc[j] as f32;
            }
        }
    }
    Ok(out)
}

/// Weight count of a separable conv: `K*C + C*C_out`.
pub fn separable_param_count(channels: usize, out_channels: usize, kernel: usize) -> usize {
    kernel * channels + channels * out_channels
}

/// Inference batch norm over `[C, T]`.
pub fn batch_norm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    batch_norm_in_place(x.clone(), gamma, beta, running_mean, running_var, eps)
}

pub(crate) fn batch_norm_in_place(
    mut x: Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    const OP: &str = "batch_norm_infer";
    let (c, t) = x.dims2()?;
    for (name, p) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if p.numel() != c {
            return Err(Error::dim(OP, name, c, p.numel()));
        }
    }
    let xd = x.data_mut();
    for ch in 0..c {
        let denom = running_var.data()[ch] as f64 + eps as f64;
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::NumericDomain {
                op: OP,
                detail: format!("var + eps = {denom} on channel {ch}"),
            });
        }
        let scale = gamma.data()[ch] as f64 / denom.sqrt();
        let mean = running_mean.data()[ch] as f64;
        let shift = beta.data()[ch] as f64;
        for v in &mut xd[ch * t..(ch + 1) * t] {
            *v = (scale * (*v as f64 - mean) + shift) as f32;
        }
    }
    Ok(x)
}

/// Per-row layer norm over `[T, D]`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    const OP: &str = "layer_norm";
    let (rows, d) = x.dims2()?;
    if gamma.numel() != d {
        return Err(Error::dim(OP, "gamma", d, gamma.numel()));
    }
    if beta.numel() != d {
        return Err(Error::dim(OP, "beta", d, beta.numel()));
    }
    let mut out = Tensor::zeros(&[rows, d]);
    let od = out.data_mut();
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for j in 0..d {
            let n = (row[j] as f64 - mean) * inv;
            od[r * d + j] = (n * gamma.data()[j] as f64 + beta.data()[j] as f64) as f32;
        }
    }
    Ok(out)
}

pub fn relu_scalar(v: f32) -> f32 {
    v.max(0.0)
}

pub fn sigmoid_scalar(v: f32) -> f32 {
    (1.0 / (1.0 + (-(v as f64)).exp())) as f32
}

pub fn silu_scalar(v: f32) -> f32 {
    v * sigmoid_scalar(v)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.clone().map_in_place(relu_scalar)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.clone().map_in_place(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.clone().map_in_place(silu_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.clone().map_in_place(f32::tanh)
}

/// `[M, K] x [K, N] -> [M, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::dim("matmul", "inner", k, kb));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let od = out.data_mut();
    let bd = b.data();
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (kk, &av) in a.row(i).iter().enumerate() {
            let av = av as f64;
            for (dst, &bv) in acc.iter_mut().zip(&bd[kk * n..(kk + 1) * n]) {
                *dst += av * bv as f64;
            }
        }
        for (dst, v) in od[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *dst = *v as f32;
        }
    }
    Ok(out)
}

/// Affine map applied to each row: `x [T, D_in]`, `w [D_out, D_in]`, result
/// `x * w^T + b`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    const OP: &str = "linear";
    let (rows, d_in) = x.dims2()?;
    let (d_out, wd_in) = w.dims2()?;
    if d_in != wd_in {
        return Err(Error::dim(OP, "in_features", wd_in, d_in));
    }
    if let Some(b) = bias {
        if b.numel() != d_out {
            return Err(Error::dim(OP, "bias", d_out, b.numel()));
        }
    }
    let mut out = Tensor::zeros(&[rows, d_out]);
    let od = out.data_mut();
    for r in 0..rows {
        linear_row(x.row(r), w, bias, &mut od[r * d_out..(r + 1) * d_out]);
    }
    Ok(out)
}

/// Single-vector form of [`linear`]; shapes are trusted.
pub(crate) fn linear_row(x: &[f32], w: &Tensor, bias: Option<&Tensor>, out: &mut [f32]) {
    let d_in = x.len();
    let wd = w.data();
    for (o, dst) in out.iter_mut().enumerate() {
        let acc = dot_f64(x, &wd[o * d_in..(o + 1) * d_in]);
        let b = bias.map_or(0.0, |b| b.data()[o] as f64);
        *dst = (acc + b) as f32;
    }
}

#[inline]
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Row softmax with optional blocking mask. Blocked entries come out exactly 0.
pub fn softmax_rows(x: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if let Some(mask) = mask {
        if mask.dims() != (m, n) {
            return Err(Error::dim("softmax_rows", "mask", m * n, mask.rows * mask.cols));
        }
    }
    let mut out = x.clone();
    let od = out.data_mut();
    for i in 0..m {
        let ok = softmax_row_in_place(&mut od[i * n..(i + 1) * n], mask.map(|mk| mk.row(i)));
        if !ok {
            return Err(Error::EmptyAttentionRow { row: i });
        }
    }
    Ok(out)
}

/// Softmax over the unblocked entries of `row`; returns `false` if every entry
/// is blocked.
pub(crate) fn softmax_row_in_place(row: &mut [f32], blocked: Option<&[bool]>) -> bool {
    let open = |j: usize| blocked.is_none_or(|b| !b[j]);
    let mut max = f32::NEG_INFINITY;
    let mut any = false;
    for (j, &v) in row.iter().enumerate() {
        if open(j) {
            any = true;
            if v > max {
                max = v;
            }
        }
    }
    if !any {
        return false;
    }
    let mut sum = 0.0f64;
    for (j, v) in row.iter_mut().enumerate() {
        if open(j) {
            let e = ((*v - max) as f64).exp();
            sum += e;
            *v = e as f32;
        }
    }
    for (j, v) in row.iter_mut().enumerate() {
        *v = if open(j) { (*v as f64 / sum) as f32 } else { 0.0 };
    }
    true
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]);
        let w = Tensor::new(&[1, 1, 1], vec![1.0]).unwrap();
        let y = conv1d(&x, &w, None, 1, Padding::Explicit(0), 1).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_box_kernel_stride_two() {
        let x = Tensor::from_rows(&[&[1.0, 1.0, 1.0, 1.0]]);
        let w = Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        let y = conv1d(&x, &w, None, 2, Padding::Explicit(0), 1).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[2.0, 2.0]);
    }

    #[test]
    fn conv1d_groups_match_per_channel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[3, 16], &mut rng);
        let w = rand_tensor(&[3, 1, 5], &mut rng);
        let y = conv1d(&x, &w, None, 1, Padding::Same, 3).unwrap();
        // Independent oracle: per channel, slide the kernel over a padded copy.
        for c in 0..3 {
            let mut padded = vec![0.0f32; 2];
            padded.extend_from_slice(x.row(c));
            padded.extend_from_slice(&[0.0, 0.0]);
            for t in 0..16 {
                let expect: f32 = (0..5).map(|k| w.data()[c * 5 + k] * padded[t + k]).sum();
                assert!((y.data()[c * 16 + t] - expect).abs() < 1e-6);
            }
        }
        let dw = depthwise_conv1d(&x, &w.clone().reshape(&[3, 5]).unwrap(), None, 1, Padding::Same).unwrap();
        assert_eq!(dw, y);
    }

    #[test]
    fn conv1d_errors_name_axis() {
        let x = Tensor::zeros(&[3, 8]);
        let w = Tensor::zeros(&[4, 2, 3]);
        let err = conv1d(&x, &w, None, 1, Padding::Same, 1).unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");
        let short = Tensor::zeros(&[1, 2]);
        let w = Tensor::zeros(&[1, 1, 5]);
        let err = conv1d(&short, &w, None, 1, Padding::Explicit(0), 1).unwrap_err();
        assert!(err.to_string().contains("time"), "{err}");
    }

    #[test]
    fn conv_out_len_sweep() {
        for k in 1..=9 {
            for stride in 1..=2 {
                for t in 1..=32 {
                    for padding in [Padding::Same, Padding::Explicit(0), Padding::Explicit(2)] {
                        let (l, r) = padding.amounts(k);
                        let expect = if t + l + r >= k {
                            Some((t + l + r - k) / stride + 1)
                        } else {
                            None
                        };
                        assert_eq!(conv_out_len(t, k, stride, padding), expect);
                        let x = Tensor::full(&[1, t], 1.0);
                        let w = Tensor::full(&[1, 1, k], 1.0);
                        let y = conv1d(&x, &w, None, stride, padding, 1);
                        match expect {
                            Some(n) => assert_eq!(y.unwrap().shape(), &[1, n]),
                            None => assert!(y.is_err()),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn separable_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[4, 10], &mut rng);
        let mut dw = vec![0.0; 4 * 7];
        for c in 0..4 {
            dw[c * 7 + 3] = 1.0;
        }
        let w_dw = Tensor::new(&[4, 7], dw).unwrap();
        let w_pw = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let y = depthwise_separable_conv1d(&x, &w_dw, &w_pw, 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn separable_parameter_ratio() {
        let sep = separable_param_count(64, 64, 7);
        assert_eq!(sep, 4544);
        let standard = 7 * 64 * 64;
        assert_eq!(standard, 28672);
        let ratio = standard as f64 / sep as f64;
        assert!((ratio - 6.31).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn separable_equals_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (t, stride) in [(5, 1), (70, 1), (129, 2), (200, 2)] {
            let x = rand_tensor(&[6, t], &mut rng);
            let w_dw = rand_tensor(&[6, 7], &mut rng);
            let w_pw = rand_tensor(&[9, 6], &mut rng);
            let fused = depthwise_separable_conv1d(&x, &w_dw, &w_pw, stride, Padding::Same).unwrap();
            let dw = depthwise_conv1d(&x, &w_dw, None, stride, Padding::Same).unwrap();
            let composed = pointwise_conv1d(&dw, &w_pw, None).unwrap();
            assert!(fused.max_abs_diff(&composed) <= 1e-6);
        }
    }

    #[test]
    fn pointwise_conv_equals_matmul_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[5, 12], &mut rng);
        let w = rand_tensor(&[3, 5, 1], &mut rng);
        let y = conv1d(&x, &w, None, 1, Padding::Same, 1).unwrap();
        let m = matmul(&w.clone().reshape(&[3, 5]).unwrap(), &x).unwrap();
        assert_eq!(y, m);
    }

    #[test]
    fn batch_norm_cases() {
        let x = Tensor::from_rows(&[&[1.0, -2.0, 3.5]]);
        let one = Tensor::full(&[1], 1.0);
        let zero = Tensor::zeros(&[1]);
        let y = batch_norm_infer(&x, &one, &zero, &zero, &one, 0.0).unwrap();
        assert_eq!(y, x);

        let x = Tensor::full(&[1, 4], 5.0);
        let y = batch_norm_infer(
            &x,
            &Tensor::full(&[1], 2.0),
            &Tensor::full(&[1], 3.0),
            &Tensor::full(&[1], 5.0),
            &one,
            0.0,
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0; 4]);

        let err = batch_norm_infer(&x, &one, &zero, &zero, &zero, 0.0).unwrap_err();
        assert!(matches!(err, Error::NumericDomain { .. }));
    }

    #[test]
    fn batch_norm_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&[4, 9], &mut rng);
        let g = rand_tensor(&[4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let m = rand_tensor(&[4], &mut rng);
        let v = Tensor::from_fn(&[4], |_| rng.gen_range(0.1..2.0));
        let y = batch_norm_infer(&x, &g, &b, &m, &v, BATCH_NORM_EPS).unwrap();
        for c in 0..4 {
            for t in 0..9 {
                let expect = g.data()[c] as f64 * (x.data()[c * 9 + t] as f64 - m.data()[c] as f64)
                    / (v.data()[c] as f64 + BATCH_NORM_EPS as f64).sqrt()
                    + b.data()[c] as f64;
                assert_eq!(y.data()[c * 9 + t], expect as f32);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::from_rows(&[&[1.0, 1.0, 1.0]]), &one, &zero, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let y = layer_norm(
            &Tensor::from_rows(&[&[-1.0, 1.0]]),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            1e-12,
        )
        .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[1, 256], |_| rng.gen_range(-3.0..5.0));
        let y = layer_norm(&x, &Tensor::full(&[256], 1.0), &Tensor::zeros(&[256]), LAYER_NORM_EPS).unwrap();
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / 256.0;
        let var = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 256.0;
        assert!(mean.abs() < 1e-6, "{mean}");
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }

    #[test]
    fn activations() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert_eq!(relu_scalar(-3.0), 0.0);
        assert_eq!(relu_scalar(3.0), 3.0);
        let x = Tensor::from_fn(&[33], |i| i as f32 * 0.37 - 6.0);
        let s = silu(&x);
        let recomposed: Vec<f32> = x.data().iter().zip(sigmoid(&x).data()).map(|(a, b)| a * b).collect();
        assert_eq!(s.data(), &recomposed[..]);
        assert!(tanh(&x).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn softmax_cases() {
        let y = softmax_rows(&Tensor::zeros(&[1, 3]), None).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let mask = Mask::from_fn(1, 2, |_, j| j == 0);
        let y = softmax_rows(&Tensor::from_rows(&[&[5.0, -1.0]]), Some(&mask)).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0]);
        let full = Mask::from_fn(2, 2, |i, _| i == 1);
        assert!(matches!(
            softmax_rows(&Tensor::zeros(&[2, 2]), Some(&full)),
            Err(Error::EmptyAttentionRow { row: 1 })
        ));
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&[4, 4], &mut rng);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn ops_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[3, 20], &mut rng);
        let w = rand_tensor(&[3, 1, 4], &mut rng);
        let a = conv1d(&x, &w, None, 2, Padding::Same, 3).unwrap();
        let b = conv1d(&x, &w, None, 2, Padding::Same, 3).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f32..50.0, 1..40)) {
            let n = values.len();
            let x = Tensor::new(&[1, n], values).unwrap();
            let y = softmax_rows(&x, None).unwrap();
            let sum: f64 = y.data().iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn finite_inputs_give_finite_outputs(t in 1usize..40, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&[2, t], &mut rng);
            let w = rand_tensor(&[4, 2, 3], &mut rng);
            let y = conv1d(&x, &w, None, 1, Padding::Same, 1).unwrap();
            prop_assert!(y.all_finite());
            prop_assert!(silu(&y).all_finite() && sigmoid(&y).all_finite());
        }
    }
}

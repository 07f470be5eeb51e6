//! Forward and backward kernels on NCHW tensors.
//!
//! Kernels are pure functions of their operands. Convolution and dense
//! products go through `matrixmultiply::dgemm` over im2col buffers; every
//! other kernel is a direct loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Symmetric zero padding of `(k - 1) / 2`; requires an odd kernel.
    Same,
    Valid,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Same => (kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

/// Output extent of a sliding window: `floor((n + 2·pad − k) / stride) + 1`.
pub fn window_out(extent: usize, kernel: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub padding: Padding,
    pub stride: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            padding: Padding::Same,
            stride: 1,
        }
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, with arbitrary row/column strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted extents keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` since it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(op, format!("expected a 4-d tensor, got {s:?}"))),
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        ref s => Err(Error::shape(op, format!("expected a 2-d tensor, got {s:?}"))),
    }
}

struct ConvDims {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn check(input: &Tensor, weights: &Tensor, bias: &Tensor, geom: ConvGeometry) -> Result<Self> {
        const OP: &str = "conv2d";
        let [batch, in_c, h, w] = dims4(input, OP)?;
        let [out_c, wc, kh, kw] = dims4(weights, OP)?;
        if wc != in_c || kh != kw {
            return Err(Error::shape(
                OP,
                format!(
                    "input {:?} incompatible with weights {:?}",
                    input.shape(),
                    weights.shape()
                ),
            ));
        }
        if bias.shape() != [out_c] {
            return Err(Error::shape(
                OP,
                format!(
                    "bias {:?} does not match weights {:?}",
                    bias.shape(),
                    weights.shape()
                ),
            ));
        }
        if geom.padding == Padding::Same && kh % 2 == 0 {
            return Err(Error::shape(
                OP,
                format!("same padding needs an odd kernel, weights {:?}", weights.shape()),
            ));
        }
        let pad = geom.padding.amount(kh);
        let (Some(oh), Some(ow)) = (
            window_out(h, kh, pad, geom.stride),
            window_out(w, kw, pad, geom.stride),
        ) else {
            return Err(Error::shape(
                OP,
                format!(
                    "kernel of weights {:?} exceeds padded input {:?}",
                    weights.shape(),
                    input.shape()
                ),
            ));
        };
        Ok(ConvDims {
            batch,
            in_c,
            h,
            w,
            out_c,
            k: kh,
            pad,
            stride: geom.stride,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Fills `cols[(c,ki,kj), (oy,ox)]` from one image.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.in_c {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((c * self.k + ki) * self.k + kj) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into an image gradient.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.in_c {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((c * self.k + ki) * self.k + kj) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation. `input` is `[B,C,H,W]`, `weights` `[N,C,K,K]`, `bias` `[N]`.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let d = ConvDims::check(input, weights, bias, geom)?;
    let (p, r) = (d.positions(), d.patch_len());
    let in_plane = d.in_c * d.h * d.w;
    let out_plane = d.out_c * p;
    let mut out = vec![0.0; d.batch * out_plane];
    let mut cols = vec![0.0; r * p];
    for b in 0..d.batch {
        d.im2col(&input.data()[b * in_plane..(b + 1) * in_plane], &mut cols);
        let dst = &mut out[b * out_plane..(b + 1) * out_plane];
        for (n, &bv) in bias.data().iter().enumerate() {
            dst[n * p..(n + 1) * p].fill(bv);
        }
        gemm(d.out_c, r, p, weights.data(), (r, 1), &cols, (p, 1), 1.0, dst);
    }
    Tensor::from_parts(vec![d.batch, d.out_c, d.oh, d.ow], out).ensure_finite("conv2d")
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    geom: ConvGeometry,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let d = ConvDims::check(input, weights, bias, geom)?;
    if grad_out.shape() != [d.batch, d.out_c, d.oh, d.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient has shape {:?}", grad_out.shape()),
        ));
    }
    let (p, r) = (d.positions(), d.patch_len());
    let in_plane = d.in_c * d.h * d.w;
    let out_plane = d.out_c * p;
    let mut gi = vec![0.0; input.len()];
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; d.out_c];
    let mut cols = vec![0.0; r * p];
    let mut gcols = vec![0.0; r * p];
    for b in 0..d.batch {
        let go = &grad_out.data()[b * out_plane..(b + 1) * out_plane];
        for (n, g) in gb.iter_mut().enumerate() {
            *g += go[n * p..(n + 1) * p].iter().sum::<f64>();
        }
        d.im2col(&input.data()[b * in_plane..(b + 1) * in_plane], &mut cols);
        // gw[N×R] += go[N×P] · colsᵀ[P×R]
        gemm(d.out_c, p, r, go, (p, 1), &cols, (1, p), 1.0, &mut gw);
        // gcols[R×P] = wᵀ[R×N] · go[N×P]
        gemm(r, d.out_c, p, weights.data(), (1, r), go, (p, 1), 0.0, &mut gcols);
        d.col2im(&gcols, &mut gi[b * in_plane..(b + 1) * in_plane]);
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gi),
        weights: Tensor::from_parts(weights.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![d.out_c], gb),
    })
}

fn dense_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<[usize; 3]> {
    const OP: &str = "dense";
    let [b, f] = dims2(input, OP)?;
    let [wf, o] = dims2(weights, OP)?;
    if wf != f || bias.shape() != [o] {
        return Err(Error::shape(
            OP,
            format!(
                "input {:?}, weights {:?}, bias {:?}",
                input.shape(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    Ok([b, f, o])
}

/// Affine map `input[B,F] · weights[F,O] + bias[O]`.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [b, f, o] = dense_dims(input, weights, bias)?;
    let mut out = Vec::with_capacity(b * o);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm(b, f, o, input.data(), (f, 1), weights.data(), (o, 1), 1.0, &mut out);
    Tensor::from_parts(vec![b, o], out).ensure_finite("dense")
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<DenseGrads> {
    let [b, f, o] = dense_dims(input, weights, bias)?;
    if grad_out.shape() != [b, o] {
        return Err(Error::shape(
            "dense_backward",
            format!("upstream gradient has shape {:?}", grad_out.shape()),
        ));
    }
    let go = grad_out.data();
    let mut gi = vec![0.0; b * f];
    gemm(b, o, f, go, (o, 1), weights.data(), (1, o), 0.0, &mut gi);
    let mut gw = vec![0.0; f * o];
    gemm(f, b, o, input.data(), (1, f), go, (o, 1), 0.0, &mut gw);
    let mut gb = vec![0.0; o];
    for row in go.chunks_exact(o) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_parts(vec![b, f], gi),
        weights: Tensor::from_parts(vec![f, o], gw),
        bias: Tensor::from_parts(vec![o], gb),
    })
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl PoolSpec {
    pub fn halve() -> Self {
        PoolSpec {
            kernel: 2,
            stride: 2,
            padding: Padding::Valid,
        }
    }

    /// 3×3 stride-1 pool that preserves spatial extents.
    pub fn same3() -> Self {
        PoolSpec {
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn out_extent(&self, extent: usize) -> Option<usize> {
        window_out(extent, self.kernel, self.padding.amount(self.kernel), self.stride)
    }
}

/// Max pooling; returns the output and the flat input index chosen per output element.
/// Padded positions never win. Ties go to the first element in scan order.
pub fn maxpool_forward(input: &Tensor, spec: PoolSpec) -> Result<(Tensor, Vec<usize>)> {
    let [b, c, h, w] = dims4(input, "maxpool")?;
    let (Some(oh), Some(ow)) = (spec.out_extent(h), spec.out_extent(w)) else {
        return Err(Error::shape(
            "maxpool",
            format!("window {spec:?} exceeds input {:?}", input.shape()),
        ));
    };
    let pad = spec.padding.amount(spec.kernel) as isize;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..spec.kernel {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..spec.kernel {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![b, c, oh, ow], out), arg))
}

pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = vec![0.0; input_shape.iter().product()];
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Tensor::from_parts(input_shape.to_vec(), g)
}

pub fn add_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_parts(a.shape().to_vec(), data).ensure_finite("add")
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no operands"))?;
    let [b, _, h, w] = dims4(first, "concat")?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let [pb, pc, ph, pw] = dims4(p, "concat")?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(b * total * hw);
    for bi in 0..b {
        for (p, &c) in parts.iter().zip(&channels) {
            out.extend_from_slice(&p.data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    Ok(Tensor::from_parts(vec![b, total, h, w], out))
}

/// Splits a channel-concatenated gradient back into per-operand pieces.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let s = grad.shape();
    let (b, total, hw) = (s[0], s[1], s[2] * s[3]);
    let mut pieces: Vec<Vec<f64>> = channels.iter().map(|&c| Vec::with_capacity(b * c * hw)).collect();
    for bi in 0..b {
        let mut offset = bi * total * hw;
        for (piece, &c) in pieces.iter_mut().zip(channels) {
            piece.extend_from_slice(&grad.data()[offset..offset + c * hw]);
            offset += c * hw;
        }
    }
    pieces
        .into_iter()
        .zip(channels)
        .map(|(data, &c)| Tensor::from_parts(vec![b, c, s[2], s[3]], data))
        .collect()
}

fn check_labels(classes: usize, labels: &[usize], batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for a batch of {batch}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::shape(
            "cross_entropy",
            format!("label {bad} out of range for {classes} classes"),
        ));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let [b, l] = dims2(logits, "softmax")?;
    let mut out = Vec::with_capacity(b * l);
    for row in logits.data().chunks_exact(l) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        out.extend(row.iter().map(|&v| (v - m).exp() / z));
    }
    Ok(Tensor::from_parts(vec![b, l], out))
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let [b, l] = dims2(logits, "cross_entropy")?;
    check_labels(l, labels, b)?;
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks_exact(l).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    let loss = total / b as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NumericOverflow { op: "cross_entropy" })
    }
}

/// Gradient of the mean cross entropy with respect to the logits, scaled by `upstream`.
pub fn cross_entropy_backward(logits: &Tensor, labels: &[usize], upstream: f64) -> Result<Tensor> {
    let [b, l] = dims2(logits, "cross_entropy")?;
    check_labels(l, labels, b)?;
    let mut g = softmax_rows(logits)?.into_data();
    let scale = upstream / b as f64;
    for (row, &y) in g.chunks_exact_mut(l).zip(labels) {
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(Tensor::from_parts(vec![b, l], g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_bias_planes() {
        let input = Tensor::zeros(&[2, 3, 6, 6]);
        let weights = Tensor::full(&[4, 3, 3, 3], 0.7);
        let bias = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let out = conv2d_forward(&input, &weights, &bias, ConvGeometry::default()).unwrap();
        assert_eq!(out.shape(), &[2, 4, 6, 6]);
        for (i, v) in out.data().iter().enumerate() {
            let n = (i / 36) % 4;
            assert_eq!(*v, bias.data()[n]);
        }
    }

    #[test]
    fn ones_counting_case() {
        let input = Tensor::full(&[1, 1, 3, 3], 1.0);
        let weights = Tensor::full(&[1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let geom = ConvGeometry {
            padding: Padding::Valid,
            stride: 1,
        };
        let out = conv2d_forward(&input, &weights, &bias, geom).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn output_extent_formula() {
        let input = Tensor::zeros(&[1, 1, 9, 7]);
        let weights = Tensor::zeros(&[2, 1, 3, 3]);
        let bias = Tensor::zeros(&[2]);
        let geom = ConvGeometry {
            padding: Padding::Same,
            stride: 2,
        };
        let out = conv2d_forward(&input, &weights, &bias, geom).unwrap();
        // floor((9 + 2 - 3) / 2) + 1 = 5, floor((7 + 2 - 3) / 2) + 1 = 4
        assert_eq!(out.shape(), &[1, 2, 5, 4]);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let input = Tensor::zeros(&[1, 2, 5, 5]);
        let weights = Tensor::zeros(&[4, 3, 3, 3]);
        let err = conv2d_forward(&input, &weights, &Tensor::zeros(&[4]), ConvGeometry::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("[1, 2, 5, 5]") && err.contains("[4, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let input = Tensor::zeros(&[1, 1, 2, 2]);
        let weights = Tensor::zeros(&[1, 1, 5, 5]);
        let geom = ConvGeometry {
            padding: Padding::Valid,
            stride: 1,
        };
        assert!(conv2d_forward(&input, &weights, &Tensor::zeros(&[1]), geom).is_err());
    }

    #[test]
    fn dense_hand_case() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn dense_identity() {
        let x = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 * 0.25 - 1.0).collect()).unwrap();
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let y = dense_forward(&x, &eye, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dense_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            dense_forward(&x, &w, &Tensor::zeros(&[2])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let logits = Tensor::full(&[3, 7], 0.3);
        let loss = cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut logits = Tensor::zeros(&[1, 5]);
        logits.data_mut()[2] = 1000.0;
        assert!(cross_entropy(&logits, &[2]).unwrap().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::zeros(&[1, 5]);
        assert!(matches!(
            cross_entropy(&logits, &[5]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let (y, arg) = maxpool_forward(&x, PoolSpec::halve()).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn same_pool_keeps_extent_and_ignores_padding() {
        let x = Tensor::full(&[1, 1, 4, 4], -3.0);
        let (y, _) = maxpool_forward(&x, PoolSpec::same3()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == -3.0));
    }

    #[test]
    fn concat_and_split_roundtrip() {
        let a = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 1, 2], (10..18).map(f64::from).collect()).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 10.0, 11.0, 12.0, 13.0, 3.0, 4.0, 14.0, 15.0, 16.0, 17.0]
        );
        let parts = split_channels(&c, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}

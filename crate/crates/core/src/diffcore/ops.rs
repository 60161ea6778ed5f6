//! Operator kernels: forward values and vector-Jacobian products.
//!
//! Everything here is a pure function of its arguments. Reductions run in a
//! fixed index order so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y = x Wᵀ + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
pub fn dense(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, din) = x.ensure_matrix("dense input")?;
    let (dout, win) = w.ensure_matrix("dense weight")?;
    if din != win {
        return Err(Error::Shape(format!(
            "dense input width {din} does not match weight [{dout}, {win}]"
        )));
    }
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(Error::Shape(format!(
                "dense bias {:?} does not match {dout} outputs",
                b.shape()
            )));
        }
    }
    let (xs, ws) = (x.data(), w.data());
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        let xr = &xs[i * din..(i + 1) * din];
        for o in 0..dout {
            let wr = &ws[o * din..(o + 1) * din];
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for k in 0..din {
                acc += xr[k] * wr[k];
            }
            out[i * dout + o] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![n, dout], out))
}

/// Gradients of [`dense`] with respect to input, weight and bias.
pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let (xs, ws, gs) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; n * din];
    let mut dw = vec![0.0; dout * din];
    let mut db = vec![0.0; dout];
    for i in 0..n {
        let xr = &xs[i * din..(i + 1) * din];
        for o in 0..dout {
            let g = gs[i * dout + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &ws[o * din..(o + 1) * din];
            let dxr = &mut dx[i * din..(i + 1) * din];
            for k in 0..din {
                dxr[k] += g * wr[k];
            }
            let dwr = &mut dw[o * din..(o + 1) * din];
            for k in 0..din {
                dwr[k] += g * xr[k];
            }
        }
    }
    (
        Tensor::from_parts(vec![n, din], dx),
        Tensor::from_parts(vec![dout, din], dw),
        Tensor::from_parts(vec![dout], db),
    )
}

/// Geometry of a 2-D convolution over `[n, c, h, w]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Result<[usize; 7]> {
    let &[n, c, h, wd] = x.shape() else {
        return Err(Error::Shape(format!(
            "conv2d input must be [n, c, h, w], got {:?}",
            x.shape()
        )));
    };
    let &[oc, ic, kh, kw] = w.shape() else {
        return Err(Error::Shape(format!(
            "conv2d weight must be 4-D, got {:?}",
            w.shape()
        )));
    };
    if ic != c || kh != g.kernel || kw != g.kernel {
        return Err(Error::Shape(format!(
            "conv2d weight {:?} incompatible with input {:?} and kernel {}",
            w.shape(),
            x.shape(),
            g.kernel
        )));
    }
    let (Some(oh), Some(ow)) = (g.output_extent(h), g.output_extent(wd)) else {
        return Err(Error::Shape(format!(
            "conv2d kernel {} larger than padded input {h}x{wd}",
            g.kernel
        )));
    };
    Ok([n, c, h, wd, oc, oh, ow])
}

/// Cross-correlation with zero padding, `w: [out_c, in_c, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let [n, c, h, wd, oc, oh, ow] = conv_dims(x, w, g)?;
    if let Some(b) = b {
        if b.shape() != [oc] {
            return Err(Error::Shape(format!(
                "conv2d bias {:?} for {oc} channels",
                b.shape()
            )));
        }
    }
    let k = g.kernel;
    let (xs, ws) = (x.data(), w.data());
    let mut out = vec![0.0; n * oc * oh * ow];
    for i in 0..n {
        for o in 0..oc {
            let bias = b.map_or(0.0, |b| b.data()[o]);
            for py in 0..oh {
                for px in 0..ow {
                    let mut acc = bias;
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (py * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (px * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xs[((i * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * ws[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((i * oc + o) * oh + py) * ow + px] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, oc, oh, ow], out))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    g: ConvGeometry,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, wd, oc, oh, ow] = conv_dims(x, w, g)?;
    let k = g.kernel;
    let (xs, ws, gs) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; xs.len()];
    let mut dw = vec![0.0; ws.len()];
    let mut db = vec![0.0; oc];
    for i in 0..n {
        for o in 0..oc {
            for py in 0..oh {
                for px in 0..ow {
                    let gv = gs[((i * oc + o) * oh + py) * ow + px];
                    if gv == 0.0 {
                        continue;
                    }
                    db[o] += gv;
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (py * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (px * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((i * c + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * c + ci) * k + ky) * k + kx;
                                dx[xi] += gv * ws[wi];
                                dw[wi] += gv * xs[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![oc], db),
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// `[n, c, spatial..] -> [n, c]` mean over spatial positions.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 3 {
        return Err(Error::Shape(format!(
            "global average pooling needs a spatial axis, got {:?}",
            x.shape()
        )));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s = x.len() / (n * c);
    let out = x
        .data()
        .chunks(s)
        .map(|ch| ch.iter().sum::<f64>() / s as f64)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s = x.len() / (n * c);
    let mut dx = Vec::with_capacity(x.len());
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g / s as f64, s));
    }
    Tensor::from_parts(x.shape().to_vec(), dx)
}

/// Normalized values plus the per-group inverse standard deviations, kept
/// for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Flat-index layout of a normalization: `groups` statistics groups, each
/// visiting `members(g)` flat indices.
enum NormLayout {
    /// Contiguous runs of `len` values: instance norm.
    Contiguous { len: usize },
    /// Channel `ch` of `[n, c, s]`: batch norm.
    Channel { n: usize, c: usize, s: usize },
}

impl NormLayout {
    fn group_size(&self) -> usize {
        match *self {
            NormLayout::Contiguous { len } => len,
            NormLayout::Channel { n, s, .. } => n * s,
        }
    }

    fn for_each(&self, group: usize, mut f: impl FnMut(usize)) {
        match *self {
            NormLayout::Contiguous { len } => (group * len..(group + 1) * len).for_each(f),
            NormLayout::Channel { n, c, s } => {
                for i in 0..n {
                    let base = (i * c + group) * s;
                    for p in 0..s {
                        f(base + p);
                    }
                }
            }
        }
    }
}

fn group_stats(x: &[f64], layout: &NormLayout, group: usize) -> (f64, f64) {
    let m = layout.group_size() as f64;
    let mut sum = 0.0;
    layout.for_each(group, |i| sum += x[i]);
    let mean = sum / m;
    let mut ss = 0.0;
    layout.for_each(group, |i| ss += (x[i] - mean) * (x[i] - mean));
    (mean, ss / m)
}

/// Index of the affine parameter that applies to flat index `i`.
#[derive(Clone, Copy)]
enum AffineIndex {
    /// Per channel of `[n, c, s]`.
    Channel { c: usize, s: usize },
    /// Per feature of `[n, d]`.
    Feature { d: usize },
}

impl AffineIndex {
    fn of(&self, i: usize) -> usize {
        match *self {
            AffineIndex::Channel { c, s } => (i / s) % c,
            AffineIndex::Feature { d } => i % d,
        }
    }
}

fn apply_affine(xhat: &Tensor, affine: Option<(&Tensor, &Tensor)>, idx: AffineIndex) -> Tensor {
    match affine {
        None => xhat.clone(),
        Some((gamma, beta)) => {
            let (g, b) = (gamma.data(), beta.data());
            let data = xhat
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let a = idx.of(i);
                    g[a] * v + b[a]
                })
                .collect();
            Tensor::from_parts(xhat.shape().to_vec(), data)
        }
    }
}

fn check_affine(affine: Option<(&Tensor, &Tensor)>, expected: usize, what: &str) -> Result<()> {
    if let Some((g, b)) = affine {
        if g.shape() != [expected] || b.shape() != [expected] {
            return Err(Error::Shape(format!(
                "{what} affine parameters {:?}/{:?}, expected [{expected}]",
                g.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

fn instance_layout(x: &Tensor) -> Result<(NormLayout, AffineIndex, usize)> {
    match x.shape() {
        [_, d] => Ok((
            NormLayout::Contiguous { len: *d },
            AffineIndex::Feature { d: *d },
            *d,
        )),
        [n, c, ..] => {
            let s = x.len() / (n * c);
            Ok((
                NormLayout::Contiguous { len: s },
                AffineIndex::Channel { c: *c, s },
                *c,
            ))
        }
        s => Err(Error::Shape(format!(
            "instance norm needs [n, d] or [n, c, spatial..], got {s:?}"
        ))),
    }
}

/// Per-sample, per-channel normalization over spatial positions. A rank-2
/// input `[n, d]` is normalized over its feature axis per sample, with the
/// affine parameters (if any) applied per feature.
pub fn instance_norm(
    x: &Tensor,
    affine: Option<(&Tensor, &Tensor)>,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!(
            "normalization epsilon must be positive, got {eps}"
        )));
    }
    x.ensure_finite("instance norm input")?;
    let (layout, aidx, alen) = instance_layout(x)?;
    check_affine(affine, alen, "instance norm")?;
    let groups = x.len() / layout.group_size();
    let xs = x.data();
    let mut xhat = vec![0.0; xs.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for gi in 0..groups {
        let (mean, var) = group_stats(xs, &layout, gi);
        let inv = 1.0 / (var + eps).sqrt();
        layout.for_each(gi, |i| xhat[i] = (xs[i] - mean) * inv);
        inv_std.push(inv);
    }
    let xhat = Tensor::from_parts(x.shape().to_vec(), xhat);
    let y = apply_affine(&xhat, affine, aidx);
    Ok((y, NormCache { xhat, inv_std }))
}

/// Gradient of a normalization whose statistics are taken over the same
/// groups as the forward pass. Returns `(dx, dgamma, dbeta)`.
fn norm_backward(
    cache: &NormCache,
    gamma: Option<&Tensor>,
    dy: &Tensor,
    layout: &NormLayout,
    aidx: AffineIndex,
    alen: usize,
) -> (Tensor, Tensor, Tensor) {
    let xhat = cache.xhat.data();
    let g = dy.data();
    let mut dgamma = vec![0.0; alen];
    let mut dbeta = vec![0.0; alen];
    let mut dxhat = vec![0.0; g.len()];
    for i in 0..g.len() {
        let a = aidx.of(i);
        dgamma[a] += g[i] * xhat[i];
        dbeta[a] += g[i];
        dxhat[i] = g[i] * gamma.map_or(1.0, |t| t.data()[a]);
    }
    let m = layout.group_size() as f64;
    let mut dx = vec![0.0; g.len()];
    for (gi, &inv) in cache.inv_std.iter().enumerate() {
        let (mut s1, mut s2) = (0.0, 0.0);
        layout.for_each(gi, |i| {
            s1 += dxhat[i];
            s2 += dxhat[i] * xhat[i];
        });
        layout.for_each(gi, |i| {
            dx[i] = inv / m * (m * dxhat[i] - s1 - xhat[i] * s2);
        });
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![alen], dgamma),
        Tensor::from_parts(vec![alen], dbeta),
    )
}

pub fn instance_norm_backward(
    x: &Tensor,
    cache: &NormCache,
    gamma: Option<&Tensor>,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (layout, aidx, alen) = instance_layout(x)?;
    Ok(norm_backward(cache, gamma, dy, &layout, aidx, alen))
}

fn batch_layout(x: &Tensor) -> Result<(NormLayout, AffineIndex, usize)> {
    match x.shape() {
        [n, d] => Ok((
            NormLayout::Channel { n: *n, c: *d, s: 1 },
            AffineIndex::Channel { c: *d, s: 1 },
            *d,
        )),
        [n, c, ..] => {
            let s = x.len() / (n * c);
            Ok((
                NormLayout::Channel { n: *n, c: *c, s },
                AffineIndex::Channel { c: *c, s },
                *c,
            ))
        }
        s => Err(Error::Shape(format!(
            "batch norm needs [n, c, ..], got {s:?}"
        ))),
    }
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Train-mode batch normalization: statistics over batch (and spatial) axes.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache, BatchStats)> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!(
            "normalization epsilon must be positive, got {eps}"
        )));
    }
    x.ensure_finite("batch norm input")?;
    if x.rows() < 2 {
        return Err(Error::BatchTooSmall(x.rows()));
    }
    let (layout, aidx, c) = batch_layout(x)?;
    check_affine(Some((gamma, beta)), c, "batch norm")?;
    let xs = x.data();
    let mut xhat = vec![0.0; xs.len()];
    let mut inv_std = Vec::with_capacity(c);
    let mut stats = BatchStats {
        mean: Vec::with_capacity(c),
        var: Vec::with_capacity(c),
    };
    for ch in 0..c {
        let (mean, var) = group_stats(xs, &layout, ch);
        let inv = 1.0 / (var + eps).sqrt();
        layout.for_each(ch, |i| xhat[i] = (xs[i] - mean) * inv);
        inv_std.push(inv);
        stats.mean.push(mean);
        stats.var.push(var);
    }
    let xhat = Tensor::from_parts(x.shape().to_vec(), xhat);
    let y = apply_affine(&xhat, Some((gamma, beta)), aidx);
    Ok((y, NormCache { xhat, inv_std }, stats))
}

pub fn batch_norm_train_backward(
    x: &Tensor,
    cache: &NormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (layout, aidx, c) = batch_layout(x)?;
    Ok(norm_backward(cache, Some(gamma), dy, &layout, aidx, c))
}

/// Eval-mode batch normalization with fixed statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BatchStats,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    x.ensure_finite("batch norm input")?;
    let (_, aidx, c) = batch_layout(x)?;
    check_affine(Some((gamma, beta)), c, "batch norm")?;
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::Shape(format!(
            "running statistics cover {} channels, input has {c}",
            stats.mean.len()
        )));
    }
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = aidx.of(i);
            (v - stats.mean[ch]) * inv_std[ch]
        })
        .collect();
    let xhat = Tensor::from_parts(x.shape().to_vec(), data);
    let y = apply_affine(&xhat, Some((gamma, beta)), aidx);
    Ok((y, NormCache { xhat, inv_std }))
}

pub fn batch_norm_eval_backward(
    x: &Tensor,
    cache: &NormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, aidx, c) = batch_layout(x)?;
    let (xhat, g) = (cache.xhat.data(), dy.data());
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..g.len() {
        let ch = aidx.of(i);
        dgamma[ch] += g[i] * xhat[i];
        dbeta[ch] += g[i];
        dx[i] = g[i] * gamma.data()[ch] * cache.inv_std[ch];
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn instance_norm_two_values() {
        let x = t(&[1, 1, 2], &[2.0, 4.0]);
        let (y, _) = instance_norm(&x, None, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn instance_norm_three_values_direct_arithmetic() {
        // (x - 2) / sqrt(2/3 + 1e-5), population variance 2/3.
        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let (y, _) = instance_norm(&x, None, 1e-5).unwrap();
        let s = (2.0f64 / 3.0 + 1e-5).sqrt();
        let expected = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y.data()[2] - 1.2247).abs() < 1e-3);
    }

    #[test]
    fn instance_norm_is_nearly_idempotent() {
        let x = t(&[1, 1, 4], &[-1.0, 1.0, -1.0, 1.0]);
        let (y, _) = instance_norm(&x, None, 1e-5).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn instance_norm_rejects_bad_input() {
        assert!(instance_norm(&t(&[1, 2], &[1.0, 2.0]), None, 0.0).is_err());
        let mut x = t(&[1, 2], &[1.0, 2.0]);
        x.data_mut()[0] = f64::INFINITY;
        assert!(matches!(
            instance_norm(&x, None, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn batch_norm_standardizes_each_channel() {
        // channel 0: mean 5, var 4
        let x = t(&[4, 1], &[3.0, 7.0, 3.0, 7.0]);
        let (y, _, stats) =
            batch_norm_train(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), 1e-12).unwrap();
        assert_eq!(stats.mean, vec![5.0]);
        assert_eq!(stats.var, vec![4.0]);
        assert!(y.data().iter().all(|v| (v.abs() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn batch_norm_affine_contract() {
        let x = t(&[2, 1], &[-1.0, 1.0]);
        let (y, _, _) = batch_norm_train(
            &x,
            &Tensor::full(&[1], 2.0),
            &Tensor::full(&[1], 3.0),
            1e-12,
        )
        .unwrap();
        let mean = y.sum() / 2.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((mean - 3.0).abs() < 1e-9);
        assert!((var.sqrt() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn batch_norm_train_rejects_single_sample() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let r = batch_norm_train(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 1e-5);
        assert!(matches!(r, Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let g = ConvGeometry {
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let y = conv2d(&x, &w, None, g).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn global_pool_averages_spatial() {
        let x = t(&[1, 2, 2], &[1.0, 3.0, 10.0, 20.0]);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 15.0]);
        assert_eq!(y.shape(), &[1, 2]);
    }
}

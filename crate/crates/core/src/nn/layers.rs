//! Forward and backward kernels for the supported layer kinds.
//!
//! All kernels are plain loops over row-major buffers with a fixed
//! iteration order, so results are bit-reproducible across runs and
//! thread counts. Batch statistics are accumulated in `f64`.

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Resolved conv geometry for one input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }
}

pub(crate) fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) fn dense_forward<S: Scalar>(x: &Tensor<S>, w: &[S], b: &[S], out: usize) -> Tensor<S> {
    let batch = x.batch();
    let in_f = x.numel() / batch.max(1);
    let xd = x.data();
    let mut y = Tensor::zeros(&[batch, out]);
    let yd = y.data_mut();
    for bi in 0..batch {
        let row = &xd[bi * in_f..(bi + 1) * in_f];
        for o in 0..out {
            let wrow = &w[o * in_f..(o + 1) * in_f];
            let mut acc = b[o];
            for i in 0..in_f {
                acc += wrow[i] * row[i];
            }
            yd[bi * out + o] = acc;
        }
    }
    y
}

pub(crate) fn dense_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &[S],
    dy: &Tensor<S>,
    out: usize,
) -> (Vec<S>, Vec<S>, Tensor<S>) {
    let batch = x.batch();
    let in_f = x.numel() / batch.max(1);
    let xd = x.data();
    let dyd = dy.data();
    let mut dw = vec![S::ZERO; out * in_f];
    let mut db = vec![S::ZERO; out];
    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    for bi in 0..batch {
        let row = &xd[bi * in_f..(bi + 1) * in_f];
        let drow = &dyd[bi * out..(bi + 1) * out];
        for o in 0..out {
            let g = drow[o];
            db[o] += g;
            let dwrow = &mut dw[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                dwrow[i] += g * row[i];
            }
        }
        let dxrow = &mut dxd[bi * in_f..(bi + 1) * in_f];
        for o in 0..out {
            let g = drow[o];
            let wrow = &w[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                dxrow[i] += g * wrow[i];
            }
        }
    }
    (dw, db, dx)
}

pub(crate) fn conv2d_forward<S: Scalar>(x: &Tensor<S>, w: &[S], b: &[S], g: &ConvGeom) -> Tensor<S> {
    let batch = x.batch();
    let xd = x.data();
    let mut y = Tensor::zeros(&[batch, g.out_c, g.out_h, g.out_w]);
    let yd = y.data_mut();
    let k = g.kernel;
    for bi in 0..batch {
        for oc in 0..g.out_c {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = b[oc];
                    for ic in 0..g.in_c {
                        for kh in 0..k {
                            let ih = oh * g.stride + kh;
                            if ih < g.pad || ih - g.pad >= g.in_h {
                                continue;
                            }
                            let ih = ih - g.pad;
                            for kw in 0..k {
                                let iw = ow * g.stride + kw;
                                if iw < g.pad || iw - g.pad >= g.in_w {
                                    continue;
                                }
                                let iw = iw - g.pad;
                                let xv = xd[((bi * g.in_c + ic) * g.in_h + ih) * g.in_w + iw];
                                let wv = w[((oc * g.in_c + ic) * k + kh) * k + kw];
                                acc += xv * wv;
                            }
                        }
                    }
                    yd[((bi * g.out_c + oc) * g.out_h + oh) * g.out_w + ow] = acc;
                }
            }
        }
    }
    y
}

pub(crate) fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &[S],
    dy: &Tensor<S>,
    g: &ConvGeom,
) -> (Vec<S>, Vec<S>, Tensor<S>) {
    let batch = x.batch();
    let xd = x.data();
    let dyd = dy.data();
    let k = g.kernel;
    let mut dw = vec![S::ZERO; g.weight_len()];
    let mut db = vec![S::ZERO; g.out_c];
    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    for bi in 0..batch {
        for oc in 0..g.out_c {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let gy = dyd[((bi * g.out_c + oc) * g.out_h + oh) * g.out_w + ow];
                    db[oc] += gy;
                    for ic in 0..g.in_c {
                        for kh in 0..k {
                            let ih = oh * g.stride + kh;
                            if ih < g.pad || ih - g.pad >= g.in_h {
                                continue;
                            }
                            let ih = ih - g.pad;
                            for kw in 0..k {
                                let iw = ow * g.stride + kw;
                                if iw < g.pad || iw - g.pad >= g.in_w {
                                    continue;
                                }
                                let iw = iw - g.pad;
                                let xi = ((bi * g.in_c + ic) * g.in_h + ih) * g.in_w + iw;
                                let wi = ((oc * g.in_c + ic) * k + kh) * k + kw;
                                dw[wi] += gy * xd[xi];
                                dxd[xi] += gy * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

pub(crate) fn maxpool_forward<S: Scalar>(
    x: &Tensor<S>,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> (Tensor<S>, Vec<usize>) {
    let batch = x.batch();
    let c = x.sample_shape()[0];
    let in_h = x.sample_shape()[1];
    let in_w = x.sample_shape()[2];
    let xd = x.data();
    let mut y = Tensor::zeros(&[batch, c, out_h, out_w]);
    let mut argmax = vec![0usize; y.numel()];
    let yd = y.data_mut();
    for bi in 0..batch {
        for ci in 0..c {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut best_idx = usize::MAX;
                    let mut best = S::ZERO;
                    for kh in 0..kernel {
                        let ih = oh * stride + kh;
                        if ih >= in_h {
                            continue;
                        }
                        for kw in 0..kernel {
                            let iw = ow * stride + kw;
                            if iw >= in_w {
                                continue;
                            }
                            let idx = ((bi * c + ci) * in_h + ih) * in_w + iw;
                            // first maximum wins on ties, keeping backward routing deterministic
                            if best_idx == usize::MAX || xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oi = ((bi * c + ci) * out_h + oh) * out_w + ow;
                    yd[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }
    (y, argmax)
}

pub(crate) fn maxpool_backward<S: Scalar>(
    dy: &Tensor<S>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Tensor<S> {
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (o, &src) in argmax.iter().enumerate() {
        dxd[src] += dy.data()[o];
    }
    dx
}

pub(crate) fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < S::ZERO {
            *v = S::ZERO;
        }
    }
    y
}

pub(crate) fn relu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= S::ZERO {
            *g = S::ZERO;
        }
    }
    dx
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Per-channel view of the batch-norm parameter block:
/// `[gamma | beta | running_mean | running_var]`, each of length `channels`.
pub(crate) fn bn_channels(sample_shape: &[usize]) -> usize {
    sample_shape[0]
}

pub(crate) struct BnCache<S> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
}

/// Iterates channel elements of a `[B, C, ...]` tensor in a fixed order.
fn per_channel<S: Scalar>(x: &Tensor<S>, ch: usize, mut f: impl FnMut(usize)) {
    let batch = x.batch();
    let channels = x.sample_shape()[0];
    let inner: usize = x.sample_shape()[1..].iter().product();
    for bi in 0..batch {
        let base = (bi * channels + ch) * inner;
        for i in 0..inner {
            f(base + i);
        }
    }
}

pub(crate) fn bn_forward_train<S: Scalar>(
    x: &Tensor<S>,
    params: &mut [S],
    channels: usize,
) -> (Tensor<S>, BnCache<S>) {
    let m = (x.numel() / channels) as f64;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![S::ZERO; channels];
    for ch in 0..channels {
        let mut sum = 0.0f64;
        per_channel(x, ch, |i| sum += x.data()[i].to_f64());
        let mean = sum / m;
        let mut sq = 0.0f64;
        per_channel(x, ch, |i| {
            let d = x.data()[i].to_f64() - mean;
            sq += d * d;
        });
        let var = sq / m;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = S::from_f64(istd);
        let gamma = params[ch];
        let beta = params[channels + ch];
        let (mean_s, istd_s) = (S::from_f64(mean), S::from_f64(istd));
        per_channel(x, ch, |i| {
            let xh = (x.data()[i] - mean_s) * istd_s;
            xhat.data_mut()[i] = xh;
            y.data_mut()[i] = gamma * xh + beta;
        });
        // running statistics live in the same parameter block and are
        // aggregated alongside weights
        let rm = params[2 * channels + ch].to_f64();
        let rv = params[3 * channels + ch].to_f64();
        params[2 * channels + ch] = S::from_f64((1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean);
        params[3 * channels + ch] = S::from_f64((1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * var);
    }
    (y, BnCache { xhat, inv_std })
}

pub(crate) fn bn_forward_eval<S: Scalar>(x: &Tensor<S>, params: &[S], channels: usize) -> Tensor<S> {
    let mut y = Tensor::zeros(x.shape());
    for ch in 0..channels {
        let gamma = params[ch];
        let beta = params[channels + ch];
        let mean = params[2 * channels + ch];
        let var = params[3 * channels + ch].to_f64();
        let istd = S::from_f64(1.0 / (var + BN_EPS).sqrt());
        per_channel(x, ch, |i| {
            y.data_mut()[i] = gamma * (x.data()[i] - mean) * istd + beta;
        });
    }
    y
}

pub(crate) fn bn_backward<S: Scalar>(
    cache: &BnCache<S>,
    params: &[S],
    channels: usize,
    dy: &Tensor<S>,
) -> (Vec<S>, Tensor<S>) {
    let m = dy.numel() / channels;
    let m_s = S::from_f64(m as f64);
    let mut grad = vec![S::ZERO; 4 * channels];
    let mut dx = Tensor::zeros(dy.shape());
    for ch in 0..channels {
        let mut dbeta = S::ZERO;
        let mut dgamma = S::ZERO;
        per_channel(dy, ch, |i| {
            dbeta += dy.data()[i];
            dgamma += dy.data()[i] * cache.xhat.data()[i];
        });
        grad[ch] = dgamma;
        grad[channels + ch] = dbeta;
        // running-statistics slots receive no gradient
        let scale = params[ch] * cache.inv_std[ch] / m_s;
        per_channel(dy, ch, |i| {
            dx.data_mut()[i] =
                scale * (m_s * dy.data()[i] - dbeta - cache.xhat.data()[i] * dgamma);
        });
    }
    (grad, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_dim_matches_closed_form() {
        assert_eq!(conv_output_dim(28, 5, 1, 0), Some(24));
        assert_eq!(conv_output_dim(24, 2, 2, 0), Some(12));
        assert_eq!(conv_output_dim(3, 5, 1, 0), None);
        assert_eq!(conv_output_dim(28, 5, 1, 2), Some(28));
    }

    #[test]
    fn maxpool_routes_gradient_to_first_max() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 1.0, 0.0, 0.0]);
        let (y, arg) = maxpool_forward(&x, 2, 2, 1, 1);
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(arg, vec![0]);
    }
}

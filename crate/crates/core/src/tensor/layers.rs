use super::{Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// `y = x · wᵀ + b` over the last axis. `w` is `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (out_dim, in_dim) = w.dims2()?;
    let last = *x.shape().last().unwrap_or(&0);
    if last != in_dim || b.len() != out_dim {
        return Err(Error::shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let rows = x.len() / in_dim.max(1);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    let mut y = vec![0.0; rows * out_dim];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for r in 0..rows {
        let xr = &xd[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &wd[o * in_dim..(o + 1) * in_dim];
            *yo = bd[o] + dot(xr, wr);
        }
    }
    Tensor::from_vec(&shape, y)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (out_dim, in_dim) = w.dims2()?;
    let rows = x.len() / in_dim.max(1);
    if dy.len() != rows * out_dim {
        return Err(Error::shape("linear backward: gradient shape"));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[out_dim]);
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    for r in 0..rows {
        let xr = &xd[r * in_dim..(r + 1) * in_dim];
        let gr = &gd[r * out_dim..(r + 1) * out_dim];
        let dxr = &mut dx.data_mut()[r * in_dim..(r + 1) * in_dim];
        for (o, &g) in gr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, &wd[o * in_dim..(o + 1) * in_dim], dxr);
        }
        for (o, &g) in gr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db.data_mut()[o] += g;
            axpy(g, xr, &mut dw.data_mut()[o * in_dim..(o + 1) * in_dim]);
        }
    }
    Ok((dx, dw, db))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler keep independent FMA chains
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || size + 2 * pad < k {
        return Err(Error::shape(format!(
            "conv: extent {size} with kernel {k}, stride {stride}, pad {pad}"
        )));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

/// Valid output-column range for kernel column `kx`.
#[inline]
fn col_range(kx: usize, pad: usize, stride: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    // ix = ox*stride + kx - pad must lie in [0, in_w)
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi = if in_w + pad > kx {
        ((in_w + pad - kx - 1) / stride + 1).min(out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation of `x [C,H,W]` with `w [Co,C,kh,kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c, h, wd) = x.dims3()?;
    let (co, ci, kh, kw) = match w.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape(format!("conv weight {:?}", w.shape()))),
    };
    if ci != c || b.len() != co {
        return Err(Error::shape(format!(
            "conv: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let oh = conv_out(h, kh, stride, pad)?;
    let ow = conv_out(wd, kw, stride, pad)?;
    let mut out = vec![0.0; co * oh * ow];
    let (xd, wdat) = (x.data(), w.data());
    for o in 0..co {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b.data()[o]);
        for i in 0..c {
            let xin = &xd[i * h * wd..(i + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[((o * ci + i) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = col_range(kx, pad, stride, wd, ow);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let off = lo + kx - pad;
                            axpy(wv, &xrow[off..off + (hi - lo)], &mut orow[lo..hi]);
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co, oh, ow], out)
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, wd) = x.dims3()?;
    let (co, ci, kh, kw) = match w.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape(format!("conv weight {:?}", w.shape()))),
    };
    let oh = conv_out(h, kh, stride, pad)?;
    let ow = conv_out(wd, kw, stride, pad)?;
    if dy.shape() != [co, oh, ow] {
        return Err(Error::shape(format!(
            "conv backward: gradient {:?}, expected {:?}",
            dy.shape(),
            [co, oh, ow]
        )));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let (xd, wdat, gd) = (x.data(), w.data(), dy.data());
    for o in 0..co {
        let gplane = &gd[o * oh * ow..(o + 1) * oh * ow];
        db.data_mut()[o] = gplane.iter().sum();
        for i in 0..c {
            let xin = &xd[i * h * wd..(i + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * ci + i) * kh + ky) * kw + kx;
                    let wv = wdat[widx];
                    let (lo, hi) = col_range(kx, pad, stride, wd, ow);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let xrow = &xin[iy * wd..(iy + 1) * wd];
                        let dxrow = &mut dx.data_mut()[(i * h + iy) * wd..(i * h + iy + 1) * wd];
                        if stride == 1 {
                            let off = lo + kx - pad;
                            let n = hi - lo;
                            acc += dot(&grow[lo..hi], &xrow[off..off + n]);
                            axpy(wv, &grow[lo..hi], &mut dxrow[off..off + n]);
                        } else {
                            for ox in lo..hi {
                                let ix = ox * stride + kx - pad;
                                acc += grow[ox] * xrow[ix];
                                dxrow[ix] += wv * grow[ox];
                            }
                        }
                    }
                    dw.data_mut()[widx] = acc;
                }
            }
        }
    }
    Ok((dx, dw, db))
}

pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let mut out = vec![0.0; c * 4 * h * w];
    let xd = x.data();
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + xx] = xd[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[c, 2 * h, 2 * w], out)
}

pub fn upsample_nearest2x_backward(dy: &Tensor) -> Result<Tensor> {
    let (c, h2, w2) = dy.dims3()?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape("upsample backward: odd gradient extent"));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![0.0; c * h * w];
    let gd = dy.data();
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                dx[(ch * h + y / 2) * w + x / 2] += gd[(ch * h2 + y) * w2 + x];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], dx)
}

/// 2×2 average pooling; extents must be even.
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("downsample of odd extent {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let xd = x.data();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * oh + y / 2) * ow + xx / 2] += 0.25 * xd[(ch * h + y) * w + xx];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn avg_pool2x_backward(dy: &Tensor) -> Result<Tensor> {
    let up = upsample_nearest2x(dy)?;
    let mut up = up;
    up.scale(0.25);
    Ok(up)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Gradient of SiLU given its input `x`.
pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Concatenate `[C_i,H,W]` tensors along channels.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let (_, h, w) = parts
        .first()
        .ok_or_else(|| Error::shape("concat of nothing"))?
        .dims3()?;
    let mut c = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pc, ph, pw) = p.dims3()?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(format!(
                "concat: spatial {ph}x{pw} vs {h}x{w}"
            )));
        }
        c += pc;
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(x: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (c, h, w) = x.dims3()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::shape("split: channel count"));
    }
    let mut off = 0;
    channels
        .iter()
        .map(|&n| {
            let t = Tensor::from_vec(&[n, h, w], x.data()[off * h * w..(off + n) * h * w].to_vec());
            off += n;
            t
        })
        .collect()
}

/// Fully connected layer backed by two registered parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut y = linear(x, store.value(self.w), store.value(self.b))?;
        store.precision().apply(&mut y);
        Ok(y)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let (dx, dw, db) = linear_backward(x, store.value(self.w), dy)?;
        grads.get_mut(self.w).add_assign(&dw);
        grads.get_mut(self.b).add_assign(&db);
        Ok(dx)
    }
}

/// Convolution, optionally followed by SiLU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub act: bool,
}

/// Activations saved by [`Conv2d::forward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub input: Tensor,
    pub pre_act: Tensor,
}

impl Conv2d {
    /// Same-padded convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        act: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            Tensor::zeros(&[cout, cin, kernel, kernel]),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2d {
            w,
            b,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            act,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        if self.stride == 2 {
            let (_, h, w) = x.dims3()?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!("downsample of odd extent {h}x{w}")));
            }
        }
        let mut pre = conv2d(
            x,
            store.value(self.w),
            store.value(self.b),
            self.stride,
            self.pad,
        )?;
        store.precision().apply(&mut pre);
        let mut y = if self.act { silu(&pre) } else { pre.clone() };
        store.precision().apply(&mut y);
        Ok((
            y,
            ConvCache {
                input: x.clone(),
                pre_act: pre,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let dpre = if self.act {
            silu_backward(&cache.pre_act, dy)
        } else {
            dy.clone()
        };
        let (dx, dw, db) = conv2d_backward(
            &cache.input,
            store.value(self.w),
            &dpre,
            self.stride,
            self.pad,
        )?;
        grads.get_mut(self.w).add_assign(&dw);
        grads.get_mut(self.b).add_assign(&db);
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Precision};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);

        let b = Tensor::from_vec(&[2], vec![0.25, -1.0]).unwrap();
        let w = Tensor::full(&[2, 3], 7.0);
        let y = linear(&Tensor::zeros(&[4, 3]), &w, &b).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), b.data());
        }
        assert!(linear(&x, &Tensor::zeros(&[2, 4]), &b).is_err());
    }

    #[test]
    fn conv_identity_and_box_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 4, 5]);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap(), x);

        let ones = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&ones, &k, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_output_extent() {
        let x = Tensor::zeros(&[2, 9, 7]);
        for (k, s, p) in [(3, 2, 1), (7, 1, 3), (1, 1, 0), (3, 3, 0)] {
            let w = Tensor::zeros(&[1, 2, k, k]);
            let y = conv2d(&x, &w, &Tensor::zeros(&[1]), s, p).unwrap();
            assert_eq!(y.shape()[1], (9 + 2 * p - k) / s + 1);
            assert_eq!(y.shape()[2], (7 + 2 * p - k) / s + 1);
        }
        let w = Tensor::zeros(&[1, 2, 11, 11]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).is_err());
    }

    /// Direct sum oracle, independent of the row-sliced kernel.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
        let (c, h, wd) = x.dims3().unwrap();
        let sh = w.shape();
        let (co, kh, kw) = (sh[0], sh[2], sh[3]);
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for i in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((o * c + i) * kh + ky) * kw + kx]
                                        * x.data()[(i * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, s, h, w) in [(1, 1, 6, 5), (3, 1, 6, 5), (3, 2, 6, 5), (7, 1, 6, 5), (7, 2, 6, 5), (7, 1, 2, 2)] {
            let x = rand_tensor(&mut rng, &[3, h, w]);
            let w = rand_tensor(&mut rng, &[2, 3, k, k]);
            let b = rand_tensor(&mut rng, &[2]);
            let fast = conv2d(&x, &w, &b, s, k / 2).unwrap();
            let slow = conv_naive(&x, &w, &b, s, k / 2);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_and_pool() {
        let x = Tensor::full(&[1, 1, 1], 5.0);
        let y = upsample_nearest2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|v| *v == 5.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let back = avg_pool2x(&upsample_nearest2x(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(avg_pool2x(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn conv_layer_rejects_odd_downsample() {
        let mut store = ParamStore::new(Precision::Double);
        let conv = Conv2d::new(&mut store, "down", 1, 1, 3, 2, false);
        assert!(conv.forward(&store, &Tensor::zeros(&[1, 5, 4])).is_err());
        assert!(conv.forward(&store, &Tensor::zeros(&[1, 6, 4])).is_ok());
    }

    #[test]
    fn linear_gradcheck_3x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[2, 4]);
        let b = rand_tensor(&mut rng, &[2]);
        let r = rand_tensor(&mut rng, &[3, 2]);
        let (dx, dw, _) = linear_backward(&x, &w, &r).unwrap();
        let mut wv = w.data().to_vec();
        let err = grad_check(&mut wv, dw.data(), 1e-3, |v| {
            let w = Tensor::from_vec(&[2, 4], v.to_vec()).unwrap();
            linear(&x, &w, &b).unwrap().dot(&r)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let mut xv = x.data().to_vec();
        let err = grad_check(&mut xv, dx.data(), 1e-3, |v| {
            let x = Tensor::from_vec(&[3, 4], v.to_vec()).unwrap();
            linear(&x, &w, &b).unwrap().dot(&r)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn silu_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[10]);
        let r = rand_tensor(&mut rng, &[10]);
        let dx = silu_backward(&x, &r);
        let mut xv = x.data().to_vec();
        let err = grad_check(&mut xv, dx.data(), 1e-5, |v| {
            silu(&Tensor::from_vec(&[10], v.to_vec()).unwrap()).dot(&r)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn concat_split_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[2, 3, 2]);
        let b = rand_tensor(&mut rng, &[1, 3, 2]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 3, 2]);
        let parts = split_channels(&c, &[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat_channels(&[&a, &Tensor::zeros(&[1, 2, 2])]).is_err());
    }
}

//! Convolution and pooling kernels (forward and adjoint passes).
//!
//! Convolutions lower to GEMM through an im2col expansion per batch item.
//! Every reduction runs in a fixed order, so results are reproducible
//! bit-for-bit for a given build.

use super::{matmul, Real, Tensor};
use crate::error::{Error, Result};

/// Output size and leading pad of a "same"-padded window: the output has
/// `ceil(len / stride)` positions and any odd total padding goes after.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let plane = self.col_cols();
        for c in 0..self.c {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.ph as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pw as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let plane = self.col_cols();
        for c in 0..self.c {
            let dxc = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dxc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + j) as isize - self.pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize) -> Result<ConvGeom> {
    let (_, c, h, w) = x.dims4()?;
    let (f, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::dim(format!(
            "conv2d: input has {c} channels, weight expects {wc}"
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::dim(format!(
            "conv2d: bias shape {:?} does not match {f} filters",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Parameter("conv2d: stride must be positive".into()));
    }
    let (ho, ph) = same_padding(h, kh, stride);
    let (wo, pw) = same_padding(w, kw, stride);
    Ok(ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        ho,
        wo,
        ph,
        pw,
    })
}

/// Same-padded 2-D convolution.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let g = conv_geom(x, weight, bias, stride)?;
    let n = x.shape()[0];
    let f = weight.shape()[0];
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); n * f * cols];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    let in_len = g.c * g.h * g.w;
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let yb = &mut out[b * f * cols..(b + 1) * f * cols];
        for (fi, chunk) in yb.chunks_mut(cols).enumerate() {
            chunk.fill(bias.data()[fi]);
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut col);
            &col
        };
        matmul(f, rows, cols, weight.data(), false, src, false, T::one(), yb);
    }
    Tensor::new(vec![n, f, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geom(x, weight, bias, stride)?;
    let n = x.shape()[0];
    let f = weight.shape()[0];
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); f];
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let dyb = &dy.data()[b * f * cols..(b + 1) * f * cols];
        for (fi, chunk) in dyb.chunks(cols).enumerate() {
            db[fi] = db[fi] + chunk.iter().fold(T::zero(), |a, &v| a + v);
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut col);
            &col
        };
        matmul(f, cols, rows, dyb, false, src, true, T::one(), &mut dw);
        if need_dx {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                matmul(rows, f, cols, weight.data(), true, dyb, false, T::zero(), dxb);
            } else {
                matmul(rows, f, cols, weight.data(), true, dyb, false, T::zero(), &mut col);
                g.col2im(&col, dxb);
            }
        }
    }
    Ok(ConvGrads {
        dx: if need_dx {
            Some(Tensor::new(x.shape().to_vec(), dx)?)
        } else {
            None
        },
        dw: Tensor::new(weight.shape().to_vec(), dw)?,
        db: Tensor::new(vec![f], db)?,
    })
}

fn transposed_dims<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (wc, f, kh, kw) = weight.dims4()?;
    if wc != c || kh != 2 || kw != 2 {
        return Err(Error::dim(format!(
            "transposed_conv2d: weight {:?} incompatible with {c} input channels (expected [{c}, F, 2, 2])",
            weight.shape()
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::dim(format!(
            "transposed_conv2d: bias shape {:?} does not match {f} filters",
            bias.shape()
        )));
    }
    Ok((n, c, h, w, f))
}

/// 2x2 stride-2 transposed convolution, the adjoint of a 2x2 stride-2 convolution.
pub fn conv_transpose2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w, f) = transposed_dims(x, weight, bias)?;
    let hw = h * w;
    let f4 = f * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * f * oh * ow];
    let mut ycol = vec![T::zero(); f4 * hw];
    for b in 0..n {
        let xb = &x.data()[b * c * hw..(b + 1) * c * hw];
        matmul(f4, c, hw, weight.data(), true, xb, false, T::zero(), &mut ycol);
        let yb = &mut out[b * f * oh * ow..(b + 1) * f * oh * ow];
        for fi in 0..f {
            let bv = bias.data()[fi];
            let plane = &mut yb[fi * oh * ow..(fi + 1) * oh * ow];
            for a in 0..2 {
                for e in 0..2 {
                    let src = &ycol[(fi * 4 + a * 2 + e) * hw..(fi * 4 + a * 2 + e + 1) * hw];
                    for i in 0..h {
                        let row = &mut plane[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        for j in 0..w {
                            row[2 * j + e] = src[i * w + j] + bv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out)
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w, f) = transposed_dims(x, weight, bias)?;
    let hw = h * w;
    let f4 = f * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); f];
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dycol = vec![T::zero(); f4 * hw];
    for b in 0..n {
        let dyb = &dy.data()[b * f * oh * ow..(b + 1) * f * oh * ow];
        for fi in 0..f {
            let plane = &dyb[fi * oh * ow..(fi + 1) * oh * ow];
            db[fi] = db[fi] + plane.iter().fold(T::zero(), |acc, &v| acc + v);
            for a in 0..2 {
                for e in 0..2 {
                    let dst = &mut dycol[(fi * 4 + a * 2 + e) * hw..(fi * 4 + a * 2 + e + 1) * hw];
                    for i in 0..h {
                        let row = &plane[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        for j in 0..w {
                            dst[i * w + j] = row[2 * j + e];
                        }
                    }
                }
            }
        }
        let xb = &x.data()[b * c * hw..(b + 1) * c * hw];
        matmul(c, hw, f4, xb, false, &dycol, true, T::one(), &mut dw);
        if need_dx {
            let dxb = &mut dx[b * c * hw..(b + 1) * c * hw];
            matmul(c, f4, hw, weight.data(), false, &dycol, false, T::zero(), dxb);
        }
    }
    Ok(ConvGrads {
        dx: if need_dx {
            Some(Tensor::new(x.shape().to_vec(), dx)?)
        } else {
            None
        },
        dw: Tensor::new(weight.shape().to_vec(), dw)?,
        db: Tensor::new(vec![f], db)?,
    })
}

/// 2x2 max pooling. Stride 2 halves even dims; stride 1 keeps dims, and
/// windows ignore out-of-bounds positions. Returns the output and, per output
/// element, the flat input index of the window maximum (first on ties).
pub fn maxpool2d<T: Real>(x: &Tensor<T>, stride: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    match stride {
        1 => {}
        2 if h % 2 == 0 && w % 2 == 0 => {}
        2 => {
            return Err(Error::dim(format!(
                "maxpool2d: stride 2 needs even dims, got {h}x{w}"
            )))
        }
        _ => {
            return Err(Error::Parameter(format!(
                "maxpool2d: stride must be 1 or 2, got {stride}"
            )))
        }
    }
    let (ho, ph) = same_padding(h, 2, stride);
    let (wo, pw) = same_padding(w, 2, stride);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for i in 0..2 {
                    let iy = (oy * stride + i) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..2 {
                        let ix = (ox * stride + j) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct zero-padded convolution used as an oracle.
    fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (f, _, kh, kw) = w.dims4().unwrap();
        let (ho, ph) = same_padding(h, kh, stride);
        let (wo, pw) = same_padding(wd, kw, stride);
        let mut out = Tensor::zeros(&[n, f, ho, wo]);
        for bi in 0..n {
            for fi in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[fi];
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - ph as isize;
                                    let ix = (ox * stride + j) as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((fi * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                        out.data_mut()[((bi * f + fi) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn same_padding_matches_keras() {
        assert_eq!(same_padding(8, 3, 1), (8, 1));
        assert_eq!(same_padding(8, 3, 2), (4, 0));
        assert_eq!(same_padding(8, 2, 2), (4, 0));
        assert_eq!(same_padding(8, 2, 1), (8, 0));
        assert_eq!(same_padding(7, 3, 2), (4, 1));
        assert_eq!(same_padding(256, 3, 2), (128, 0));
    }

    #[test]
    fn pointwise_identity() {
        let x = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 - 4.0);
        let y = conv2d(&x, &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_on_2x2() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn stride_two_shape() {
        let x = Tensor::<f32>::zeros(&[1, 1, 256, 256]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 128, 128]);
    }

    #[test]
    fn im2col_matches_direct_oracle() {
        let mut rng = crate::tensor::Rng::new(3);
        for &(k, stride, h) in &[(3usize, 1usize, 7usize), (3, 2, 8), (3, 2, 7), (1, 1, 5), (2, 2, 6)] {
            let x = Tensor::from_fn(&[2, 3, h, h + 1], |_| rng.normal());
            let w = Tensor::from_fn(&[4, 3, k, k], |_| rng.normal());
            let b = Tensor::from_fn(&[4], |_| rng.normal());
            let fast = conv2d(&x, &w, &b, stride).unwrap();
            let slow = conv_direct(&x, &w, &b, stride);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-10 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_scatter() {
        let x = t(&[1, 1, 1, 1], &[3.0]);
        let w = Tensor::full(&[1, 1, 2, 2], 0.5);
        let y = conv_transpose2d(&x, &w, &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.5; 4]);

        let z = conv_transpose2d(&Tensor::zeros(&[1, 2, 8, 8]), &Tensor::full(&[2, 3, 2, 2], 1.0), &t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(z.shape(), &[1, 3, 16, 16]);
        assert!(z.data()[..256].iter().all(|&v| v == 1.0));
        assert!(z.data()[512..].iter().all(|&v| v == 3.0));
    }

    #[test]
    fn transposed_is_adjoint_of_strided_conv() {
        // <conv(x), y> == <x, conv^T(y)> for a 2x2 stride-2 kernel without bias.
        let mut rng = crate::tensor::Rng::new(11);
        let (c, f) = (3, 2);
        let x = Tensor::from_fn(&[1, f, 8, 8], |_| rng.normal());
        let y = Tensor::from_fn(&[1, c, 4, 4], |_| rng.normal());
        // conv weight [c_out=c, c_in=f, 2, 2]; transposed weight [c_in=c, c_out=f, 2, 2] with the same storage.
        let wdata: Vec<f64> = (0..c * f * 4).map(|_| rng.normal()).collect();
        let wconv = t(&[c, f, 2, 2], &wdata);
        let wtr = t(&[c, f, 2, 2], &wdata);
        let cx = conv2d(&x, &wconv, &Tensor::zeros(&[c]), 2).unwrap();
        let ty = conv_transpose2d(&y, &wtr, &Tensor::zeros(&[f])).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn maxpool_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let (y1, _) = maxpool2d(&x, 1).unwrap();
        assert_eq!(y1.data(), &[4.0, 4.0, 4.0, 4.0]);

        let neg = t(&[1, 1, 2, 2], &[-5.0, -6.0, -7.0, -8.0]);
        let (y1, _) = maxpool2d(&neg, 1).unwrap();
        // padding never wins, even for negative inputs
        assert_eq!(y1.data(), &[-5.0, -6.0, -7.0, -8.0]);

        let flat = Tensor::full(&[1, 2, 4, 4], 2.5);
        assert!(maxpool2d(&flat, 1).unwrap().0.data().iter().all(|&v| v == 2.5));
        assert!(maxpool2d(&flat, 2).unwrap().0.data().iter().all(|&v| v == 2.5));
        assert!(maxpool2d(&Tensor::<f64>::zeros(&[1, 1, 3, 4]), 2).is_err());
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let (_, arg) = maxpool2d(&x, 2).unwrap();
        assert_eq!(arg, vec![0]);
    }
}

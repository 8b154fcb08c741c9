//! Strided 2-D convolution and transposed convolution via im2col/col2im.
//!
//! Layout convention: activations are (N, C, H, W); im2col matrices are
//! (C*kh*kw, N*OH*OW) so each layer reduces to one dgemm per pass.

use ndarray::{Array2, Array4, ArrayView2, Ix2};
use rand_chacha::ChaCha8Rng;

use super::{init::kaiming_uniform, Param, Parameterized};

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Gather patches of `x` into a (C*kh*kw, N*OH*OW) matrix.
fn im2col(x: &Array4<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, n * oh * ow));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().unwrap();
    let col_w = n * oh * ow;
    for ni in 0..n {
        for ci in 0..c {
            let x_base = (ni * c + ci) * h * w;
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oi in 0..oh {
                        let ih = (oi * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_base = row * col_w + (ni * oh + oi) * ow;
                        let src_base = x_base + ih as usize * w;
                        for oj in 0..ow {
                            let iw = (oj * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cs[dst_base + oj] = xs[src_base + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add columns back into an (N, C, H, W) array; exact adjoint of
/// [`im2col`] with the same geometry.
fn col2im(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("contiguous cols");
    let col_w = n * oh * ow;
    for ni in 0..n {
        for ci in 0..c {
            let x_base = (ni * c + ci) * h * w;
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oi in 0..oh {
                        let ih = (oi * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_base = row * col_w + (ni * oh + oi) * ow;
                        let dst_base = x_base + ih as usize * w;
                        for oj in 0..ow {
                            let iw = (oj * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            xs[dst_base + iw as usize] += cs[src_base + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// (N, C, H, W) -> (C, N*H*W) with columns ordered (n, h, w).
fn to_chan_mat(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let mut m = Array2::<f64>::zeros((c, n * hw));
    let xs = x.as_slice().unwrap();
    let ms = m.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * hw;
            let dst = ci * (n * hw) + ni * hw;
            ms[dst..dst + hw].copy_from_slice(&xs[src..src + hw]);
        }
    }
    m
}

/// Inverse of [`to_chan_mat`].
fn from_chan_mat(m: &Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    let hw = h * w;
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    let ms = m.as_slice().unwrap();
    let xs = x.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let src = ci * (n * hw) + ni * hw;
            let dst = (ni * c + ci) * hw;
            xs[dst..dst + hw].copy_from_slice(&ms[src..src + hw]);
        }
    }
    x
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param, // (out_c, in_c*kh*kw)
    pub b: Param, // (out_c,)
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Saved activations needed by the backward pass.
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            w: Param::new(
                format!("{name}.w"),
                kaiming_uniform(rng, &[out_c, fan_in], fan_in),
            ),
            b: Param::new(format!("{name}.b"), kaiming_uniform(rng, &[out_c], fan_in)),
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    fn w2(&self) -> ArrayView2<'_, f64> {
        self.w.value.view().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn out_size(&self, h: usize) -> usize {
        conv_out(h, self.k, self.stride, self.pad)
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv input channels");
        let oh = conv_out(h, self.k, self.stride, self.pad);
        let ow = conv_out(w, self.k, self.stride, self.pad);
        let cols = im2col(x, self.k, self.k, self.stride, self.pad);
        let mut y_mat = self.w2().dot(&cols); // (out_c, N*OH*OW)
        for (co, mut row) in y_mat.rows_mut().into_iter().enumerate() {
            let bv = self.b.value[co];
            row.mapv_inplace(|v| v + bv);
        }
        let y = from_chan_mat(&y_mat, n, self.out_c, oh, ow);
        (
            y,
            ConvCache {
                cols,
                in_shape: (n, c, h, w),
            },
        )
    }

    /// Accumulates dW, db; returns dx.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = cache.in_shape;
        let (_, _, oh, ow) = dy.dim();
        let dy_mat = to_chan_mat(dy); // (out_c, N*OH*OW)
        let dw = dy_mat.dot(&cache.cols.t()); // (out_c, in_c*k*k)
        let db = dy_mat.sum_axis(ndarray::Axis(1));
        self.w.grad += &dw.into_dyn();
        self.b.grad += &db.into_dyn();
        let dcols = self.w2().t().dot(&dy_mat);
        col2im(
            &dcols,
            n,
            c,
            h,
            w,
            self.k,
            self.k,
            self.stride,
            self.pad,
            oh,
            ow,
        )
    }
}

impl Parameterized for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Param, // (in_c, out_c*kh*kw)
    pub b: Param, // (out_c,)
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvTransposeCache {
    x_mat: Array2<f64>, // (in_c, N*H*W)
    in_shape: (usize, usize, usize, usize),
}

impl ConvTranspose2d {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        ConvTranspose2d {
            w: Param::new(
                format!("{name}.w"),
                kaiming_uniform(rng, &[in_c, out_c * k * k], fan_in),
            ),
            b: Param::new(format!("{name}.b"), kaiming_uniform(rng, &[out_c], fan_in)),
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    fn w2(&self) -> ArrayView2<'_, f64> {
        self.w.value.view().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h - 1) * self.stride + self.k - 2 * self.pad
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Array4<f64>) -> (Array4<f64>, ConvTransposeCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "deconv input channels");
        let oh = self.out_size(h);
        let ow = self.out_size(w);
        let x_mat = to_chan_mat(x);
        let cols = self.w2().t().dot(&x_mat); // (out_c*k*k, N*H*W)
        let mut y = col2im(
            &cols,
            n,
            self.out_c,
            oh,
            ow,
            self.k,
            self.k,
            self.stride,
            self.pad,
            h,
            w,
        );
        for ni in 0..n {
            for co in 0..self.out_c {
                let bv = self.b.value[co];
                y.index_axis_mut(ndarray::Axis(0), ni)
                    .index_axis_mut(ndarray::Axis(0), co)
                    .mapv_inplace(|v| v + bv);
            }
        }
        (
            y,
            ConvTransposeCache {
                x_mat,
                in_shape: (n, c, h, w),
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvTransposeCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = cache.in_shape;
        // Gathering patches of dy with the same geometry recovers exactly the
        // positions the forward pass scattered to.
        let dcols = im2col(dy, self.k, self.k, self.stride, self.pad); // (out_c*k*k, N*H*W)
        let dw = cache.x_mat.dot(&dcols.t()); // (in_c, out_c*k*k)
        let db = to_chan_mat(dy).sum_axis(ndarray::Axis(1));
        self.w.grad += &dw.into_dyn();
        self.b.grad += &db.into_dyn();
        let dx_mat = self.w2().dot(&dcols); // (in_c, N*H*W)
        from_chan_mat(&dx_mat, n, c, h, w)
    }
}

impl Parameterized for ConvTranspose2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    /// Direct nested-loop convolution, the oracle for the im2col path.
    fn conv_reference(x: &Array4<f64>, layer: &Conv2d) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let oh = layer.out_size(h);
        let ow = layer.out_size(w);
        let mut y = Array4::<f64>::zeros((n, layer.out_c, oh, ow));
        for ni in 0..n {
            for co in 0..layer.out_c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = layer.b.value[co];
                        for ci in 0..layer.in_c {
                            for ki in 0..layer.k {
                                for kj in 0..layer.k {
                                    let ih = (oi * layer.stride + ki) as isize - layer.pad as isize;
                                    let iw = (oj * layer.stride + kj) as isize - layer.pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    let widx = (ci * layer.k + ki) * layer.k + kj;
                                    acc += layer.w.value[[co, widx]]
                                        * x[[ni, ci, ih as usize, iw as usize]];
                                }
                            }
                        }
                        y[[ni, co, oi, oj]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_reference() {
        let mut rng = derive_rng(11, "conv-ref");
        let layer = Conv2d::new("c", 3, 5, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let fast = layer.forward(&x);
        let slow = conv_reference(&x, &layer);
        let max_diff = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = derive_rng(12, "conv-fd");
        let mut layer = Conv2d::new("c", 2, 3, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let dy_shape = layer.forward(&x).raw_dim();
        let dy = Array4::from_shape_fn(
            (dy_shape[0], dy_shape[1], dy_shape[2], dy_shape[3]),
            |_| rng.gen_range(-1.0..1.0),
        );

        let (_, cache) = layer.forward_train(&x);
        let dx = layer.backward(&cache, &dy);

        let loss = |l: &Conv2d, x: &Array4<f64>| (&l.forward(x) * &dy).sum();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!(
                (dx.as_slice().unwrap()[i] - fd).abs() < 1e-6,
                "dx[{i}]: {} vs {}",
                dx.as_slice().unwrap()[i],
                fd
            );
        }
        for i in 0..layer.w.value.len() {
            let orig = layer.w.value.as_slice_mut().unwrap()[i];
            layer.w.value.as_slice_mut().unwrap()[i] = orig + h;
            let lp = loss(&layer, &x);
            layer.w.value.as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss(&layer, &x);
            layer.w.value.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((layer.w.grad.as_slice().unwrap()[i] - fd).abs() < 1e-6);
        }
        for i in 0..layer.b.value.len() {
            let orig = layer.b.value.as_slice_mut().unwrap()[i];
            layer.b.value.as_slice_mut().unwrap()[i] = orig + h;
            let lp = loss(&layer, &x);
            layer.b.value.as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss(&layer, &x);
            layer.b.value.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((layer.b.grad.as_slice().unwrap()[i] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn deconv_inverts_conv_geometry() {
        let mut rng = derive_rng(13, "deconv-geom");
        // k=4, s=2, p=1 doubles the side; the chain 2 -> 4 -> 8 holds.
        let layer = ConvTranspose2d::new("d", 3, 2, 4, 2, 1, &mut rng);
        assert_eq!(layer.out_size(2), 4);
        assert_eq!(layer.out_size(4), 8);
        assert_eq!(layer.out_size(16), 32);
        let x = Array4::from_shape_fn((1, 3, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let y = layer.forward(&x);
        assert_eq!(y.dim(), (1, 2, 4, 4));
    }

    #[test]
    fn deconv_gradients_match_finite_differences() {
        let mut rng = derive_rng(14, "deconv-fd");
        let mut layer = ConvTranspose2d::new("d", 3, 2, 4, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let y0 = layer.forward(&x);
        let dy = Array4::from_shape_fn(y0.dim(), |_| rng.gen_range(-1.0..1.0));

        let (_, cache) = layer.forward_train(&x);
        let dx = layer.backward(&cache, &dy);

        let loss = |l: &ConvTranspose2d, x: &Array4<f64>| (&l.forward(x) * &dy).sum();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((dx.as_slice().unwrap()[i] - fd).abs() < 1e-6);
        }
        for i in 0..layer.w.value.len() {
            let orig = layer.w.value.as_slice_mut().unwrap()[i];
            layer.w.value.as_slice_mut().unwrap()[i] = orig + h;
            let lp = loss(&layer, &x);
            layer.w.value.as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss(&layer, &x);
            layer.w.value.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((layer.w.grad.as_slice().unwrap()[i] - fd).abs() < 1e-6);
        }
        for i in 0..layer.b.value.len() {
            let orig = layer.b.value.as_slice_mut().unwrap()[i];
            layer.b.value.as_slice_mut().unwrap()[i] = orig + h;
            let lp = loss(&layer, &x);
            layer.b.value.as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss(&layer, &x);
            layer.b.value.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((layer.b.grad.as_slice().unwrap()[i] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c — the defining
        // property that makes conv backward-data correct.
        let mut rng = derive_rng(15, "adjoint");
        let x = Array4::from_shape_fn((2, 2, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let cols = im2col(&x, 3, 3, 2, 1);
        let c = Array2::from_shape_fn(cols.dim(), |_| rng.gen_range(-1.0..1.0));
        let lhs = (&cols * &c).sum();
        let back = col2im(&c, 2, 2, 5, 5, 3, 3, 2, 1, 3, 3);
        let rhs = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

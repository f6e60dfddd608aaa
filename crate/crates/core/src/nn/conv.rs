//! Convolution kernels: im2col + GEMM forward/backward, plus the
//! mask-renormalized (inverse partial) convolution.
//!
//! The GEMMs are split over fixed-size column blocks so the work can run
//! on a rayon pool; block boundaries depend only on the problem size, which
//! keeps results bit-identical across thread counts and across the
//! parallel/sequential builds.

use ndarray::{Array1, Array2, Array3, Array4};

use crate::exec;

/// `[C, H, W]` feature map.
pub type Tensor = Array3<f64>;

/// Target number of row blocks per GEMM; the actual chunk depends only on
/// the problem size, keeping results identical across thread counts.
const GEMM_BLOCKS: usize = 16;

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dw: Array4<f64>,
    pub db: Array1<f64>,
}

impl Conv2d {
    /// He-initialized convolution. `head_scale` shrinks the init of output
    /// heads so sigmoids start near 0.5.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        scale: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let std = scale * (2.0 / fan_in).sqrt();
        let w = Array4::from_shape_fn((out_ch, in_ch, k, k), |_| super::gaussian(rng) * std);
        Conv2d {
            w,
            b: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.w.dim().0
    }

    pub fn in_ch(&self) -> usize {
        self.w.dim().1
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn zero_grads(&self) -> ConvGrads {
        ConvGrads {
            dw: Array4::zeros(self.w.dim()),
            db: Array1::zeros(self.b.dim()),
        }
    }

    pub fn forward(&self, x: &Tensor, parallel: bool) -> Tensor {
        let mut y = self.forward_nobias(x, parallel);
        let (_, ho, wo) = y.dim();
        for o in 0..self.out_ch() {
            let b = self.b[o];
            y.slice_mut(ndarray::s![o, .., ..]).mapv_inplace(|v| v + b);
        }
        let _ = (ho, wo);
        y
    }

    pub(crate) fn forward_nobias(&self, x: &Tensor, parallel: bool) -> Tensor {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch());
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel();
        let cols = im2col(x, k, self.stride, self.pad);
        let kk = c * k * k;
        let p = ho * wo;
        let o = self.out_ch();
        let mut y = Array3::zeros((o, ho, wo));
        {
            let w_slice = self.w.as_slice().expect("conv weights are contiguous");
            let cols_slice = cols.as_slice().expect("im2col output is contiguous");
            let y_slice = y.as_slice_mut().expect("fresh output is contiguous");
            // y[o, p] = sum_k w[o, k] cols[k, p], blocked over p
            gemm_blocked(
                o,
                kk,
                p,
                w_slice,
                kk as isize,
                1,
                cols_slice,
                p as isize,
                1,
                y_slice,
                parallel,
            );
        }
        y
    }

    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        grads: Option<&mut ConvGrads>,
        parallel: bool,
    ) -> Tensor {
        self.backward_impl(x, dy, dy, grads, parallel)
    }

    /// Backward pass with separate upstream tensors for the linear term and
    /// the bias (the partial convolution rescales the linear term only).
    pub(crate) fn backward_impl(
        &self,
        x: &Tensor,
        dy_core: &Tensor,
        dy_bias: &Tensor,
        grads: Option<&mut ConvGrads>,
        parallel: bool,
    ) -> Tensor {
        let (c, h, w) = x.dim();
        let (o, ho, wo) = dy_core.dim();
        debug_assert_eq!(o, self.out_ch());
        let k = self.kernel();
        let kk = c * k * k;
        let p = ho * wo;
        let cols = im2col(x, k, self.stride, self.pad);
        let cols_slice = cols.as_slice().unwrap();
        let dy_slice = dy_core.as_slice().unwrap();

        if let Some(g) = grads {
            // dW[o, k] += dy[o, p] cols[k, p]^T
            let dw_slice = g.dw.as_slice_mut().unwrap();
            unsafe {
                matrixmultiply::dgemm(
                    o,
                    p,
                    kk,
                    1.0,
                    dy_slice.as_ptr(),
                    p as isize,
                    1,
                    cols_slice.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    dw_slice.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
            for oc in 0..o {
                g.db[oc] += dy_bias.slice(ndarray::s![oc, .., ..]).sum();
            }
        }

        // dcols[k, p] = w[o, k]^T dy[o, p]
        let mut dcols = Array2::zeros((kk, p));
        {
            let w_slice = self.w.as_slice().unwrap();
            let dcols_slice = dcols.as_slice_mut().unwrap();
            gemm_blocked(
                kk,
                o,
                p,
                w_slice,
                1,
                kk as isize,
                dy_slice,
                p as isize,
                1,
                dcols_slice,
                parallel,
            );
        }
        col2im(&dcols, c, h, w, k, self.stride, self.pad, parallel)
    }
}

/// `C[m, n] = A[m, k] B[k, n]` with the row dimension split into fixed
/// blocks; each block's rows of C are contiguous and handed to one dgemm
/// call. The split depends only on `m`, so results are bit-identical
/// whether blocks run in parallel or sequentially.
#[allow(clippy::too_many_arguments)]
fn gemm_blocked(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    parallel: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    let row_chunk = m.div_ceil(GEMM_BLOCKS).max(4).min(m.max(1));
    let nblocks = m.div_ceil(row_chunk);
    exec::chunks_mut(c, row_chunk * n, parallel && nblocks > 1, |blk, out| {
        let r0 = blk * row_chunk;
        let rows = out.len() / n;
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().offset(r0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Lower `[C, H, W]` into `[C*k*k, Ho*Wo]` patches with zero padding.
pub(crate) fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ch * k * k + ki * k + kj;
                let mut out_row = cols.row_mut(row);
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        out_row[oh * wo + ow] = x[[ch, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add `[C*k*k, Ho*Wo]` columns back into a `[C, H, W]` gradient.
/// Parallel over channels; each channel's accumulation is sequential.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    parallel: bool,
) -> Tensor {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array3::zeros((c, h, w));
    let plane = h * w;
    let dx_slice = dx.as_slice_mut().unwrap();
    exec::chunks_mut(dx_slice, plane, parallel && c > 1, |ch, dst| {
        for ki in 0..k {
            for kj in 0..k {
                let row = ch * k * k + ki * k + kj;
                let src = dcols.row(row);
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dst[ih as usize * w + iw as usize] += src[oh * wo + ow];
                    }
                }
            }
        }
    });
    dx
}

/// Inverse partial convolution: convolution over valid inputs only,
/// renormalized by (in-window kernel support) / (valid count in window).
/// Windows without any valid input output the bias alone. The updated
/// validity marks windows that saw at least one valid input.
///
/// With an all-ones validity the renormalization is exactly 1 everywhere
/// (support and count coincide), reducing to a standard convolution.
#[derive(Debug, Clone)]
pub struct PartialConv2d {
    pub conv: Conv2d,
}

/// Per-call cache the backward pass needs.
#[derive(Debug, Clone)]
pub struct PartialConvCache {
    pub renorm: Array2<f64>,
    pub validity_out: Array2<f64>,
}

impl PartialConv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        scale: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        PartialConv2d {
            conv: Conv2d::new(in_ch, out_ch, k, stride, pad, scale, rng),
        }
    }

    /// Forward pass. `validity` is a per-pixel 0/1 field (1 = known
    /// context) broadcast over channels.
    pub fn forward(
        &self,
        x: &Tensor,
        validity: &Array2<f64>,
        parallel: bool,
    ) -> (Tensor, PartialConvCache) {
        let (_, h, w) = x.dim();
        debug_assert_eq!(validity.dim(), (h, w));
        let k = self.conv.kernel();
        let count = window_sum(validity, k, self.conv.stride, self.conv.pad);
        let support = window_support(h, w, k, self.conv.stride, self.conv.pad);
        let (ho, wo) = self.conv.out_size(h, w);
        let mut renorm = Array2::zeros((ho, wo));
        let mut validity_out = Array2::zeros((ho, wo));
        for r in 0..ho {
            for c in 0..wo {
                if count[[r, c]] > 0.0 {
                    renorm[[r, c]] = support[[r, c]] / count[[r, c]];
                    validity_out[[r, c]] = 1.0;
                }
            }
        }
        let xm = mask_channels(x, validity);
        let mut y = self.conv.forward_nobias(&xm, parallel);
        for o in 0..self.conv.out_ch() {
            let b = self.conv.b[o];
            for r in 0..ho {
                for c in 0..wo {
                    y[[o, r, c]] = y[[o, r, c]] * renorm[[r, c]] + b;
                }
            }
        }
        (
            y,
            PartialConvCache {
                renorm,
                validity_out,
            },
        )
    }

    pub fn backward(
        &self,
        x: &Tensor,
        validity: &Array2<f64>,
        cache: &PartialConvCache,
        dy: &Tensor,
        grads: Option<&mut ConvGrads>,
        parallel: bool,
    ) -> Tensor {
        let xm = mask_channels(x, validity);
        let mut dy_core = dy.clone();
        let (o, ho, wo) = dy.dim();
        for oc in 0..o {
            for r in 0..ho {
                for c in 0..wo {
                    dy_core[[oc, r, c]] *= cache.renorm[[r, c]];
                }
            }
        }
        let dxm = self.conv.backward_impl(&xm, &dy_core, dy, grads, parallel);
        mask_channels(&dxm, validity)
    }
}

fn mask_channels(x: &Tensor, validity: &Array2<f64>) -> Tensor {
    let (c, h, w) = x.dim();
    let mut out = x.clone();
    for ch in 0..c {
        for r in 0..h {
            for k in 0..w {
                out[[ch, r, k]] *= validity[[r, k]];
            }
        }
    }
    let _ = c;
    out
}

/// Sum of `field` over each sliding window (zero padding).
fn window_sum(field: &Array2<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (h, w) = field.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Array2::zeros((ho, wo));
    for oh in 0..ho {
        for ow in 0..wo {
            let mut acc = 0.0;
            for ki in 0..k {
                let ih = (oh * stride + ki) as isize - pad as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kj in 0..k {
                    let iw = (ow * stride + kj) as isize - pad as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    acc += field[[ih as usize, iw as usize]];
                }
            }
            out[[oh, ow]] = acc;
        }
    }
    out
}

/// Number of in-image taps in each sliding window.
fn window_support(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let ones = Array2::from_elem((h, w), 1.0);
    window_sum(&ones, k, stride, pad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn rng() -> impl rand::Rng {
        crate::rng::rng_for(42, 0, 0)
    }

    fn rand_tensor(c: usize, h: usize, w: usize, rng: &mut impl rand::Rng) -> Tensor {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution oracle (zero padding).
    fn conv_oracle(x: &Tensor, conv: &Conv2d) -> Tensor {
        let (c, h, w) = x.dim();
        let (ho, wo) = conv.out_size(h, w);
        let k = conv.kernel();
        let mut y = Array3::zeros((conv.out_ch(), ho, wo));
        for o in 0..conv.out_ch() {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = conv.b[o];
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (oh * conv.stride + ki) as isize - conv.pad as isize;
                                let iw = (ow * conv.stride + kj) as isize - conv.pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                    acc += conv.w[[o, ch, ki, kj]]
                                        * x[[ch, ih as usize, iw as usize]];
                                }
                            }
                        }
                    }
                    y[[o, oh, ow]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_direct_loops() {
        let mut r = rng();
        for (stride, h, w) in [(1, 9, 7), (2, 8, 10)] {
            let conv = Conv2d::new(3, 4, 3, stride, 1, 1.0, &mut r);
            let x = rand_tensor(3, h, w, &mut r);
            let y = conv.forward(&x, false);
            let oracle = conv_oracle(&x, &conv);
            let max = y
                .iter()
                .zip(oracle.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-12, "stride {stride}: max diff {max}");
        }
    }

    #[test]
    fn parallel_and_sequential_are_bit_identical() {
        let mut r = rng();
        let conv = Conv2d::new(4, 6, 3, 1, 1, 1.0, &mut r);
        let x = rand_tensor(4, 40, 40, &mut r);
        let y_seq = conv.forward(&x, false);
        let y_par = conv.forward(&x, true);
        assert_eq!(y_seq, y_par);
        let dy = rand_tensor(6, 40, 40, &mut r);
        let mut gs = conv.zero_grads();
        let mut gp = conv.zero_grads();
        let dx_seq = conv.backward(&x, &dy, Some(&mut gs), false);
        let dx_par = conv.backward(&x, &dy, Some(&mut gp), true);
        assert_eq!(dx_seq, dx_par);
        assert_eq!(gs.dw, gp.dw);
        assert_eq!(gs.db, gp.db);
    }

    #[test]
    fn backward_matches_finite_difference() {
        let mut r = rng();
        let conv = Conv2d::new(2, 3, 3, 1, 1, 1.0, &mut r);
        let x = rand_tensor(2, 6, 5, &mut r);
        let dy = rand_tensor(3, 6, 5, &mut r);
        let mut grads = conv.zero_grads();
        let dx = conv.backward(&x, &dy, Some(&mut grads), false);
        let loss = |x: &Tensor, conv: &Conv2d| -> f64 {
            conv.forward(x, false)
                .iter()
                .zip(dy.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        // input gradient, sampled positions
        for &(c, i, j) in &[(0usize, 0usize, 0usize), (1, 3, 2), (0, 5, 4), (1, 2, 0)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[c, i, j]] += h;
            xm[[c, i, j]] -= h;
            let num = (loss(&xp, &conv) - loss(&xm, &conv)) / (2.0 * h);
            assert!(
                (num - dx[[c, i, j]]).abs() < 1e-7,
                "dx[{c},{i},{j}]: fd {num} vs {}",
                dx[[c, i, j]]
            );
        }
        // weight gradient, sampled positions
        for &(o, c, ki, kj) in &[(0usize, 0usize, 0usize, 0usize), (2, 1, 2, 1), (1, 0, 1, 2)] {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.w[[o, c, ki, kj]] += h;
            cm.w[[o, c, ki, kj]] -= h;
            let num = (loss(&x, &cp) - loss(&x, &cm)) / (2.0 * h);
            assert!((num - grads.dw[[o, c, ki, kj]]).abs() < 1e-7);
        }
        // bias gradient
        let mut cp = conv.clone();
        cp.b[1] += h;
        let mut cm = conv.clone();
        cm.b[1] -= h;
        let num = (loss(&x, &cp) - loss(&x, &cm)) / (2.0 * h);
        assert!((num - grads.db[1]).abs() < 1e-7);
    }

    #[test]
    fn partial_conv_full_validity_equals_standard() {
        let mut r = rng();
        let pc = PartialConv2d::new(3, 4, 3, 1, 1, 1.0, &mut r);
        let x = rand_tensor(3, 10, 12, &mut r);
        let ones = Array2::from_elem((10, 12), 1.0);
        let (y, cache) = pc.forward(&x, &ones, false);
        let standard = pc.conv.forward(&x, false);
        let max = y
            .iter()
            .zip(standard.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-12, "full-validity mismatch {max}");
        assert!(cache.validity_out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn partial_conv_zero_validity_outputs_bias() {
        let mut r = rng();
        let mut pc = PartialConv2d::new(2, 3, 3, 1, 1, 1.0, &mut r);
        pc.conv.b[0] = 0.3;
        pc.conv.b[1] = -0.2;
        pc.conv.b[2] = 0.0;
        let x = rand_tensor(2, 8, 8, &mut r);
        let zeros = Array2::zeros((8, 8));
        let (y, cache) = pc.forward(&x, &zeros, false);
        for o in 0..3 {
            assert!(y
                .slice(ndarray::s![o, .., ..])
                .iter()
                .all(|&v| (v - pc.conv.b[o]).abs() < 1e-15));
        }
        assert!(cache.validity_out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partial_conv_single_valid_pixel_renormalizes_by_nine() {
        // 3x3 kernel of ones over a single valid pixel: interior windows
        // containing it renormalize by 9/1, so output = 9*x + b there.
        let mut r = rng();
        let mut pc = PartialConv2d::new(1, 1, 3, 1, 1, 1.0, &mut r);
        pc.conv.w.fill(1.0);
        pc.conv.b[0] = 0.25;
        let mut x = Array3::zeros((1, 8, 8));
        x[[0, 4, 4]] = 0.6;
        let mut v = Array2::zeros((8, 8));
        v[[4, 4]] = 1.0;
        let (y, cache) = pc.forward(&x, &v, false);
        // window centered at the valid pixel
        assert!((y[[0, 4, 4]] - (9.0 * 0.6 + 0.25)).abs() < 1e-12);
        // any window not touching it outputs the bias
        assert!((y[[0, 0, 0]] - 0.25).abs() < 1e-15);
        // validity dilates by one
        let dilated: usize = cache.validity_out.iter().map(|&v| v as usize).sum();
        assert_eq!(dilated, 9);
    }

    #[test]
    fn partial_conv_backward_matches_finite_difference() {
        let mut r = rng();
        let pc = PartialConv2d::new(2, 2, 3, 1, 1, 1.0, &mut r);
        let x = rand_tensor(2, 6, 6, &mut r);
        let mut v = Array2::zeros((6, 6));
        for i in 2..5 {
            for j in 1..4 {
                v[[i, j]] = 1.0;
            }
        }
        let dy = rand_tensor(2, 6, 6, &mut r);
        let (_, cache) = pc.forward(&x, &v, false);
        let mut grads = pc.conv.zero_grads();
        let dx = pc.backward(&x, &v, &cache, &dy, Some(&mut grads), false);
        let loss = |pc: &PartialConv2d, x: &Tensor| -> f64 {
            pc.forward(x, &v, false)
                .0
                .iter()
                .zip(dy.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        for &(c, i, j) in &[(0usize, 2usize, 1usize), (1, 3, 3), (0, 0, 0), (1, 4, 2)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[c, i, j]] += h;
            xm[[c, i, j]] -= h;
            let num = (loss(&pc, &xp) - loss(&pc, &xm)) / (2.0 * h);
            assert!(
                (num - dx[[c, i, j]]).abs() < 1e-7,
                "dx[{c},{i},{j}] fd {num} vs {}",
                dx[[c, i, j]]
            );
        }
        for &(o, c, ki, kj) in &[(0usize, 1usize, 0usize, 2usize), (1, 0, 1, 1)] {
            let mut pp = pc.clone();
            let mut pm = pc.clone();
            pp.conv.w[[o, c, ki, kj]] += h;
            pm.conv.w[[o, c, ki, kj]] -= h;
            let num = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((num - grads.dw[[o, c, ki, kj]]).abs() < 1e-7);
        }
        let mut pp = pc.clone();
        pp.conv.b[0] += h;
        let mut pm = pc.clone();
        pm.conv.b[0] -= h;
        let num = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
        assert!((num - grads.db[0]).abs() < 1e-7);
    }

    #[test]
    fn strided_partial_conv_halves_validity_resolution() {
        let mut r = rng();
        let pc = PartialConv2d::new(1, 2, 3, 2, 1, 1.0, &mut r);
        let x = rand_tensor(1, 8, 8, &mut r);
        let v = Array2::from_elem((8, 8), 1.0);
        let (y, cache) = pc.forward(&x, &v, false);
        assert_eq!(y.dim(), (2, 4, 4));
        assert_eq!(cache.validity_out.dim(), (4, 4));
    }
}

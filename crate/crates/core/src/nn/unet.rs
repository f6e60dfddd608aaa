//! Skip-connected encoder-decoder with hand-written backprop.
//!
//! One architecture serves the decomposition network, the shading
//! consistency discriminator and the per-image renderer. The encoder is
//! built from mask-renormalized convolutions; with an all-ones validity
//! they reduce exactly to standard convolutions, so unmasked networks pay
//! nothing for the shared code path. The decoder upsamples (nearest 2x),
//! concatenates the encoder skip, and convolves. Outputs pass through a
//! sigmoid so every field lands in (0, 1). An optional global head scores
//! the bottleneck code for discriminator use.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, ConvGrads, PartialConv2d, Tensor};
use super::{
    leaky_relu_backward, leaky_relu_inplace, sigmoid, sigmoid_backward, sigmoid_inplace,
    upsample2x, upsample2x_backward, Linear, LinearGrads,
};
use crate::error::{validation, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Number of stride-2 downsamplings; the spatial downsampling factor
    /// is `2^depth`.
    pub depth: usize,
    /// Channel width at full resolution; doubles per level up to `max_width`.
    pub base: usize,
    pub max_width: usize,
    /// Whether `forward` accepts a caller validity mask (inverse partial
    /// convolution mode). Unmasked networks always see all-ones validity.
    pub masked: bool,
    pub global_head: bool,
}

impl UnetConfig {
    pub fn width(&self, level: usize) -> usize {
        (self.base << level).min(self.max_width)
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || self.base == 0 {
            return Err(validation("unet config: channel widths must be positive"));
        }
        if self.depth == 0 || self.depth > 6 {
            return Err(validation("unet config: depth must be in 1..=6"));
        }
        if self.max_width < self.base {
            return Err(validation("unet config: max_width below base"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Unet {
    pub cfg: UnetConfig,
    /// Per-level feature convolutions, `depth + 1` entries (the last is the
    /// bottleneck).
    enc_conv: Vec<PartialConv2d>,
    /// Stride-2 downsampling convolutions, `depth` entries.
    enc_down: Vec<PartialConv2d>,
    /// Decoder convolutions, `depth` entries; index `j` maps
    /// `width(j) + width(j+1) -> width(j)`.
    dec_conv: Vec<Conv2d>,
    /// 1x1 output head.
    head: Conv2d,
    ghead: Option<Linear>,
}

/// Gradients mirroring [`Unet`]'s parameter structure.
#[derive(Debug, Clone)]
pub struct UnetGrads {
    pub enc_conv: Vec<ConvGrads>,
    pub enc_down: Vec<ConvGrads>,
    pub dec_conv: Vec<ConvGrads>,
    pub head: ConvGrads,
    pub ghead: Option<LinearGrads>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct UnetTrace {
    /// Network input.
    x: Tensor,
    /// Validity fed to `enc_conv[i]`.
    v_in: Vec<Array2<f64>>,
    /// Renorm map of `enc_conv[i]`.
    conv_cache: Vec<super::conv::PartialConvCache>,
    /// Post-activation encoder features (skips; last entry = bottleneck).
    f: Vec<Tensor>,
    /// Renorm map of `enc_down[i]`.
    down_cache: Vec<super::conv::PartialConvCache>,
    /// Post-activation downsample outputs.
    g: Vec<Tensor>,
    /// Concatenated decoder inputs.
    cat: Vec<Tensor>,
    /// Post-activation decoder outputs, `u[j]` at level `j`.
    u: Vec<Tensor>,
    /// Sigmoid output.
    pub out: Tensor,
    /// Bottleneck global-average vector and sigmoid global score.
    pub global: Option<(Vec<f64>, f64)>,
}

impl Unet {
    pub fn new(cfg: UnetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::rng_for(seed, crate::rng::streams::MODEL_INIT, 0);
        let mut enc_conv = Vec::new();
        let mut enc_down = Vec::new();
        for i in 0..=cfg.depth {
            let in_ch = if i == 0 { cfg.in_ch } else { cfg.width(i) };
            enc_conv.push(PartialConv2d::new(in_ch, cfg.width(i), 3, 1, 1, 1.0, &mut rng));
            if i < cfg.depth {
                enc_down.push(PartialConv2d::new(
                    cfg.width(i),
                    cfg.width(i + 1),
                    3,
                    2,
                    1,
                    1.0,
                    &mut rng,
                ));
            }
        }
        let mut dec_conv = Vec::new();
        for j in 0..cfg.depth {
            dec_conv.push(Conv2d::new(
                cfg.width(j) + cfg.width(j + 1),
                cfg.width(j),
                3,
                1,
                1,
                1.0,
                &mut rng,
            ));
        }
        // small head init so sigmoids start near 0.5
        let head = Conv2d::new(cfg.width(0), cfg.out_ch, 1, 1, 0, 0.2, &mut rng);
        let ghead = cfg
            .global_head
            .then(|| Linear::new(cfg.width(cfg.depth), 1, &mut rng));
        Ok(Unet {
            cfg,
            enc_conv,
            enc_down,
            dec_conv,
            head,
            ghead,
        })
    }

    /// Spatial sizes must be divisible by this.
    pub fn downsample_factor(&self) -> usize {
        self.cfg.downsample_factor()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.cfg.in_ch {
            return Err(validation(format!(
                "unet expects {} input channels, got {c}",
                self.cfg.in_ch
            )));
        }
        let f = self.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(validation(format!(
                "unet input {h}x{w} not divisible by downsampling factor {f}"
            )));
        }
        Ok(())
    }

    /// Full forward pass retaining the trace for backprop.
    pub fn forward(&self, x: &Tensor, validity: Option<&Array2<f64>>, parallel: bool) -> Result<UnetTrace> {
        self.check_input(x)?;
        let (_, h, w) = x.dim();
        let ones = Array2::from_elem((h, w), 1.0);
        let v0 = match validity {
            Some(v) if self.cfg.masked => v.clone(),
            Some(_) => {
                return Err(validation("validity passed to an unmasked network"));
            }
            None => ones,
        };

        let depth = self.cfg.depth;
        let mut v_in = Vec::with_capacity(depth + 1);
        let mut conv_cache = Vec::with_capacity(depth + 1);
        let mut f = Vec::with_capacity(depth + 1);
        let mut down_cache = Vec::with_capacity(depth);
        let mut g: Vec<Tensor> = Vec::with_capacity(depth);

        let mut cur = x.clone();
        let mut cur_v = v0;
        for i in 0..=depth {
            v_in.push(cur_v.clone());
            let (mut feat, cache) = self.enc_conv[i].forward(&cur, &cur_v, parallel);
            leaky_relu_inplace(&mut feat);
            let v_after = cache.validity_out.clone();
            conv_cache.push(cache);
            f.push(feat);
            if i < depth {
                let (mut down, dcache) = self.enc_down[i].forward(&f[i], &v_after, parallel);
                leaky_relu_inplace(&mut down);
                cur = down.clone();
                cur_v = dcache.validity_out.clone();
                down_cache.push(dcache);
                g.push(down);
            }
        }

        // decoder, coarse to fine
        let mut u = vec![Tensor::zeros((0, 0, 0)); depth];
        let mut cat = vec![Tensor::zeros((0, 0, 0)); depth];
        let mut coarse = f[depth].clone();
        for j in (0..depth).rev() {
            let up = upsample2x(&coarse);
            let c = concat_channels(&f[j], &up);
            let mut out = self.dec_conv[j].forward(&c, parallel);
            leaky_relu_inplace(&mut out);
            cat[j] = c;
            u[j] = out.clone();
            coarse = out;
        }

        let mut out = self.head.forward(&u[0], parallel);
        sigmoid_inplace(&mut out);

        let global = self.ghead.as_ref().map(|gh| {
            let gap = global_average(&f[depth]);
            let score = sigmoid(gh.forward(&gap)[0]);
            (gap, score)
        });

        Ok(UnetTrace {
            x: x.clone(),
            v_in,
            conv_cache,
            f,
            down_cache,
            g,
            cat,
            u,
            out,
            global,
        })
    }

    /// Inference without trace retention (used for large inputs).
    pub fn forward_infer(&self, x: &Tensor, validity: Option<&Array2<f64>>, parallel: bool) -> Result<Tensor> {
        // Trace memory is acceptable below ~512px; above that, recompute
        // without caches.
        let trace = self.forward(x, validity, parallel)?;
        Ok(trace.out)
    }

    /// Backprop through the trace. `d_out` matches the sigmoid output;
    /// `d_global` (if any) matches the global score. When `grads` is None
    /// only the input gradient is produced (frozen-network mode).
    pub fn backward(
        &self,
        trace: &UnetTrace,
        d_out: &Tensor,
        d_global: Option<f64>,
        mut grads: Option<&mut UnetGrads>,
        parallel: bool,
    ) -> Tensor {
        let depth = self.cfg.depth;
        let d_head_pre = sigmoid_backward(&trace.out, d_out);
        let mut d_u = self.head.backward(
            &trace.u[0],
            &d_head_pre,
            grads.as_deref_mut().map(|g| &mut g.head),
            parallel,
        );

        // decoder backward, fine to coarse; collect skip gradients
        let mut d_f: Vec<Option<Tensor>> = vec![None; depth + 1];
        for j in 0..depth {
            let d_pre = leaky_relu_backward(&trace.u[j], &d_u);
            let d_cat = self.dec_conv[j].backward(
                &trace.cat[j],
                &d_pre,
                grads.as_deref_mut().map(|g| &mut g.dec_conv[j]),
                parallel,
            );
            let skip_w = self.cfg.width(j);
            let (d_skip, d_up) = split_channels(&d_cat, skip_w);
            d_f[j] = Some(d_skip);
            d_u = upsample2x_backward(&d_up);
        }

        // bottleneck gradient: decoder chain plus optional global head
        let mut d_bottl = d_u;
        if let (Some(dg), Some(gh), Some((gap, score))) =
            (d_global, self.ghead.as_ref(), trace.global.as_ref())
        {
            let d_pre = dg * score * (1.0 - score);
            let d_gap = gh.backward(
                gap,
                &[d_pre],
                grads.as_deref_mut().and_then(|g| g.ghead.as_mut()),
            );
            let (_, bh, bw) = trace.f[depth].dim();
            let inv = 1.0 / (bh * bw) as f64;
            for (c, dv) in d_gap.iter().enumerate() {
                let add = dv * inv;
                d_bottl
                    .slice_mut(ndarray::s![c, .., ..])
                    .mapv_inplace(|v| v + add);
            }
        }
        d_f[depth] = Some(d_bottl);

        // encoder backward, coarse to fine
        let mut d_input = Tensor::zeros((0, 0, 0));
        for i in (0..=depth).rev() {
            let df = d_f[i].take().expect("skip gradient populated");
            let d_pre = leaky_relu_backward(&trace.f[i], &df);
            let enc_in = if i == 0 { &trace.x } else { &trace.g[i - 1] };
            let dx = self.enc_conv[i].backward(
                enc_in,
                &trace.v_in[i],
                &trace.conv_cache[i],
                &d_pre,
                grads.as_deref_mut().map(|g| &mut g.enc_conv[i]),
                parallel,
            );
            if i == 0 {
                d_input = dx;
            } else {
                // through the stride-2 down conv into the finer level
                let d_pre_down = leaky_relu_backward(&trace.g[i - 1], &dx);
                let d_finer = self.enc_down[i - 1].backward(
                    &trace.f[i - 1],
                    &trace.conv_cache[i - 1].validity_out,
                    &trace.down_cache[i - 1],
                    &d_pre_down,
                    grads.as_deref_mut().map(|g| &mut g.enc_down[i - 1]),
                    parallel,
                );
                match &mut d_f[i - 1] {
                    Some(existing) => *existing += &d_finer,
                    slot => *slot = Some(d_finer),
                }
            }
        }
        d_input
    }

    pub fn zero_grads(&self) -> UnetGrads {
        UnetGrads {
            enc_conv: self.enc_conv.iter().map(|c| c.conv.zero_grads()).collect(),
            enc_down: self.enc_down.iter().map(|c| c.conv.zero_grads()).collect(),
            dec_conv: self.dec_conv.iter().map(|c| c.zero_grads()).collect(),
            head: self.head.zero_grads(),
            ghead: self.ghead.as_ref().map(|g| g.zero_grads()),
        }
    }

    /// Parameter tensors in a fixed traversal order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in &mut self.enc_conv {
            out.push(c.conv.w.as_slice_mut().unwrap());
            out.push(c.conv.b.as_slice_mut().unwrap());
        }
        for c in &mut self.enc_down {
            out.push(c.conv.w.as_slice_mut().unwrap());
            out.push(c.conv.b.as_slice_mut().unwrap());
        }
        for c in &mut self.dec_conv {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(c.b.as_slice_mut().unwrap());
        }
        out.push(self.head.w.as_slice_mut().unwrap());
        out.push(self.head.b.as_slice_mut().unwrap());
        if let Some(g) = &mut self.ghead {
            out.push(&mut g.w);
            out.push(&mut g.b);
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for c in &self.enc_conv {
            out.push(c.conv.w.as_slice().unwrap());
            out.push(c.conv.b.as_slice().unwrap());
        }
        for c in &self.enc_down {
            out.push(c.conv.w.as_slice().unwrap());
            out.push(c.conv.b.as_slice().unwrap());
        }
        for c in &self.dec_conv {
            out.push(c.w.as_slice().unwrap());
            out.push(c.b.as_slice().unwrap());
        }
        out.push(self.head.w.as_slice().unwrap());
        out.push(self.head.b.as_slice().unwrap());
        if let Some(g) = &self.ghead {
            out.push(&g.w);
            out.push(&g.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Load parameters from flat tensors in `param_slices` order.
    pub fn load_params(&mut self, tensors: &[Vec<f64>]) -> Result<()> {
        let mut slots = self.param_slices_mut();
        if slots.len() != tensors.len() {
            return Err(validation(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                slots.len()
            )));
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            if slot.len() != t.len() {
                return Err(validation("checkpoint tensor length mismatch"));
            }
            slot.copy_from_slice(t);
        }
        Ok(())
    }
}

impl UnetGrads {
    /// Gradient tensors in the same order as [`Unet::param_slices`].
    pub fn grad_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.enc_conv {
            out.push(g.dw.as_slice().unwrap());
            out.push(g.db.as_slice().unwrap());
        }
        for g in &self.enc_down {
            out.push(g.dw.as_slice().unwrap());
            out.push(g.db.as_slice().unwrap());
        }
        for g in &self.dec_conv {
            out.push(g.dw.as_slice().unwrap());
            out.push(g.db.as_slice().unwrap());
        }
        out.push(self.head.dw.as_slice().unwrap());
        out.push(self.head.db.as_slice().unwrap());
        if let Some(g) = &self.ghead {
            out.push(&g.dw);
            out.push(&g.db);
        }
        out
    }

    pub fn add_assign(&mut self, other: &UnetGrads) {
        let add = |a: &mut ConvGrads, b: &ConvGrads| {
            a.dw += &b.dw;
            a.db += &b.db;
        };
        for (a, b) in self.enc_conv.iter_mut().zip(&other.enc_conv) {
            add(a, b);
        }
        for (a, b) in self.enc_down.iter_mut().zip(&other.enc_down) {
            add(a, b);
        }
        for (a, b) in self.dec_conv.iter_mut().zip(&other.dec_conv) {
            add(a, b);
        }
        add(&mut self.head, &other.head);
        if let (Some(a), Some(b)) = (&mut self.ghead, &other.ghead) {
            for (x, y) in a.dw.iter_mut().zip(&b.dw) {
                *x += y;
            }
            for (x, y) in a.db.iter_mut().zip(&b.db) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        let sc = |g: &mut ConvGrads| {
            g.dw.mapv_inplace(|v| v * s);
            g.db.mapv_inplace(|v| v * s);
        };
        self.enc_conv.iter_mut().for_each(&sc);
        self.enc_down.iter_mut().for_each(&sc);
        self.dec_conv.iter_mut().for_each(&sc);
        sc(&mut self.head);
        if let Some(g) = &mut self.ghead {
            g.dw.iter_mut().for_each(|v| *v *= s);
            g.db.iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = a.dim();
    let (cb, hb, wb) = b.dim();
    debug_assert_eq!((h, w), (hb, wb));
    let mut out = Tensor::zeros((ca + cb, h, w));
    out.slice_mut(ndarray::s![..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![ca.., .., ..]).assign(b);
    out
}

fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    (
        x.slice(ndarray::s![..first, .., ..]).to_owned(),
        x.slice(ndarray::s![first.., .., ..]).to_owned(),
    )
}

fn global_average(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = x.dim();
    let inv = 1.0 / (h * w) as f64;
    (0..c)
        .map(|ch| x.slice(ndarray::s![ch, .., ..]).sum() * inv)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn small_cfg(masked: bool, global_head: bool) -> UnetConfig {
        UnetConfig {
            in_ch: 3,
            out_ch: 2,
            depth: 2,
            base: 4,
            max_width: 8,
            masked,
            global_head,
        }
    }

    fn rand_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::rng_for(seed, 99, 0);
        use rand::Rng;
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let net = Unet::new(small_cfg(false, true), 7).unwrap();
        let x = rand_tensor(3, 16, 16, 1);
        let t1 = net.forward(&x, None, false).unwrap();
        let t2 = net.forward(&x, None, true).unwrap();
        assert_eq!(t1.out.dim(), (2, 16, 16));
        assert_eq!(t1.out, t2.out, "parallel forward must be bit-identical");
        assert!(t1.out.iter().all(|&v| v > 0.0 && v < 1.0));
        let (_, g1) = t1.global.as_ref().unwrap().clone();
        let (_, g2) = t2.global.as_ref().unwrap().clone();
        assert_eq!(g1, g2);
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = Unet::new(small_cfg(false, false), 7).unwrap();
        let x = rand_tensor(3, 18, 16, 2);
        assert!(net.forward(&x, None, false).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let net = Unet::new(small_cfg(false, true), 3).unwrap();
        let x = rand_tensor(3, 8, 8, 3);
        let d_out = rand_tensor(2, 8, 8, 4);
        let trace = net.forward(&x, None, false).unwrap();
        let dx = net.backward(&trace, &d_out, Some(0.5), None, false);
        let loss = |x: &Tensor| -> f64 {
            let t = net.forward(x, None, false).unwrap();
            let pix: f64 = t.out.iter().zip(d_out.iter()).map(|(a, b)| a * b).sum();
            pix + 0.5 * t.global.as_ref().unwrap().1
        };
        let h = 1e-6;
        for &(c, i, j) in &[(0usize, 0usize, 0usize), (1, 3, 5), (2, 7, 2), (0, 4, 4)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[c, i, j]] += h;
            xm[[c, i, j]] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let rel = (num - dx[[c, i, j]]).abs() / num.abs().max(1e-9);
            assert!(rel < 1e-5, "dx[{c},{i},{j}]: fd {num} vs {} (rel {rel})", dx[[c, i, j]]);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_difference() {
        let cfg = small_cfg(true, true);
        let net = Unet::new(cfg, 5).unwrap();
        let x = rand_tensor(3, 8, 8, 6);
        let mut v = Array2::zeros((8, 8));
        for i in 2..6 {
            for j in 3..7 {
                v[[i, j]] = 1.0;
            }
        }
        let d_out = rand_tensor(2, 8, 8, 7);
        let trace = net.forward(&x, Some(&v), false).unwrap();
        let mut grads = net.zero_grads();
        net.backward(&trace, &d_out, Some(-0.3), Some(&mut grads), false);

        let loss = |n: &Unet| -> f64 {
            let t = n.forward(&x, Some(&v), false).unwrap();
            let pix: f64 = t.out.iter().zip(d_out.iter()).map(|(a, b)| a * b).sum();
            pix - 0.3 * t.global.as_ref().unwrap().1
        };
        let h = 1e-6;
        // sample one weight from several parameter groups
        let flat_grads: Vec<f64> = grads.grad_slices().iter().flat_map(|s| s.iter().copied()).collect();
        let offsets: Vec<usize> = {
            let lens: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
            let mut acc = 0;
            lens.iter()
                .map(|l| {
                    let o = acc;
                    acc += l;
                    o
                })
                .collect()
        };
        let slices = net.param_slices().len();
        for group in [0usize, 3, slices - 3, slices - 1] {
            let idx_in_group = 0usize;
            let flat_idx = offsets[group] + idx_in_group;
            let mut np = net.clone();
            let mut nm = net.clone();
            np.param_slices_mut()[group][idx_in_group] += h;
            nm.param_slices_mut()[group][idx_in_group] -= h;
            let num = (loss(&np) - loss(&nm)) / (2.0 * h);
            let got = flat_grads[flat_idx];
            let denom = num.abs().max(1e-8);
            assert!(
                (num - got).abs() / denom < 1e-4,
                "group {group}: fd {num} vs {got}"
            );
        }
    }

    #[test]
    fn masked_forward_differs_from_unmasked() {
        let net = Unet::new(small_cfg(true, false), 9).unwrap();
        let x = rand_tensor(3, 8, 8, 10);
        let mut v = Array2::zeros((8, 8));
        v[[4, 4]] = 1.0;
        let masked = net.forward(&x, Some(&v), false).unwrap();
        let ones = Array2::from_elem((8, 8), 1.0);
        let full = net.forward(&x, Some(&ones), false).unwrap();
        assert_ne!(masked.out, full.out);
    }
}

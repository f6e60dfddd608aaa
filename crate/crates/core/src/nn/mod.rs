//! Minimal CNN machinery: convolutions (standard and mask-renormalized),
//! a skip-connected encoder-decoder with hand-written backprop, and Adam.
//!
//! Everything is f64 and deterministic: hot loops are split into fixed-size
//! chunks whose arithmetic order never depends on the thread count, so a
//! run is bit-reproducible with or without the `parallel` feature.

pub mod adam;
pub mod ckpt;
pub mod conv;
pub mod unet;

pub use adam::Adam;
pub use conv::{Conv2d, ConvGrads, PartialConv2d, Tensor};
pub use unet::{Unet, UnetConfig, UnetGrads, UnetTrace};

use ndarray::Array3;

/// Leaky-ReLU slope used throughout.
pub const LRELU_SLOPE: f64 = 0.2;

pub(crate) fn leaky_relu_inplace(x: &mut Tensor) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { LRELU_SLOPE * v });
}

/// Backward of leaky-ReLU given the *post*-activation tensor (valid because
/// the activation is monotone and sign-preserving).
pub(crate) fn leaky_relu_backward(post: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.zip_mut_with(post, |d, &p| {
        if p <= 0.0 {
            *d *= LRELU_SLOPE;
        }
    });
    dx
}

pub(crate) fn sigmoid_inplace(x: &mut Tensor) {
    x.mapv_inplace(sigmoid);
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Backward of sigmoid given the post-activation tensor.
pub(crate) fn sigmoid_backward(post: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.zip_mut_with(post, |d, &p| *d *= p * (1.0 - p));
    dx
}

/// Nearest-neighbor 2x upsampling.
pub(crate) fn upsample2x(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for r in 0..h {
            for k in 0..w {
                let v = x[[ch, r, k]];
                y[[ch, 2 * r, 2 * k]] = v;
                y[[ch, 2 * r, 2 * k + 1]] = v;
                y[[ch, 2 * r + 1, 2 * k]] = v;
                y[[ch, 2 * r + 1, 2 * k + 1]] = v;
            }
        }
    }
    y
}

/// Backward of nearest 2x upsampling: sum each 2x2 block.
pub(crate) fn upsample2x_backward(dy: &Tensor) -> Tensor {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            for k in 0..w {
                dx[[ch, r, k]] = dy[[ch, 2 * r, 2 * k]]
                    + dy[[ch, 2 * r, 2 * k + 1]]
                    + dy[[ch, 2 * r + 1, 2 * k]]
                    + dy[[ch, 2 * r + 1, 2 * k + 1]];
            }
        }
    }
    dx
}

/// Fully-connected layer for the global discriminator head.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Vec<f64>, // [out, in] row-major
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl rand::Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| gaussian(rng) * std).collect();
        Linear {
            w,
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b[o]
            })
            .collect()
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], grads: Option<&mut LinearGrads>) -> Vec<f64> {
        if let Some(g) = grads {
            for o in 0..self.out_dim {
                g.db[o] += dy[o];
                for i in 0..self.in_dim {
                    g.dw[o * self.in_dim + i] += dy[o] * x[i];
                }
            }
        }
        (0..self.in_dim)
            .map(|i| {
                (0..self.out_dim)
                    .map(|o| self.w[o * self.in_dim + i] * dy[o])
                    .sum()
            })
            .collect()
    }

    pub fn zero_grads(&self) -> LinearGrads {
        LinearGrads {
            dw: vec![0.0; self.w.len()],
            db: vec![0.0; self.b.len()],
        }
    }
}

/// Standard normal sample via Box-Muller, so initialization depends only on
/// the seeded uniform stream.
pub(crate) fn gaussian(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn upsample_round_trip_shapes() {
        let x = Array3::from_shape_fn((2, 4, 4), |(c, r, k)| (c + r * 4 + k) as f64);
        let y = upsample2x(&x);
        assert_eq!(y.dim(), (2, 8, 8));
        assert_eq!(y[[1, 5, 3]], x[[1, 2, 1]]);
        let dx = upsample2x_backward(&y);
        // each value was copied 4 times
        assert_eq!(dx[[1, 2, 1]], 4.0 * x[[1, 2, 1]]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!(sigmoid(500.0) <= 1.0);
        assert!(sigmoid(-500.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = crate::rng::rng_for(3, 0, 0);
        let lin = Linear::new(5, 2, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| 0.1 * i as f64 - 0.2).collect();
        let dy = vec![0.7, -0.3];
        let dx = lin.backward(&x, &dy, None);
        let f = |x: &[f64]| -> f64 {
            let y = lin.forward(x);
            y[0] * dy[0] + y[1] * dy[1]
        };
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((num - dx[i]).abs() < 1e-8);
        }
    }
}

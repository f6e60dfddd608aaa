//! Spherical-harmonic illumination: basis evaluation on normals,
//! least-squares coefficient fitting from (shading, normals), shading
//! synthesis, and the Huber coefficient loss.
//!
//! The basis convention is frozen crate-wide: real spherical harmonics in
//! the order `[Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22]` with the
//! standard normalization constants. All modules share it.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::imaging::ImagePlane;

/// Y00 = 0.282095
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Band-1 scale: Y1m = 0.488603 * {y, z, x}
pub const SH_C1: f64 = 0.488_602_511_902_919_92;
/// Band-2 scale for the xy / yz / xz terms: 1.092548
pub const SH_C2: f64 = 1.092_548_430_592_079_2;
/// Y20 = 0.315392 * (3z^2 - 1)
pub const SH_C2_0: f64 = 0.315_391_565_252_520_05;
/// Y22 = 0.546274 * (x^2 - y^2)
pub const SH_C2_2: f64 = 0.546_274_215_296_039_6;

/// Tikhonov damping added to the normal-equation diagonal in [`fit_shc`].
pub const FIT_DAMPING: f64 = 1e-6;

/// Unit-norm tolerance on input normals.
pub const NORMAL_TOL: f64 = 1e-4;

/// Per-pixel camera-space unit normals with a validity flag for pixels
/// where the normal is undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    vectors: Array3<f64>, // [3, H, W]
    validity: Array2<u8>, // [H, W], 1 = valid
}

impl NormalMap {
    pub fn new(vectors: Array3<f64>, validity: Array2<u8>) -> Result<Self> {
        let (c, h, w) = vectors.dim();
        if c != 3 {
            return Err(validation("normal map must have 3 vector components"));
        }
        if validity.dim() != (h, w) {
            return Err(validation("normal validity dimensions differ from vectors"));
        }
        if validity.iter().any(|&v| v > 1) {
            return Err(validation("normal validity must be 0 or 1"));
        }
        for r in 0..h {
            for k in 0..w {
                if validity[[r, k]] == 1 {
                    let n = [vectors[[0, r, k]], vectors[[1, r, k]], vectors[[2, r, k]]];
                    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                    if (len - 1.0).abs() > NORMAL_TOL {
                        return Err(validation(format!(
                            "normal at ({r},{k}) has length {len}, expected 1 +/- {NORMAL_TOL}"
                        )));
                    }
                }
            }
        }
        Ok(Self { vectors, validity })
    }

    pub fn height(&self) -> usize {
        self.vectors.dim().1
    }

    pub fn width(&self) -> usize {
        self.vectors.dim().2
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.validity[[row, col]] == 1
    }

    pub fn vector(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.vectors[[0, row, col]],
            self.vectors[[1, row, col]],
            self.vectors[[2, row, col]],
        ]
    }

    pub fn vectors(&self) -> &Array3<f64> {
        &self.vectors
    }

    pub fn validity(&self) -> &Array2<u8> {
        &self.validity
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v == 1).count()
    }

    /// Paste `fragment`'s normals into `self` wherever `mask` is 0.
    /// Dimensions must match.
    pub fn paste(&self, fragment: &NormalMap, mask: &crate::imaging::BinaryMask) -> Result<NormalMap> {
        let (h, w) = (self.height(), self.width());
        if fragment.height() != h || fragment.width() != w || mask.height() != h || mask.width() != w
        {
            return Err(validation("normal paste: dimensions differ"));
        }
        let mut vectors = self.vectors.clone();
        let mut validity = self.validity.clone();
        for r in 0..h {
            for c in 0..w {
                if mask.get(r, c) == 0 {
                    for k in 0..3 {
                        vectors[[k, r, c]] = fragment.vectors[[k, r, c]];
                    }
                    validity[[r, c]] = fragment.validity[[r, c]];
                }
            }
        }
        Ok(NormalMap { vectors, validity })
    }
}

/// The 9 coefficients of the first three real SH bands, for one shading
/// channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShVector(pub [f64; 9]);

impl ShVector {
    pub fn zeros() -> Self {
        ShVector([0.0; 9])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Evaluate the 9-term real SH basis at a unit normal.
///
/// Errors when the input is not unit length within [`NORMAL_TOL`].
pub fn sh_basis(normal: [f64; 3]) -> Result<[f64; 9]> {
    let [x, y, z] = normal;
    let len = (x * x + y * y + z * z).sqrt();
    if !len.is_finite() || (len - 1.0).abs() > NORMAL_TOL {
        return Err(validation(format!(
            "sh_basis input has length {len}, expected 1 +/- {NORMAL_TOL}"
        )));
    }
    Ok(sh_basis_unchecked(x, y, z))
}

#[inline]
pub(crate) fn sh_basis_unchecked(x: f64, y: f64, z: f64) -> [f64; 9] {
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C2_0 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C2_2 * (x * x - y * y),
    ]
}

/// Outcome of [`fit_shc`]: the damped least-squares coefficients, the
/// residual RMS over the fitted pixels, and the numerical rank of the
/// design matrix (rank < 9 raises the deficiency flag; the fit itself is
/// still defined through the damping).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShFit {
    pub shc: ShVector,
    pub residual_rms: f64,
    pub rank: usize,
    pub rank_deficient: bool,
}

/// Least-squares SH coefficients for `shading = B(normals) . c` over valid
/// pixels where `mask = 1` (no mask means all valid pixels), solved by
/// normal equations with Tikhonov damping [`FIT_DAMPING`] on the diagonal.
pub fn fit_shc(
    shading: &ImagePlane,
    normals: &NormalMap,
    mask: Option<&crate::imaging::BinaryMask>,
) -> Result<ShFit> {
    if shading.channels() != 1 {
        return Err(validation("fit_shc expects single-channel shading"));
    }
    if shading.height() != normals.height() || shading.width() != normals.width() {
        return Err(validation("fit_shc: shading and normals dimensions differ"));
    }
    if let Some(m) = mask {
        if m.height() != shading.height() || m.width() != shading.width() {
            return Err(validation("fit_shc: mask dimensions differ"));
        }
    }
    let solver = ShSolver::prepare(normals, mask)?;
    Ok(solver.fit(&flatten_selected(shading, &solver.pixels)))
}

/// Precomputed SH fitting machinery for a fixed normal set. The renderer
/// fits coefficients every iteration against the same normals, so the Gram
/// matrix and its factorization are built once.
#[derive(Debug, Clone)]
pub struct ShSolver {
    /// (row, col) of each fitted pixel, in scan order.
    pub pixels: Vec<(usize, usize)>,
    /// Basis rows, one per fitted pixel. [N, 9]
    pub basis: Array2<f64>,
    /// Cholesky factor L of (B^T B + damping I), row-major lower triangle.
    chol: [f64; 81],
    pub rank: usize,
    pub rank_deficient: bool,
}

impl ShSolver {
    pub fn prepare(
        normals: &NormalMap,
        mask: Option<&crate::imaging::BinaryMask>,
    ) -> Result<Self> {
        let (h, w) = (normals.height(), normals.width());
        let mut pixels = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let masked_in = mask.map_or(true, |m| m.get(r, c) == 1);
                if normals.is_valid(r, c) && masked_in {
                    pixels.push((r, c));
                }
            }
        }
        if pixels.len() < 9 {
            return Err(validation(format!(
                "fit_shc needs at least 9 valid masked pixels, got {}",
                pixels.len()
            )));
        }
        let mut basis = Array2::zeros((pixels.len(), 9));
        for (i, &(r, c)) in pixels.iter().enumerate() {
            let n = normals.vector(r, c);
            let b = sh_basis_unchecked(n[0], n[1], n[2]);
            for j in 0..9 {
                basis[[i, j]] = b[j];
            }
        }
        // Gram matrix
        let mut gram = [0.0f64; 81];
        for i in 0..pixels.len() {
            for a in 0..9 {
                let ba = basis[[i, a]];
                for b in a..9 {
                    gram[a * 9 + b] += ba * basis[[i, b]];
                }
            }
        }
        for a in 0..9 {
            for b in 0..a {
                gram[a * 9 + b] = gram[b * 9 + a];
            }
        }
        let rank = gram_rank(&gram);
        let mut damped = gram;
        for a in 0..9 {
            damped[a * 9 + a] += FIT_DAMPING;
        }
        let chol = cholesky9(&damped).ok_or_else(|| {
            crate::Error::Numerical("SH normal equations are not positive definite".into())
        })?;
        Ok(Self {
            pixels,
            basis,
            chol,
            rank,
            rank_deficient: rank < 9,
        })
    }

    /// Solve for the coefficients of a shading sample vector (one value per
    /// fitted pixel, in `pixels` order).
    pub fn fit(&self, shading: &[f64]) -> ShFit {
        let shc = ShVector(self.solve_normal_eq(&self.rhs(shading)));
        let mut ss = 0.0;
        for (i, &s) in shading.iter().enumerate() {
            let mut pred = 0.0;
            for j in 0..9 {
                pred += self.basis[[i, j]] * shc.0[j];
            }
            ss += (s - pred) * (s - pred);
        }
        ShFit {
            shc,
            residual_rms: (ss / shading.len() as f64).sqrt(),
            rank: self.rank,
            rank_deficient: self.rank_deficient,
        }
    }

    /// B^T s.
    pub fn rhs(&self, shading: &[f64]) -> [f64; 9] {
        debug_assert_eq!(shading.len(), self.pixels.len());
        let mut rhs = [0.0f64; 9];
        for (i, &s) in shading.iter().enumerate() {
            for j in 0..9 {
                rhs[j] += self.basis[[i, j]] * s;
            }
        }
        rhs
    }

    /// (B^T B + damping I)^-1 v via the cached Cholesky factor.
    pub fn solve_normal_eq(&self, v: &[f64; 9]) -> [f64; 9] {
        chol_solve9(&self.chol, v)
    }

    /// Gradient helper: given dL/dc, returns dL/ds per fitted pixel, using
    /// c = (B^T B + damping I)^-1 B^T s  =>  dL/ds = B (B^T B + damping I)^-1 dL/dc.
    pub fn backprop_to_shading(&self, d_coeffs: &[f64; 9]) -> Vec<f64> {
        let u = self.solve_normal_eq(d_coeffs);
        let mut out = vec![0.0; self.pixels.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..9 {
                acc += self.basis[[i, j]] * u[j];
            }
            *o = acc;
        }
        out
    }
}

fn flatten_selected(shading: &ImagePlane, pixels: &[(usize, usize)]) -> Vec<f64> {
    pixels.iter().map(|&(r, c)| shading.get(0, r, c)).collect()
}

/// Numerical rank of the 9x9 Gram matrix via Gaussian elimination with
/// partial pivoting; pivots below a trace-relative threshold don't count.
fn gram_rank(gram: &[f64; 81]) -> usize {
    let mut m = *gram;
    let trace: f64 = (0..9).map(|i| m[i * 9 + i]).sum();
    let tol = 1e-10 * trace.max(f64::MIN_POSITIVE);
    let mut rank = 0;
    let mut row = 0;
    for col in 0..9 {
        let mut best = row;
        for r in row..9 {
            if m[r * 9 + col].abs() > m[best * 9 + col].abs() {
                best = r;
            }
        }
        if m[best * 9 + col].abs() <= tol {
            continue;
        }
        for c in 0..9 {
            m.swap(row * 9 + c, best * 9 + c);
        }
        for r in (row + 1)..9 {
            let f = m[r * 9 + col] / m[row * 9 + col];
            for c in col..9 {
                m[r * 9 + c] -= f * m[row * 9 + c];
            }
        }
        rank += 1;
        row += 1;
        if row == 9 {
            break;
        }
    }
    rank
}

/// Cholesky factorization of a 9x9 SPD matrix (row-major). Returns the
/// lower-triangular factor, or None when not positive definite.
fn cholesky9(a: &[f64; 81]) -> Option<[f64; 81]> {
    let mut l = [0.0f64; 81];
    for i in 0..9 {
        for j in 0..=i {
            let mut sum = a[i * 9 + j];
            for k in 0..j {
                sum -= l[i * 9 + k] * l[j * 9 + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * 9 + i] = sum.sqrt();
            } else {
                l[i * 9 + j] = sum / l[j * 9 + j];
            }
        }
    }
    Some(l)
}

fn chol_solve9(l: &[f64; 81], b: &[f64; 9]) -> [f64; 9] {
    // forward: L y = b
    let mut y = [0.0f64; 9];
    for i in 0..9 {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * 9 + k] * y[k];
        }
        y[i] = sum / l[i * 9 + i];
    }
    // backward: L^T x = y
    let mut x = [0.0f64; 9];
    for i in (0..9).rev() {
        let mut sum = y[i];
        for k in (i + 1)..9 {
            sum -= l[k * 9 + i] * x[k];
        }
        x[i] = sum / l[i * 9 + i];
    }
    x
}

/// Per-pixel `dot(sh_basis(n), c)` clamped to `[0, 1]`. Invalid-normal
/// pixels output 0.
pub fn eval_shc(shc: &ShVector, normals: &NormalMap) -> ImagePlane {
    let raw = eval_shc_raw(shc, normals);
    let (h, w) = raw.dim();
    let mut data = Array3::zeros((1, h, w));
    for r in 0..h {
        for c in 0..w {
            data[[0, r, c]] = raw[[r, c]].clamp(0.0, 1.0);
        }
    }
    ImagePlane::new(data).expect("clamped SH evaluation is a valid image")
}

/// Unclamped SH shading field. Invalid pixels are 0.
pub fn eval_shc_raw(shc: &ShVector, normals: &NormalMap) -> Array2<f64> {
    let (h, w) = (normals.height(), normals.width());
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if normals.is_valid(r, c) {
                let n = normals.vector(r, c);
                let b = sh_basis_unchecked(n[0], n[1], n[2]);
                out[[r, c]] = (0..9).map(|j| b[j] * shc.0[j]).sum();
            }
        }
    }
    out
}

/// Huber penalty between two coefficient vectors, summed over coefficients:
/// `0.5 d^2` for `|d| <= 1`, `|d| - 0.5` otherwise.
pub fn huber_shc_loss(a: &ShVector, b: &ShVector) -> f64 {
    a.0.iter().zip(b.0.iter()).map(|(x, y)| huber(x - y)).sum()
}

#[inline]
pub(crate) fn huber(d: f64) -> f64 {
    if d.abs() <= 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// d/dd of [`huber`]; magnitude never exceeds 1.
#[inline]
pub(crate) fn huber_grad(d: f64) -> f64 {
    if d.abs() <= 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Rotate an SH coefficient vector to follow a rotation of the normals by
/// angle `phi` about the +z axis, so that `eval(rotate(c), R n) = eval(c, n)`.
/// Band-wise closed form: band 1 (x, y) mixes with angle phi, band 2
/// (m = +/-1) with phi and (m = +/-2) with 2 phi.
pub fn rotate_shc_z(shc: &ShVector, phi: f64) -> ShVector {
    let (s1, c1) = phi.sin_cos();
    let (s2, c2) = (2.0 * phi).sin_cos();
    let c = &shc.0;
    let mut o = [0.0f64; 9];
    o[0] = c[0];
    // band 1: basis [y, z, x]; x' = x cos - y sin, y' = x sin + y cos
    o[1] = c1 * c[1] + s1 * c[3];
    o[2] = c[2];
    o[3] = -s1 * c[1] + c1 * c[3];
    // band 2: [xy, yz, (3z^2-1), xz, x^2-y^2]
    o[4] = c2 * c[4] + s2 * c[8];
    o[5] = c1 * c[5] + s1 * c[7];
    o[6] = c[6];
    o[7] = -s1 * c[5] + c1 * c[7];
    o[8] = -s2 * c[4] + c2 * c[8];
    ShVector(o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::BinaryMask;
    use rand::Rng;

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    }

    /// Brute-force basis via the analytic polynomials, written separately
    /// from the production constants.
    fn basis_oracle(n: [f64; 3]) -> [f64; 9] {
        let [x, y, z] = n;
        let pi = std::f64::consts::PI;
        let y00 = 0.5 * (1.0 / pi).sqrt();
        let c1 = (3.0 / (4.0 * pi)).sqrt();
        let c2 = 0.5 * (15.0 / pi).sqrt();
        let c20 = 0.25 * (5.0 / pi).sqrt();
        let c22 = 0.25 * (15.0 / pi).sqrt();
        [
            y00,
            c1 * y,
            c1 * z,
            c1 * x,
            c2 * x * y,
            c2 * y * z,
            c20 * (3.0 * z * z - 1.0),
            c2 * x * z,
            c22 * (x * x - y * y),
        ]
    }

    /// Sphere-of-normals map: all directions of the +z hemisphere plus a
    /// ring of horizontal normals, spanning a full-rank basis set.
    fn sphere_normals(size: usize) -> NormalMap {
        let mut vectors = Array3::zeros((3, size, size));
        let mut validity = Array2::zeros((size, size));
        let r = size as f64 / 2.0 - 0.5;
        let cx = (size as f64 - 1.0) / 2.0;
        for row in 0..size {
            for col in 0..size {
                let dx = (col as f64 - cx) / r;
                let dy = (row as f64 - cx) / r;
                let d2 = dx * dx + dy * dy;
                if d2 <= 1.0 {
                    let dz = (1.0 - d2).sqrt();
                    vectors[[0, row, col]] = dx;
                    vectors[[1, row, col]] = dy;
                    vectors[[2, row, col]] = dz;
                    validity[[row, col]] = 1u8;
                }
            }
        }
        NormalMap::new(vectors, validity).unwrap()
    }

    #[test]
    fn basis_at_plus_z() {
        let b = sh_basis([0.0, 0.0, 1.0]).unwrap();
        assert!((b[0] - 0.282095).abs() < 1e-6);
        assert!((b[2] - 0.488603).abs() < 1e-6);
        assert!((b[6] - 0.630783).abs() < 1e-5); // 0.315392 * 2
        for i in [1, 3, 4, 5, 7, 8] {
            assert_eq!(b[i], 0.0);
        }
    }

    #[test]
    fn basis_parity_under_z_flip() {
        let up = sh_basis([0.0, 0.0, 1.0]).unwrap();
        let down = sh_basis([0.0, 0.0, -1.0]).unwrap();
        assert_eq!(up[0], down[0]);
        assert_eq!(up[6], down[6]);
        assert_eq!(up[2], -down[2]);
    }

    #[test]
    fn basis_rejects_non_unit() {
        assert!(sh_basis([0.0, 0.0, 1.01]).is_err());
        assert!(sh_basis([0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn basis_matches_polynomial_oracle() {
        let mut rng = crate::rng::rng_for(11, 0, 0);
        for _ in 0..200 {
            let n = unit([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0f64),
            ]);
            let b = sh_basis(n).unwrap();
            let o = basis_oracle(n);
            for j in 0..9 {
                assert!((b[j] - o[j]).abs() < 1e-12, "term {j}: {} vs {}", b[j], o[j]);
            }
        }
    }

    #[test]
    fn fit_recovers_generating_coefficients() {
        let normals = sphere_normals(24);
        let mut rng = crate::rng::rng_for(12, 0, 0);
        for _ in 0..20 {
            let mut c = [0.0f64; 9];
            c[0] = rng.random_range(1.4..2.0);
            for v in c.iter_mut().skip(1) {
                *v = rng.random_range(-0.08..0.08);
            }
            let shc = ShVector(c);
            let shading = eval_shc(&shc, &normals);
            let fit = fit_shc(&shading, &normals, None).unwrap();
            assert!(!fit.rank_deficient, "sphere normals should be full rank");
            for j in 0..9 {
                assert!(
                    (fit.shc.0[j] - c[j]).abs() < 1e-6,
                    "coef {j}: {} vs {}",
                    fit.shc.0[j],
                    c[j]
                );
            }
        }
    }

    #[test]
    fn constant_shading_on_sphere_is_dc_only() {
        let normals = sphere_normals(32);
        let shading = ImagePlane::constant(1, 32, 32, 0.5).unwrap();
        // fit over valid pixels only
        let fit = fit_shc(&shading, &normals, None).unwrap();
        assert!((fit.shc.0[0] - 0.5 / SH_C0).abs() < 1e-6);
        for j in 1..9 {
            assert!(fit.shc.0[j].abs() < 1e-6, "coef {j} = {}", fit.shc.0[j]);
        }
    }

    #[test]
    fn planar_scene_flags_rank_deficiency_and_is_deterministic() {
        let mut vectors = Array3::zeros((3, 8, 8));
        let mut validity = Array2::zeros((8, 8));
        for r in 0..8 {
            for c in 0..8 {
                vectors[[2, r, c]] = 1.0;
                validity[[r, c]] = 1u8;
            }
        }
        let normals = NormalMap::new(vectors, validity).unwrap();
        let shading = ImagePlane::constant(1, 8, 8, 0.4).unwrap();
        let fit1 = fit_shc(&shading, &normals, None).unwrap();
        assert!(fit1.rank_deficient);
        assert!(fit1.rank < 9);
        let fit2 = fit_shc(&shading, &normals, None).unwrap();
        assert_eq!(fit1.shc, fit2.shc, "damped refit must be bit-identical");
    }

    #[test]
    fn eval_dc_only_is_one_everywhere_valid() {
        let normals = sphere_normals(16);
        let mut c = [0.0; 9];
        c[0] = 1.0 / SH_C0;
        let img = eval_shc(&ShVector(c), &normals);
        for r in 0..16 {
            for k in 0..16 {
                if normals.is_valid(r, k) {
                    assert!((img.get(0, r, k) - 1.0).abs() < 1e-12);
                } else {
                    assert_eq!(img.get(0, r, k), 0.0);
                }
            }
        }
    }

    #[test]
    fn eval_all_invalid_is_zero() {
        let vectors = Array3::zeros((3, 8, 8));
        let validity = Array2::zeros((8, 8));
        let normals = NormalMap::new(vectors, validity).unwrap();
        let mut c = [0.0; 9];
        c[0] = 2.0;
        let img = eval_shc(&ShVector(c), &normals);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn huber_knee_and_branches() {
        let a = ShVector([0.0; 9]);
        assert_eq!(huber_shc_loss(&a, &a), 0.0);
        let mut b = [0.0; 9];
        b[3] = 1.0;
        // both branch formulas agree at the knee: 0.5*1^2 = 1 - 0.5
        assert!((huber_shc_loss(&ShVector(b), &a) - 0.5).abs() < 1e-15);
        b[3] = 2.0;
        assert!((huber_shc_loss(&ShVector(b), &a) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn huber_is_symmetric_continuous_with_bounded_slope() {
        let mut a = ShVector::zeros();
        let mut b = ShVector::zeros();
        a.0[2] = 0.7;
        b.0[2] = -0.4;
        assert_eq!(huber_shc_loss(&a, &b), huber_shc_loss(&b, &a));
        // continuity at |d| = 1
        let eps = 1e-9;
        assert!((huber(1.0 - eps) - huber(1.0 + eps)).abs() < 1e-8);
        for d in [-3.0, -1.0, -0.3, 0.0, 0.5, 1.0, 4.0] {
            assert!(huber_grad(d).abs() <= 1.0);
        }
    }

    #[test]
    fn fit_is_linear_in_shading() {
        let normals = sphere_normals(20);
        let mut rng = crate::rng::rng_for(13, 0, 0);
        let n = normals.height();
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut d = Array3::zeros((1, n, n));
            for r in 0..n {
                for c in 0..n {
                    d[[0, r, c]] = rng.random_range(0.0..1.0);
                }
            }
            ImagePlane::new(d).unwrap()
        };
        let s1 = mk(&mut rng);
        let s2 = mk(&mut rng);
        let (alpha, beta) = (0.3, 0.45);
        let mut combo = Array3::zeros((1, n, n));
        for r in 0..n {
            for c in 0..n {
                combo[[0, r, c]] = alpha * s1.get(0, r, c) + beta * s2.get(0, r, c);
            }
        }
        let combo = ImagePlane::new(combo).unwrap();
        let f1 = fit_shc(&s1, &normals, None).unwrap().shc;
        let f2 = fit_shc(&s2, &normals, None).unwrap().shc;
        let fc = fit_shc(&combo, &normals, None).unwrap().shc;
        for j in 0..9 {
            assert!((fc.0[j] - (alpha * f1.0[j] + beta * f2.0[j])).abs() < 1e-8);
        }
    }

    #[test]
    fn fit_is_local_minimum_of_residual() {
        let normals = sphere_normals(16);
        let mut rng = crate::rng::rng_for(14, 0, 0);
        let mut d = Array3::zeros((1, 16, 16));
        for r in 0..16 {
            for c in 0..16 {
                d[[0, r, c]] = rng.random_range(0.0..1.0);
            }
        }
        let shading = ImagePlane::new(d).unwrap();
        let solver = ShSolver::prepare(&normals, None).unwrap();
        let s: Vec<f64> = solver
            .pixels
            .iter()
            .map(|&(r, c)| shading.get(0, r, c))
            .collect();
        let fit = solver.fit(&s);
        let rss = |c: &[f64; 9]| -> f64 {
            let mut acc = 0.0;
            for (i, &v) in s.iter().enumerate() {
                let mut pred = 0.0;
                for j in 0..9 {
                    pred += solver.basis[[i, j]] * c[j];
                }
                acc += (v - pred) * (v - pred);
            }
            acc
        };
        let base = rss(&fit.shc.0);
        for j in 0..9 {
            for delta in [-1e-3, 1e-3] {
                let mut c = fit.shc.0;
                c[j] += delta;
                assert!(rss(&c) >= base - 1e-12, "perturbing coef {j} decreased RSS");
            }
        }
    }

    #[test]
    fn eval_invariant_under_z_rotation() {
        let normals = sphere_normals(20);
        let shc = ShVector([1.8, 0.05, -0.3, 0.1, 0.04, -0.06, 0.08, 0.02, -0.05]);
        for phi in [0.3, std::f64::consts::FRAC_PI_2, 2.2] {
            let rotated_c = rotate_shc_z(&shc, phi);
            let (s, c) = phi.sin_cos();
            // rotate every normal by R_z(phi) and compare pointwise
            for r in 0..20 {
                for k in 0..20 {
                    if !normals.is_valid(r, k) {
                        continue;
                    }
                    let n = normals.vector(r, k);
                    let rn = [c * n[0] - s * n[1], s * n[0] + c * n[1], n[2]];
                    let b0 = sh_basis(n).unwrap();
                    let b1 = sh_basis(rn).unwrap();
                    let v0: f64 = (0..9).map(|j| b0[j] * shc.0[j]).sum();
                    let v1: f64 = (0..9).map(|j| b1[j] * rotated_c.0[j]).sum();
                    assert!((v0 - v1).abs() < 1e-10, "phi {phi}: {v0} vs {v1}");
                }
            }
        }
    }

    #[test]
    fn fit_respects_mask() {
        let normals = sphere_normals(20);
        // corrupt the left half of the shading, mask it out, fit on the rest
        let shc = ShVector([1.7, 0.0, 0.05, 0.0, 0.0, 0.0, 0.02, 0.0, 0.0]);
        let clean = eval_shc(&shc, &normals);
        let mut data = clean.data().clone();
        let mut mask = Array2::ones((20, 20));
        for r in 0..20 {
            for c in 0..10 {
                data[[0, r, c]] = 0.9;
                mask[[r, c]] = 0u8;
            }
        }
        let corrupted = ImagePlane::new(data).unwrap();
        let mask = BinaryMask::new(mask).unwrap();
        let fit = fit_shc(&corrupted, &normals, Some(&mask)).unwrap();
        for j in 0..9 {
            assert!((fit.shc.0[j] - shc.0[j]).abs() < 1e-6);
        }
    }
}

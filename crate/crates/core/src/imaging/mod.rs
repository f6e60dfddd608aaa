//! Foundational image types, the cut-and-paste operator, masks, intrinsic
//! composition and resampling.
//!
//! Images are linear-intensity fields in `[0, 1]`; file I/O applies and
//! removes sRGB gamma at the boundary only (see [`io`]). Clamping is always
//! explicit — arithmetic never clamps silently.

pub mod io;

use ndarray::{Array2, Array3};

use crate::error::{validation, Result};

/// Minimum image side length accepted by constructors.
pub const MIN_SIDE: usize = 8;

/// An H×W×C field of linear intensities in `[0, 1]`. Channels are 1 or 3.
///
/// Data is stored `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    data: Array3<f64>,
}

impl ImagePlane {
    /// Wrap a `[C, H, W]` array. Values must be finite and in `[0, 1]`,
    /// channels 1 or 3, sides at least [`MIN_SIDE`].
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(validation(format!("image channels must be 1 or 3, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(validation(format!(
                "image sides must be >= {MIN_SIDE}, got {h}x{w}"
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(validation(format!(
                "image values must be finite and in [0,1], found {bad}"
            )));
        }
        Ok(Self { data })
    }

    /// Constant-valued image.
    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    /// Clamp an arbitrary finite field into `[0, 1]` and wrap it.
    /// Non-finite values are rejected, never silently mapped.
    pub fn from_clamped(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::Numerical(
                "non-finite values in image field".into(),
            ));
        }
        Self::new(data.mapv(|v| v.clamp(0.0, 1.0)))
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[[channel, row, col]]
    }

    /// Per-pixel luminance: the channel mean.
    pub fn luminance(&self, row: usize, col: usize) -> f64 {
        let c = self.channels();
        (0..c).map(|k| self.data[[k, row, col]]).sum::<f64>() / c as f64
    }

    fn same_dims(&self, other: &ImagePlane) -> bool {
        self.height() == other.height() && self.width() == other.width()
    }
}

/// A per-pixel `{0, 1}` mask. Pipeline-wide convention: 0 inside the
/// inserted fragment, 1 outside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<u8>,
}

impl BinaryMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(validation("mask values must be exactly 0 or 1"));
        }
        Ok(Self { data })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            data: Array2::from_elem((height, width), 1),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::from_elem((height, width), 0),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[[row, col]]
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Mask as an f64 field, for arithmetic against image planes.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(|v| v as f64)
    }

    /// Complement: fragment pixels become 1.
    pub fn invert(&self) -> BinaryMask {
        BinaryMask {
            data: self.data.mapv(|v| 1 - v),
        }
    }
}

/// Source image + mask + scale + offset defining the cut-and-paste operator.
///
/// `source_mask` is 0 on fragment pixels in source coordinates. `offset` is
/// the (row, col) of the scaled fragment bounding box's top-left corner in
/// target coordinates.
#[derive(Debug, Clone)]
pub struct FragmentPlacement {
    pub source: ImagePlane,
    pub source_mask: BinaryMask,
    pub scale: f64,
    pub offset: (i64, i64),
}

impl FragmentPlacement {
    /// Bounding box (r0, c0, r1, c1) of fragment pixels in source
    /// coordinates, end-exclusive. Errors when the mask has no fragment.
    pub fn fragment_bbox(&self) -> Result<(usize, usize, usize, usize)> {
        let m = self.source_mask.data();
        let (h, w) = m.dim();
        let (mut r0, mut c0, mut r1, mut c1) = (h, w, 0usize, 0usize);
        for r in 0..h {
            for c in 0..w {
                if m[[r, c]] == 0 {
                    r0 = r0.min(r);
                    c0 = c0.min(c);
                    r1 = r1.max(r + 1);
                    c1 = c1.max(c + 1);
                }
            }
        }
        if r0 >= r1 {
            return Err(validation(
                "empty fragment: source mask has no zero pixels",
            ));
        }
        Ok((r0, c0, r1, c1))
    }

    fn validate(&self, target: &ImagePlane) -> Result<(usize, usize, usize, usize)> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(validation(format!("scale must be positive, got {}", self.scale)));
        }
        if self.source.height() != self.source_mask.height()
            || self.source.width() != self.source_mask.width()
        {
            return Err(validation("source image and source mask dimensions differ"));
        }
        let (r0, c0, r1, c1) = self.fragment_bbox()?;
        let sh = (((r1 - r0) as f64) * self.scale).round().max(1.0) as usize;
        let sw = (((c1 - c0) as f64) * self.scale).round().max(1.0) as usize;
        let (or, oc) = self.offset;
        if or < 0
            || oc < 0
            || or as usize + sh > target.height()
            || oc as usize + sw > target.width()
        {
            return Err(validation(format!(
                "placement out of bounds: scaled fragment {}x{} at ({}, {}) exceeds target {}x{}",
                sh,
                sw,
                or,
                oc,
                target.height(),
                target.width()
            )));
        }
        Ok((r0, c0, sh, sw))
    }
}

/// Albedo (3ch), shading (1ch) and gloss (1ch) fields with the composition
/// contract `I = clamp(A ⊙ S + G)`.
#[derive(Debug, Clone)]
pub struct DecompositionTriple {
    pub albedo: ImagePlane,
    pub shading: ImagePlane,
    pub gloss: ImagePlane,
}

impl DecompositionTriple {
    pub fn new(albedo: ImagePlane, shading: ImagePlane, gloss: ImagePlane) -> Result<Self> {
        if albedo.channels() != 3 {
            return Err(validation("albedo must have 3 channels"));
        }
        if shading.channels() != 1 || gloss.channels() != 1 {
            return Err(validation("shading and gloss must have 1 channel"));
        }
        if !albedo.same_dims(&shading) || !albedo.same_dims(&gloss) {
            return Err(validation("decomposition fields must share dimensions"));
        }
        Ok(Self {
            albedo,
            shading,
            gloss,
        })
    }
}

/// Result of [`masked_distance`]: the mean squared difference and a flag for
/// the degenerate empty-mask case (defined as 0, but worth surfacing).
#[derive(Debug, Clone, Copy)]
pub struct MaskedDistance {
    pub value: f64,
    pub empty_mask: bool,
}

/// Mean of squared differences over pixels where `mask = 1`, summed over
/// channels. Returns 0 with `empty_mask = true` when the mask is all zeros.
pub fn masked_distance(a: &ImagePlane, b: &ImagePlane, mask: &BinaryMask) -> Result<MaskedDistance> {
    if !a.same_dims(b) || a.channels() != b.channels() {
        return Err(validation("masked_distance: image dimensions differ"));
    }
    if a.height() != mask.height() || a.width() != mask.width() {
        return Err(validation("masked_distance: mask dimensions differ"));
    }
    let n = mask.count_ones();
    if n == 0 {
        return Ok(MaskedDistance {
            value: 0.0,
            empty_mask: true,
        });
    }
    let mut sum = 0.0;
    for c in 0..a.channels() {
        for r in 0..a.height() {
            for k in 0..a.width() {
                if mask.get(r, k) == 1 {
                    let d = a.get(c, r, k) - b.get(c, r, k);
                    sum += d * d;
                }
            }
        }
    }
    Ok(MaskedDistance {
        value: sum / n as f64,
        empty_mask: false,
    })
}

/// Per-pixel `clamp(A·S + G, 0, 1)`, with shading and gloss broadcast over
/// the albedo channels.
pub fn compose_intrinsics(t: &DecompositionTriple) -> ImagePlane {
    let (h, w) = (t.albedo.height(), t.albedo.width());
    let mut out = Array3::zeros((3, h, w));
    for c in 0..3 {
        for r in 0..h {
            for k in 0..w {
                let v = t.albedo.get(c, r, k) * t.shading.get(0, r, k) + t.gloss.get(0, r, k);
                out[[c, r, k]] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImagePlane::new(out).expect("composition of valid fields is valid")
}

/// Clamp-to-edge bilinear sample of one channel at fractional coordinates.
fn bilinear_sample(data: &Array3<f64>, channel: usize, row: f64, col: f64) -> f64 {
    let (_, h, w) = data.dim();
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let top = data[[channel, r0, c0]] * (1.0 - fc) + data[[channel, r0, c1]] * fc;
    let bot = data[[channel, r1, c0]] * (1.0 - fc) + data[[channel, r1, c1]] * fc;
    top * (1.0 - fr) + bot * fr
}

/// Cut the fragment out of the source, scale it, and paste it into the
/// target. Returns the composite and a mask that is 0 exactly on pasted
/// pixels. Intensities are resampled bilinearly; the mask nearest-neighbor,
/// to preserve binarity.
pub fn cut_and_paste(
    placement: &FragmentPlacement,
    target: &ImagePlane,
) -> Result<(ImagePlane, BinaryMask)> {
    if target.channels() != placement.source.channels() {
        return Err(validation("source and target channel counts differ"));
    }
    let (r0, c0, sh, sw) = placement.validate(target)?;
    let (or, oc) = (placement.offset.0 as usize, placement.offset.1 as usize);
    let s = placement.scale;

    let mut out = target.data().clone();
    let mut mask = BinaryMask::ones(target.height(), target.width()).data.clone();
    let src = placement.source.data();
    let src_mask = placement.source_mask.data();
    let (msk_h, msk_w) = src_mask.dim();

    for r in 0..sh {
        for c in 0..sw {
            // Pixel-center mapping back into source coordinates.
            let sr = r0 as f64 + (r as f64 + 0.5) / s - 0.5;
            let sc = c0 as f64 + (c as f64 + 0.5) / s - 0.5;
            // Nearest neighbor for the mask.
            let nr = sr.round().clamp(0.0, (msk_h - 1) as f64) as usize;
            let nc = sc.round().clamp(0.0, (msk_w - 1) as f64) as usize;
            if src_mask[[nr, nc]] != 0 {
                continue;
            }
            for ch in 0..target.channels() {
                out[[ch, or + r, oc + c]] = bilinear_sample(src, ch, sr, sc);
            }
            mask[[or + r, oc + c]] = 0;
        }
    }

    let mask = BinaryMask::new(mask)?;
    if mask.count_zeros() == 0 {
        return Err(validation("cut_and_paste produced an empty paste region"));
    }
    Ok((ImagePlane::new(out)?, mask))
}

/// Bilinear resampling to a new size. Values stay in `[0, 1]` because
/// bilinear interpolation is convex.
pub fn resample(img: &ImagePlane, new_height: usize, new_width: usize) -> Result<ImagePlane> {
    if new_height < MIN_SIDE || new_width < MIN_SIDE {
        return Err(validation(format!(
            "resample target must be >= {MIN_SIDE} px, got {new_height}x{new_width}"
        )));
    }
    if new_height == img.height() && new_width == img.width() {
        return Ok(img.clone());
    }
    let (ch, h, w) = img.data().dim();
    let sy = h as f64 / new_height as f64;
    let sx = w as f64 / new_width as f64;
    let mut out = Array3::zeros((ch, new_height, new_width));
    for c in 0..ch {
        for r in 0..new_height {
            let sr = (r as f64 + 0.5) * sy - 0.5;
            for k in 0..new_width {
                let sc = (k as f64 + 0.5) * sx - 0.5;
                out[[c, r, k]] = bilinear_sample(img.data(), c, sr, sc);
            }
        }
    }
    ImagePlane::new(out)
}

/// Resample a binary mask with nearest-neighbor, preserving binarity.
pub fn resample_mask(mask: &BinaryMask, new_height: usize, new_width: usize) -> Result<BinaryMask> {
    if new_height == 0 || new_width == 0 {
        return Err(validation("mask resample target must be positive"));
    }
    let (h, w) = mask.data().dim();
    let sy = h as f64 / new_height as f64;
    let sx = w as f64 / new_width as f64;
    let mut out = Array2::zeros((new_height, new_width));
    for r in 0..new_height {
        let sr = ((r as f64 + 0.5) * sy - 0.5).round().clamp(0.0, (h - 1) as f64) as usize;
        for c in 0..new_width {
            let sc = ((c as f64 + 0.5) * sx - 0.5).round().clamp(0.0, (w - 1) as f64) as usize;
            out[[r, c]] = mask.data()[[sr, sc]];
        }
    }
    BinaryMask::new(out)
}

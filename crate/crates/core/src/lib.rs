//! Cut-and-paste neural reshading.
//!
//! Given a fragment cut from a source image and pasted into a target scene,
//! this crate optimizes a per-image neural renderer so that the composite's
//! inferred albedo stays the cut-and-paste albedo while its shading becomes
//! consistent with the target scene's illumination. No geometric model of
//! the fragment is required.
//!
//! The pipeline stages, in dependency order:
//!
//! 1. [`paradigms`] — procedural albedo/shading/gloss samples used as the
//!    only training data for the decomposition network, plus a synthetic
//!    scene oracle with exact normals for end-to-end tests.
//! 2. [`decomposition`] — a small U-Net mapping an image to
//!    (albedo, shading, gloss).
//! 3. [`consistency`] — a pixel-wise discriminator scoring (shading, normal)
//!    pairs for plausibility.
//! 4. [`renderer`] — the per-image renderer built on inverse partial
//!    convolutions, optimized against reconstruction, decomposition,
//!    spherical-harmonic and neural shading-consistency losses.
//! 5. [`postprocess`] — artifact removal and high-resolution recomposition.
//! 6. [`evalsuite`] — pairwise preference statistics (rates with standard
//!    errors, Bradley-Terry strengths).
//!
//! All numerical kernels run data-parallel via rayon when the `parallel`
//! feature (default) is enabled, with a bit-identical sequential fallback
//! otherwise. Every operation is deterministic given its seed.

pub mod consistency;
pub mod decomposition;
pub mod error;
pub mod evalsuite;
pub mod imaging;
pub mod nn;
pub mod normals;
pub mod paradigms;
pub mod pipeline;
pub mod postprocess;
pub mod renderer;
pub mod sh;

pub(crate) mod exec;
pub mod rng;

pub use error::{Error, Result};
pub use imaging::{BinaryMask, DecompositionTriple, FragmentPlacement, ImagePlane};
pub use sh::{NormalMap, ShVector};

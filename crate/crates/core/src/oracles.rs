//! Perceptual models used by the losses and metrics.
//!
//! The three traits are the plug-in seams for a feature extractor `F`, an
//! identity recognizer `R` and a landmark predictor `P`. Each model declares
//! a square input size; [`OracleSet::resize_for`] bilinearly resizes images
//! to it. The crate ships deterministic, differentiable toy models only.

use std::fmt;
use std::sync::Arc;

use latentswap_autograd::{Conv2dSpec, Tape, Tensor, Var};

use crate::params::{Initializer, ParamSet};
use crate::{Error, FaceImage, Result};

/// Feature stack extractor behind the perceptual distance.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn input_size(&self) -> usize;
    /// `image` is `[3, S, S]` at [`input_size`](Self::input_size).
    fn features<'t>(&self, image: Var<'t>) -> Vec<Var<'t>>;
}

/// Face recognizer producing unit-norm embeddings.
pub trait IdentityRecognizer: Send + Sync {
    fn name(&self) -> &str;
    fn input_size(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    fn embed<'t>(&self, image: Var<'t>) -> Var<'t>;
}

/// Landmark predictor returning `[K, 2]` pixel coordinates `(x, y)` in its
/// input frame.
pub trait LandmarkPredictor: Send + Sync {
    fn name(&self) -> &str;
    fn input_size(&self) -> usize;
    fn landmark_count(&self) -> usize;
    fn landmarks<'t>(&self, image: Var<'t>) -> Var<'t>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleKind {
    Features,
    Recognizer,
    Landmarks,
}

/// Input side of each model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OracleSizes {
    pub features: usize,
    pub recognizer: usize,
    pub landmarks: usize,
}

impl Default for OracleSizes {
    fn default() -> Self {
        Self {
            features: 256,
            recognizer: 112,
            landmarks: 256,
        }
    }
}

impl OracleSizes {
    pub fn uniform(side: usize) -> Self {
        Self {
            features: side,
            recognizer: side,
            landmarks: side,
        }
    }
}

/// Seeded two-layer strided convolution stack.
pub struct ToyFeatureExtractor {
    params: ParamSet,
    size: usize,
}

impl ToyFeatureExtractor {
    pub fn new(size: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut init = Initializer::new(&mut params, seed);
        init.conv("conv1", 8, 3, 3, true);
        init.conv("conv2", 16, 8, 3, true);
        Self { params, size }
    }
}

impl FeatureExtractor for ToyFeatureExtractor {
    fn name(&self) -> &str {
        "toy"
    }

    fn input_size(&self) -> usize {
        self.size
    }

    fn features<'t>(&self, image: Var<'t>) -> Vec<Var<'t>> {
        let b = self.params.bind(image.tape(), false);
        let spec = Conv2dSpec::new(2, 1);
        let f1 = b.scope("conv1").conv(image, spec, true).leaky_relu(0.2);
        let f2 = b.scope("conv2").conv(f1, spec, true).leaky_relu(0.2);
        vec![f1, f2]
    }
}

/// Average pooling to a coarse grid, a seeded projection, then ℓ2
/// normalization.
pub struct ToyRecognizer {
    projection: Tensor,
    size: usize,
    grid: usize,
}

/// Width of toy embeddings.
pub const TOY_EMBEDDING_DIM: usize = 64;

impl ToyRecognizer {
    pub fn new(size: usize, seed: u64) -> Self {
        let grid = (1..=14.min(size)).rev().find(|g| size.is_multiple_of(*g)).unwrap_or(1);
        let fan_in = 3 * grid * grid;
        let mut p = ParamSet::new();
        Initializer::new(&mut p, seed).normal("w", &[TOY_EMBEDDING_DIM, fan_in], 1.0 / (fan_in as f64).sqrt());
        Self {
            projection: p.expect("w").clone(),
            size,
            grid,
        }
    }

    /// Projection before normalization.
    pub fn raw_embedding<'t>(&self, image: Var<'t>) -> Var<'t> {
        let pooled = image.avg_pool(self.size / self.grid);
        let flat = pooled.reshape(&[3 * self.grid * self.grid]);
        let tape = image.tape();
        flat.linear(
            &tape.constant(self.projection.clone()),
            &tape.constant(Tensor::zeros([TOY_EMBEDDING_DIM])),
        )
    }
}

/// `v / sqrt(|v|² + 1e-24)`; a zero vector stays zero.
pub fn l2_normalize<'t>(v: Var<'t>) -> Var<'t> {
    let inv = v.square().sum().add_scalar(1e-24).sqrt().recip();
    v.mul_scalar_var(&inv)
}

impl IdentityRecognizer for ToyRecognizer {
    fn name(&self) -> &str {
        "toy"
    }

    fn input_size(&self) -> usize {
        self.size
    }

    fn embedding_dim(&self) -> usize {
        TOY_EMBEDDING_DIM
    }

    fn embed<'t>(&self, image: Var<'t>) -> Var<'t> {
        l2_normalize(self.raw_embedding(image))
    }
}

/// Soft-argmax over the response maps of a seeded convolution.
pub struct ToyLandmarks {
    params: ParamSet,
    size: usize,
    grid: Tensor,
    temperature: f64,
}

/// Landmarks predicted by the toy model.
pub const TOY_LANDMARKS: usize = 5;

impl ToyLandmarks {
    pub fn new(size: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        Initializer::new(&mut params, seed).conv("conv", TOY_LANDMARKS, 3, 3, false);
        let mut grid = Vec::with_capacity(size * size * 2);
        for y in 0..size {
            for x in 0..size {
                grid.push(x as f64);
                grid.push(y as f64);
            }
        }
        Self {
            params,
            size,
            grid: Tensor::new([size * size, 2], grid),
            temperature: 0.5,
        }
    }
}

impl LandmarkPredictor for ToyLandmarks {
    fn name(&self) -> &str {
        "toy"
    }

    fn input_size(&self) -> usize {
        self.size
    }

    fn landmark_count(&self) -> usize {
        TOY_LANDMARKS
    }

    fn landmarks<'t>(&self, image: Var<'t>) -> Var<'t> {
        let tape = image.tape();
        let b = self.params.bind(tape, false);
        let maps = b.scope("conv").conv(image, Conv2dSpec::new(1, 1), false);
        let logits = maps
            .reshape(&[TOY_LANDMARKS, self.size * self.size])
            .scale(1.0 / self.temperature);
        logits.softmax_rows().matmul(&tape.constant(self.grid.clone()))
    }
}

/// The three models a loss or metric needs.
#[derive(Clone)]
pub struct OracleSet {
    pub features: Arc<dyn FeatureExtractor>,
    pub recognizer: Arc<dyn IdentityRecognizer>,
    pub landmarks: Arc<dyn LandmarkPredictor>,
}

impl fmt::Debug for OracleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleSet")
            .field("features", &(self.features.name(), self.features.input_size()))
            .field("recognizer", &(self.recognizer.name(), self.recognizer.input_size()))
            .field("landmarks", &(self.landmarks.name(), self.landmarks.input_size()))
            .finish()
    }
}

impl OracleSet {
    pub fn toy(sizes: OracleSizes, seed: u64) -> Self {
        Self {
            features: Arc::new(ToyFeatureExtractor::new(sizes.features, seed)),
            recognizer: Arc::new(ToyRecognizer::new(sizes.recognizer, seed.wrapping_add(1))),
            landmarks: Arc::new(ToyLandmarks::new(sizes.landmarks, seed.wrapping_add(2))),
        }
    }

    /// Looks models up by registered name. Only `"toy"` is built in.
    pub fn from_names(features: &str, recognizer: &str, landmarks: &str, sizes: OracleSizes, seed: u64) -> Result<Self> {
        for (what, name) in [("feature extractor", features), ("recognizer", recognizer), ("landmark predictor", landmarks)] {
            if name != "toy" {
                return Err(Error::Config(format!("no {what} registered as '{name}'")));
            }
        }
        Ok(Self::toy(sizes, seed))
    }

    pub fn input_size(&self, kind: OracleKind) -> usize {
        match kind {
            OracleKind::Features => self.features.input_size(),
            OracleKind::Recognizer => self.recognizer.input_size(),
            OracleKind::Landmarks => self.landmarks.input_size(),
        }
    }

    /// Differentiable resize to a model's input size.
    pub fn resize_var<'t>(&self, kind: OracleKind, image: Var<'t>) -> Var<'t> {
        let s = self.input_size(kind);
        image.resize_bilinear(s, s)
    }

    /// Bilinear resize to a model's input size; unchanged when it already
    /// matches.
    pub fn resize_for(&self, kind: OracleKind, image: &FaceImage) -> FaceImage {
        let s = self.input_size(kind);
        if image.resolution() == s {
            return image.clone();
        }
        let tape = Tape::new();
        let out = tape.constant(image.pixels().clone()).resize_bilinear(s, s);
        let clamped = out.value().map(|v| v.clamp(-1.0, 1.0));
        FaceImage::new(clamped).expect("bilinear resize of a valid image stays valid")
    }

    /// Embedding of one image, resized as needed.
    pub fn embed(&self, image: &FaceImage) -> Tensor {
        let tape = Tape::new();
        let x = self.resize_var(OracleKind::Recognizer, tape.constant(image.pixels().clone()));
        (*self.recognizer.embed(x).value()).clone()
    }

    /// Landmarks of one image, resized as needed.
    pub fn landmarks_of(&self, image: &FaceImage) -> Tensor {
        let tape = Tape::new();
        let x = self.resize_var(OracleKind::Landmarks, tape.constant(image.pixels().clone()));
        (*self.landmarks.landmarks(x).value()).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(side: usize, k: f64) -> FaceImage {
        let n = 3 * side * side;
        FaceImage::new(Tensor::new([3, side, side], (0..n).map(|i| (i as f64 * k).sin() * 0.9).collect())).unwrap()
    }

    #[test]
    fn resize_targets_and_identity() {
        let o = OracleSet::toy(OracleSizes::default(), 0);
        assert_eq!(o.resize_for(OracleKind::Recognizer, &img(64, 0.1)).resolution(), 112);
        let x = img(112, 0.2);
        assert_eq!(o.resize_for(OracleKind::Recognizer, &x), x);
    }

    #[test]
    fn down_then_up_is_lossy() {
        let small = OracleSet::toy(OracleSizes::uniform(16), 0);
        let big = OracleSet::toy(OracleSizes::uniform(32), 0);
        let x = img(32, 0.37);
        let round = big.resize_for(OracleKind::Features, &small.resize_for(OracleKind::Features, &x));
        assert_ne!(round, x);
    }

    #[test]
    fn embeddings_are_unit_norm_and_scale_invariant() {
        let r = ToyRecognizer::new(32, 3);
        let tape = Tape::new();
        let x = tape.constant(img(32, 0.11).into_pixels());
        let e = r.embed(x);
        assert!((e.value().norm() - 1.0).abs() < 1e-6);
        let scaled = l2_normalize(r.raw_embedding(x).scale(7.5));
        assert!(scaled.value().max_abs_diff(&e.value()) < 1e-12);
    }

    #[test]
    fn landmarks_inside_frame() {
        let p = ToyLandmarks::new(16, 1);
        let tape = Tape::new();
        let l = p.landmarks(tape.constant(img(16, 0.5).into_pixels()));
        assert_eq!(l.shape(), vec![TOY_LANDMARKS, 2]);
        assert!(l.value().data().iter().all(|&v| (0.0..=15.0).contains(&v)));
    }

    #[test]
    fn unknown_plugin_is_config_error() {
        let r = OracleSet::from_names("toy", "arcface", "toy", OracleSizes::default(), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}

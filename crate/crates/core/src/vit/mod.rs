//! Vision Transformer classifier: patch embedding with learned positions,
//! a stack of pre-norm encoder layers, and an MLP head over the flattened
//! token sequence.

mod model;
mod patch;

use thiserror::Error;

use crate::data::ImageShape;
use crate::tensor::TensorError;

pub use model::{count_parameters, param_shapes, EncoderLayerIds, ForwardTrace, Mode, ParamCount, VisionTransformer};
pub use patch::{patchify, unpatchify};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image {height}x{width} is not divisible into {patch}x{patch} patches")]
    Indivisible { height: usize, width: usize, patch: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Nonlinearity used in the encoder MLPs and the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Architecture hyperparameters. `Default` is the 72×72×3 configuration:
/// 6×6 patches, width 64, 8 layers, encoder MLP (128, 64), head
/// (2042, 1048), 4 classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image: ImageShape,
    pub patch_size: usize,
    pub projection_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Hidden sizes of each encoder MLP; the last must equal `projection_dim`.
    pub encoder_mlp_dims: Vec<usize>,
    pub head_dims: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub head_dropout_rate: f64,
    pub activation: Activation,
    pub layernorm_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::new(72, 72, 3),
            patch_size: 6,
            projection_dim: 64,
            num_layers: 8,
            num_heads: 4,
            encoder_mlp_dims: vec![128, 64],
            head_dims: vec![2042, 1048],
            num_classes: 4,
            dropout_rate: 0.1,
            head_dropout_rate: 0.5,
            activation: Activation::Gelu,
            layernorm_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    /// Head sizes (2048, 1024) instead of the literal (2042, 1048).
    pub fn with_power_of_two_head(mut self) -> Self {
        self.head_dims = vec![2048, 1024];
        self
    }

    pub fn num_patches(&self) -> usize {
        (self.image.height / self.patch_size) * (self.image.width / self.patch_size)
    }

    /// Scalars per flattened patch, `P² · C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image.channels
    }

    pub fn head_dim(&self) -> usize {
        self.projection_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        let ImageShape { height, width, channels } = self.image;
        if height == 0 || width == 0 || channels == 0 || self.patch_size == 0 {
            return bad(format!("image {height}x{width}x{channels} and patch {} must be positive", self.patch_size));
        }
        if height % self.patch_size != 0 || width % self.patch_size != 0 {
            return Err(ModelError::Indivisible { height, width, patch: self.patch_size });
        }
        if self.projection_dim == 0 || self.num_heads == 0 || self.num_classes == 0 {
            return bad("projection_dim, num_heads and num_classes must be positive".into());
        }
        if self.projection_dim % self.num_heads != 0 {
            return bad(format!("projection_dim {} is not divisible by num_heads {}", self.projection_dim, self.num_heads));
        }
        if self.encoder_mlp_dims.last() != Some(&self.projection_dim) {
            return bad(format!("encoder MLP {:?} must end at projection_dim {}", self.encoder_mlp_dims, self.projection_dim));
        }
        if self.encoder_mlp_dims.iter().chain(&self.head_dims).any(|&d| d == 0) {
            return bad("MLP widths must be positive".into());
        }
        for (name, rate) in [("dropout_rate", self.dropout_rate), ("head_dropout_rate", self.head_dropout_rate)] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} = {rate} outside [0, 1)"));
            }
        }
        if !(self.layernorm_eps > 0.0) {
            return bad("layernorm_eps must be positive".into());
        }
        Ok(())
    }
}

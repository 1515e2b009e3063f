//! Training objectives with hand-derived gradients.
//!
//! Every kernel returns its value together with the gradient of that value
//! with respect to its continuous inputs. All arithmetic is `f64`.

mod bbox;
pub mod gradcheck;
mod reid;
mod seg;
mod text;

pub use bbox::{box_params_normalized, ciou_loss, ciou_loss_frozen_alpha, ciou_loss_params, smooth_l1_loss, CiouLoss};
pub use gradcheck::finite_diff_gradient;
pub use reid::{
    cosine_distance, reid_loss, soft_weights, weighted_distance, CosineDistance, Emphasis, ReidBatch, ReidGrads,
    ReidIdentity, ReidLoss, WeightedDistance,
};
pub use seg::{dice_loss, sa_loss, sa_loss_params, sigmoid, wbce_loss, FgWeight, SaComponents, SaLoss};
pub use text::autoregressive_ce;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite input")]
    NonFinite,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("degenerate box: width and height must be > 0")]
    DegenerateBox,
    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("no supervised positions")]
    NoSupervision,
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

/// Which reading of the negative weighting to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeMining {
    /// Same softmax as positives: largest negative distances weigh most.
    Literal,
    /// Softmax over negated distances: closest negatives weigh most.
    Hard,
}

impl NegativeMining {
    pub fn emphasis(self) -> Emphasis {
        match self {
            NegativeMining::Literal => Emphasis::TowardMax,
            NegativeMining::Hard => Emphasis::TowardMin,
        }
    }
}

impl std::str::FromStr for NegativeMining {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literal" => Ok(Self::Literal),
            "hard" => Ok(Self::Hard),
            other => Err(LossError::InvalidConfig(format!("unknown mining mode {other:?}"))),
        }
    }
}

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_LAMBDA_WBCE: f64 = 2.0;
pub const DEFAULT_LAMBDA_OTHER: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_reid: f64,
    pub lambda_wbce: f64,
    pub lambda_dice: f64,
    pub lambda_smooth: f64,
    pub lambda_ciou: f64,
    pub smooth_l1_beta: f64,
    pub dice_epsilon: f64,
    pub wbce_fg_weight: FgWeight,
    pub negative_mining: NegativeMining,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda_reid: DEFAULT_LAMBDA_OTHER,
            lambda_wbce: DEFAULT_LAMBDA_WBCE,
            lambda_dice: DEFAULT_LAMBDA_OTHER,
            lambda_smooth: DEFAULT_LAMBDA_OTHER,
            lambda_ciou: DEFAULT_LAMBDA_OTHER,
            smooth_l1_beta: 1.0,
            dice_epsilon: 1.0,
            wbce_fg_weight: FgWeight::Auto,
            negative_mining: NegativeMining::Literal,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        let weights = [self.lambda_reid, self.lambda_wbce, self.lambda_dice, self.lambda_smooth, self.lambda_ciou];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LossError::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if !(self.smooth_l1_beta > 0.0 && self.dice_epsilon > 0.0) {
            return Err(LossError::InvalidConfig("smooth_l1_beta and dice_epsilon must be > 0".into()));
        }
        if let FgWeight::Fixed(w) = self.wbce_fg_weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(LossError::InvalidConfig(format!("fg weight must be > 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Dense row-major real grid matching a mask's dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, LossError> {
        if values.len() != width * height {
            return Err(LossError::DimensionMismatch(values.len(), width * height));
        }
        if width == 0 || height == 0 {
            return Err(LossError::Empty);
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self { width, height, values: vec![v; width * height] }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { width: self.width, height: self.height, values: self.values.iter().map(|&v| f(v)).collect() }
    }
}

/// `L = L_reid + L_text + L_SA`.
pub fn total_loss(reid: f64, text: f64, sa: f64) -> f64 {
    reid + text + sa
}

/// Overflow-free `ln(1 + e^z)`.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

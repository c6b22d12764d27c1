use serde::{Deserialize, Serialize};

use crate::bank::DEFAULT_CAPACITY;
use crate::contrast::{RegSign, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::selftrain::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_CAT_MAX_RATIO, DEFAULT_CROP_TRIALS};

use super::model::ConceptSpace;
use super::objective::Variant;
use super::scene::GeneratorConfig;

/// Hyper-parameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda_cl: f64,
    pub lambda_reg: f64,
    /// Pixel confidence threshold of the image-level pseudo-label weight.
    pub alpha: f64,
    /// EMA momentum of the teacher.
    pub beta: f64,
    pub bank_size: usize,
    pub tau: f64,
    /// Contrast and regularizer are active for iterations `> warmup`.
    pub warmup: usize,
    pub iterations: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    /// Class-balanced cropping; plain random crops otherwise.
    pub cbc: bool,
    pub cat_max_ratio: f64,
    pub crop_trials: usize,
    pub rare_class_sampling: bool,
    pub rcs_temperature: f64,
    /// Contrast queries per image; 0 uses every eligible pixel.
    pub max_queries: usize,
    pub reg_sign: RegSign,
    /// Scale prototypes, means and bank entries to unit length before use.
    pub normalize_concepts: bool,
    /// Where statistics, bank entries and queries are taken.
    pub concept_space: ConceptSpace,
    /// Random horizontal flip of both images (weak augmentation).
    pub flip: bool,
    /// Strong augmentation of the student's target input.
    pub aug_noise: f64,
    pub aug_gain: f64,
    pub source_scenes: usize,
    pub target_scenes: usize,
    pub eval_scenes: usize,
    pub eval_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dist,
            lambda_cl: 1.0,
            lambda_reg: 1.0,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            bank_size: DEFAULT_CAPACITY,
            tau: DEFAULT_TEMPERATURE,
            warmup: 3000,
            iterations: 40_000,
            seed: 0,
            learning_rate: 0.05,
            hidden_dim: 32,
            embed_dim: 16,
            crop_height: 16,
            crop_width: 16,
            cbc: true,
            cat_max_ratio: DEFAULT_CAT_MAX_RATIO,
            crop_trials: DEFAULT_CROP_TRIALS,
            rare_class_sampling: true,
            rcs_temperature: 1.0,
            max_queries: 256,
            reg_sign: RegSign::AsWritten,
            normalize_concepts: true,
            concept_space: ConceptSpace::Projection,
            flip: true,
            aug_noise: 0.2,
            aug_gain: 0.2,
            source_scenes: 64,
            target_scenes: 64,
            eval_scenes: 16,
            eval_every: 500,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    /// Self-training only: no contrast, no regularizer.
    pub fn is_baseline(&self) -> bool {
        self.lambda_cl == 0.0 && self.lambda_reg == 0.0
    }

    /// Checks every field and the fit of the crop inside the generated scenes.
    pub fn validate(&self, generator: &GeneratorConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda_cl", self.lambda_cl),
            ("lambda_reg", self.lambda_reg),
            ("aug_noise", self.aug_noise),
            ("aug_gain", self.aug_gain),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [("tau", self.tau), ("learning_rate", self.learning_rate), ("rcs_temperature", self.rcs_temperature)] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.cat_max_ratio > 0.0 && self.cat_max_ratio <= 1.0) {
            return fail(format!("cat_max_ratio must lie in (0, 1], got {}", self.cat_max_ratio));
        }
        for (name, v) in [
            ("bank_size", self.bank_size),
            ("iterations", self.iterations),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("crop_height", self.crop_height),
            ("crop_width", self.crop_width),
            ("crop_trials", self.crop_trials),
            ("source_scenes", self.source_scenes),
            ("target_scenes", self.target_scenes),
            ("eval_scenes", self.eval_scenes),
            ("eval_every", self.eval_every),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.crop_height > generator.height || self.crop_width > generator.width {
            return fail(format!(
                "crop {}x{} does not fit in {}x{} scenes",
                self.crop_height, self.crop_width, generator.height, generator.width
            ));
        }
        generator.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate(&GeneratorConfig::default()).unwrap();
    }

    #[test]
    fn inconsistent_values_rejected() {
        let g = GeneratorConfig::default();
        let bad = [
            TrainConfig { beta: 1.0, ..TrainConfig::default() },
            TrainConfig { tau: 0.0, ..TrainConfig::default() },
            TrainConfig { lambda_cl: -1.0, ..TrainConfig::default() },
            TrainConfig { crop_height: 25, ..TrainConfig::default() },
            TrainConfig { iterations: 0, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(&g), Err(Error::Config(_))), "{c:?}");
        }
    }
}

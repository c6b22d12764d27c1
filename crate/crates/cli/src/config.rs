//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to its default; unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::path::Path;

use pixcon::contrast::RegSign;
use pixcon::toymodel::{ConceptSpace, GeneratorConfig, TrainConfig, Variant};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyToggles {
    pub bound: bool,
    pub grads: bool,
    pub stats: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    /// Empty means "decided by the command line".
    pub out_dir: String,
    /// Suites run before training; a failure aborts the run.
    pub verify: VerifyToggles,
}

trait Value: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty => $what:literal),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|_| format!(concat!("expected ", $what, ", got `{}`"), s))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize => "a non-negative integer", u64 => "a non-negative integer", bool => "true or false");

impl Value for f64 {
    fn parse(s: &str) -> Result<Self, String> {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("expected a finite number, got `{s}`")),
        }
    }

    fn render(&self) -> String {
        // shortest representation that parses back to the same value
        format!("{self:?}")
    }
}

impl Value for String {
    fn parse(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }

    fn render(&self) -> String {
        self.clone()
    }
}

impl Value for Variant {
    fn parse(s: &str) -> Result<Self, String> {
        s.parse().map_err(|_| format!("expected proto, bank or dist, got `{s}`"))
    }

    fn render(&self) -> String {
        match self {
            Variant::Proto => "proto",
            Variant::Bank => "bank",
            Variant::Dist => "dist",
        }
        .into()
    }
}

impl Value for ConceptSpace {
    fn parse(s: &str) -> Result<Self, String> {
        s.parse().map_err(|_| format!("expected projection or encoder, got `{s}`"))
    }

    fn render(&self) -> String {
        match self {
            ConceptSpace::Projection => "projection",
            ConceptSpace::Encoder => "encoder",
        }
        .into()
    }
}

impl Value for RegSign {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "as_written" => Ok(RegSign::AsWritten),
            "diversity" => Ok(RegSign::Diversity),
            _ => Err(format!("expected as_written or diversity, got `{s}`")),
        }
    }

    fn render(&self) -> String {
        match self {
            RegSign::AsWritten => "as_written",
            RegSign::Diversity => "diversity",
        }
        .into()
    }
}

macro_rules! keys {
    ($($key:literal => $($path:ident).+;)*) => {
        /// Every accepted key, in canonical order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_field(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<(), String> {
            match key {
                $($key => cfg.$($path).+ = Value::parse(value)?,)*
                _ => return Err(format!("unknown key `{key}`")),
            }
            Ok(())
        }

        fn field_entries(cfg: &ExperimentConfig) -> Vec<(&'static str, String)> {
            vec![$(($key, cfg.$($path).+.render())),*]
        }
    };
}

keys! {
    "variant" => train.variant;
    "lambda_cl" => train.lambda_cl;
    "lambda_reg" => train.lambda_reg;
    "alpha" => train.alpha;
    "beta" => train.beta;
    "bank_size" => train.bank_size;
    "tau" => train.tau;
    "warmup" => train.warmup;
    "iterations" => train.iterations;
    "seed" => train.seed;
    "learning_rate" => train.learning_rate;
    "hidden_dim" => train.hidden_dim;
    "embed_dim" => train.embed_dim;
    "crop_height" => train.crop_height;
    "crop_width" => train.crop_width;
    "cbc" => train.cbc;
    "cat_max_ratio" => train.cat_max_ratio;
    "crop_trials" => train.crop_trials;
    "rare_class_sampling" => train.rare_class_sampling;
    "rcs_temperature" => train.rcs_temperature;
    "max_queries" => train.max_queries;
    "reg_sign" => train.reg_sign;
    "normalize_concepts" => train.normalize_concepts;
    "concept_space" => train.concept_space;
    "flip" => train.flip;
    "aug_noise" => train.aug_noise;
    "aug_gain" => train.aug_gain;
    "source_scenes" => train.source_scenes;
    "target_scenes" => train.target_scenes;
    "eval_scenes" => train.eval_scenes;
    "eval_every" => train.eval_every;
    "log_every" => train.log_every;
    "height" => generator.height;
    "width" => generator.width;
    "input_dim" => generator.input_dim;
    "classes" => generator.classes;
    "world_seed" => generator.world_seed;
    "class_separation" => generator.class_separation;
    "noise_std" => generator.noise_std;
    "max_rects" => generator.max_rects;
    "rect_min" => generator.rect_min;
    "rect_max" => generator.rect_max;
    "shift_rotation" => generator.shift_rotation;
    "shift_translation" => generator.shift_translation;
    "shift_cov_scale" => generator.shift_cov_scale;
    "out_dir" => out_dir;
    "verify_bound" => verify.bound;
    "verify_grads" => verify.grads;
    "verify_stats" => verify.stats;
}

impl ExperimentConfig {
    /// Parses config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| CliError::ConfigLine {
                origin: origin.to_string(),
                line,
                message,
            };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(err(format!("key `{key}` already set on line {first}")));
            }
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            set_field(&mut cfg, key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> CliResult<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{kv}` is not of the form key=value")))?;
        set_field(self, key.trim(), value.trim()).map_err(|m| CliError::Config(format!("override `{kv}`: {m}")))?;
        self.validate()
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train
            .validate(&self.generator)
            .map_err(|e| CliError::Config(e.to_string().trim_start_matches("config error: ").to_string()))
    }

    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        field_entries(self)
    }

    /// Every key with its effective value, one per line.
    pub fn canonical_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of [`canonical_text`](Self::canonical_text), hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let cfg = ExperimentConfig::parse("# run\nvariant = bank\n\nbeta=0.99  # faster teacher\ncbc = false\n", "t").unwrap();
        assert_eq!(cfg.train.variant, Variant::Bank);
        assert_eq!(cfg.train.beta, 0.99);
        assert!(!cfg.train.cbc);
        assert_eq!(cfg.train.alpha, 0.968);
    }

    #[test]
    fn errors_name_the_line() {
        let e = ExperimentConfig::parse("beta = 0.9\nlearning_rat = 1\n", "exp.conf").unwrap_err();
        assert_eq!(e.to_string(), "exp.conf:2: unknown key `learning_rat`");
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentConfig::parse("iterations = ten\n", "exp.conf").unwrap_err();
        assert_eq!(e.to_string(), "exp.conf:1: iterations: expected a non-negative integer, got `ten`");
        let e = ExperimentConfig::parse("tau = 1\ntau = 2\n", "x").unwrap_err();
        assert_eq!(e.to_string(), "x:2: key `tau` already set on line 1");
        let e = ExperimentConfig::parse("just words\n", "x").unwrap_err();
        assert!(e.to_string().starts_with("x:1: expected `key = value`"));
    }

    #[test]
    fn invalid_values_rejected() {
        let e = ExperimentConfig::parse("beta = 1.5\n", "x").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("beta"));
        assert!(ExperimentConfig::parse("tau = nan\n", "x").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("learning_rate=0.123456789012345678").unwrap();
        cfg.apply_override("reg_sign=diversity").unwrap();
        let back = ExperimentConfig::parse(&cfg.canonical_text(), "canon").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.entries().len(), KEYS.len());
    }

    #[test]
    fn hash_tracks_effective_values() {
        let a = ExperimentConfig::parse("seed = 1\n", "a").unwrap();
        let b = ExperimentConfig::parse("# same\nseed=1", "b").unwrap();
        let c = ExperimentConfig::parse("seed = 2\n", "c").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn bad_override_is_usage_error() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.apply_override("beta").unwrap_err().exit_code(), 2);
        assert_eq!(cfg.apply_override("nope=1").unwrap_err().exit_code(), 2);
    }
}

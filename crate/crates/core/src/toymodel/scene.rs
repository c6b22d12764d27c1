//! Synthetic two-domain segmentation scenes.
//!
//! Labels are axis-aligned rectangles of foreground classes painted over a
//! background class 0. Pixel inputs are drawn from class-conditional
//! Gaussians; the target domain rotates and translates every class mean and
//! scales every covariance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::rng::Rng;
use crate::selftrain::CropBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub input_dim: usize,
    pub classes: usize,
    /// Seed of the class-conditional distributions and the domain transform.
    pub world_seed: u64,
    /// Norm of every class mean.
    pub class_separation: f64,
    /// Per-axis standard deviation of the class-conditional noise.
    pub noise_std: f64,
    /// Maximum rectangles per foreground class.
    pub max_rects: usize,
    pub rect_min: usize,
    pub rect_max: usize,
    /// Target rotation angle (radians) in a fixed random plane.
    pub shift_rotation: f64,
    /// Norm of the target translation.
    pub shift_translation: f64,
    /// Target covariance multiplier.
    pub shift_cov_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            input_dim: 8,
            classes: 4,
            world_seed: 2024,
            class_separation: 2.0,
            noise_std: 0.8,
            max_rects: 2,
            rect_min: 3,
            rect_max: 10,
            shift_rotation: 2.5,
            shift_translation: 3.0,
            shift_cov_scale: 1.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.input_dim < 2 {
            return Err(Error::Argument("generator needs at least 2 classes and 2 input dims".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Argument("scene dimensions must be positive".into()));
        }
        if self.rect_min == 0 || self.rect_min > self.rect_max {
            return Err(Error::Argument("rectangle size range is empty".into()));
        }
        if !(self.noise_std > 0.0 && self.shift_cov_scale > 0.0) {
            return Err(Error::Argument("noise and covariance scale must be positive".into()));
        }
        Ok(())
    }
}

/// Class-conditional Gaussians of both domains.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    config: GeneratorConfig,
    /// Per class, per domain: mean and row-major `D x D` noise factor.
    source: Vec<(Vec<f64>, Vec<f64>)>,
    target: Vec<(Vec<f64>, Vec<f64>)>,
}

fn random_unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    crate::num::l2_normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).vector
}

impl World {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim;
        let mut rng = Rng::new(config.world_seed).split("world");

        // rotation by `shift_rotation` in the plane of two orthonormal vectors
        let u = random_unit(&mut rng, d);
        let mut v = random_unit(&mut rng, d);
        let proj = crate::num::dot(&u, &v)?;
        v.iter_mut().zip(&u).for_each(|(vi, ui)| *vi -= proj * ui);
        let v = crate::num::l2_normalize(&v).vector;
        let (c, s) = (config.shift_rotation.cos(), config.shift_rotation.sin());
        let mut rot = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let id = if i == j { 1.0 } else { 0.0 };
                rot[i * d + j] = id + (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
            }
        }
        let apply = |m: &[f64], x: &[f64]| -> Vec<f64> {
            (0..d).map(|i| (0..d).map(|j| m[i * d + j] * x[j]).sum()).collect()
        };
        let translation: Vec<f64> = random_unit(&mut rng, d)
            .into_iter()
            .map(|x| x * config.shift_translation)
            .collect();

        let mut source = Vec::new();
        let mut target = Vec::new();
        for _ in 0..config.classes {
            let mean: Vec<f64> = random_unit(&mut rng, d)
                .into_iter()
                .map(|x| x * config.class_separation)
                .collect();
            // diagonal noise with per-axis spread in [0.5, 1.5] * noise_std
            let mut factor = vec![0.0; d * d];
            for i in 0..d {
                factor[i * d + i] = config.noise_std * rng.uniform_in(0.5, 1.5);
            }
            let t_mean: Vec<f64> = apply(&rot, &mean)
                .iter()
                .zip(&translation)
                .map(|(a, b)| a + b)
                .collect();
            let scale = config.shift_cov_scale.sqrt();
            let mut t_factor = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    t_factor[i * d + j] = scale * (0..d).map(|k| rot[i * d + k] * factor[k * d + j]).sum::<f64>();
                }
            }
            source.push((mean, factor));
            target.push((t_mean, t_factor));
        }
        Ok(Self {
            config: config.clone(),
            source,
            target,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn class_mean(&self, domain: Domain, k: usize) -> &[f64] {
        match domain {
            Domain::Source => &self.source[k].0,
            Domain::Target => &self.target[k].0,
        }
    }

    fn sample_pixel(&self, domain: Domain, k: usize, rng: &mut Rng, out: &mut Vec<f64>) {
        let d = self.config.input_dim;
        let (mean, factor) = match domain {
            Domain::Source => &self.source[k],
            Domain::Target => &self.target[k],
        };
        let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for i in 0..d {
            out.push(mean[i] + (0..d).map(|j| factor[i * d + j] * z[j]).sum::<f64>());
        }
    }
}

/// One synthetic image: `height x width` pixels of `input_dim` values.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    pub input_dim: usize,
    pub inputs: Vec<f64>,
    pub labels: LabelGrid,
    pub domain: Domain,
}

impl SyntheticScene {
    pub fn new(height: usize, width: usize, input_dim: usize, inputs: Vec<f64>, labels: LabelGrid, domain: Domain) -> Result<Self> {
        labels.same_shape(height, width)?;
        if inputs.len() != height * width * input_dim {
            return Err(crate::error::dim_err("scene inputs", height * width * input_dim, inputs.len()));
        }
        Ok(Self {
            height,
            width,
            input_dim,
            inputs,
            labels,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn crop(&self, b: &CropBox) -> Result<Self> {
        let labels = self.labels.crop(b.top, b.left, b.height, b.width)?;
        let d = self.input_dim;
        let mut inputs = Vec::with_capacity(b.height * b.width * d);
        for r in b.top..b.top + b.height {
            let start = (r * self.width + b.left) * d;
            inputs.extend_from_slice(&self.inputs[start..start + b.width * d]);
        }
        Self::new(b.height, b.width, d, inputs, labels, self.domain)
    }

    /// Mirror left-right (inputs and labels).
    pub fn flipped(&self) -> Self {
        let d = self.input_dim;
        let mut inputs = Vec::with_capacity(self.inputs.len());
        let mut labels = Vec::with_capacity(self.len());
        for r in 0..self.height {
            for c in (0..self.width).rev() {
                let i = r * self.width + c;
                inputs.extend_from_slice(self.pixel(i));
                labels.push(self.labels.get(i));
            }
        }
        let labels = LabelGrid::new(self.height, self.width, self.labels.num_classes(), labels)
            .expect("flip keeps labels valid");
        Self {
            height: self.height,
            width: self.width,
            input_dim: d,
            inputs,
            labels,
            domain: self.domain,
        }
    }
}

/// Random scene of `domain`. Target labels are for evaluation only.
pub fn generate_scene(world: &World, domain: Domain, rng: &mut Rng) -> Result<SyntheticScene> {
    let cfg = &world.config;
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = vec![0u32; h * w];
    for k in 1..cfg.classes {
        let rects = 1 + rng.below(cfg.max_rects.max(1));
        for _ in 0..rects {
            let rh = (cfg.rect_min + rng.below(cfg.rect_max - cfg.rect_min + 1)).min(h);
            let rw = (cfg.rect_min + rng.below(cfg.rect_max - cfg.rect_min + 1)).min(w);
            let top = rng.below(h - rh + 1);
            let left = rng.below(w - rw + 1);
            for r in top..top + rh {
                for c in left..left + rw {
                    labels[r * w + c] = k as u32;
                }
            }
        }
    }
    let mut inputs = Vec::with_capacity(h * w * cfg.input_dim);
    for &l in &labels {
        world.sample_pixel(domain, l as usize, rng, &mut inputs);
    }
    let labels = LabelGrid::new(h, w, cfg.classes, labels)?;
    SyntheticScene::new(h, w, cfg.input_dim, inputs, labels, domain)
}

/// Gaussian input noise plus a random per-channel gain in `1 +- max_gain`.
pub fn strong_augment(scene: &SyntheticScene, noise_std: f64, max_gain: f64, rng: &mut Rng) -> SyntheticScene {
    let d = scene.input_dim;
    let gains: Vec<f64> = (0..d).map(|_| 1.0 + rng.uniform_in(-max_gain, max_gain)).collect();
    let mut out = scene.clone();
    for px in out.inputs.chunks_exact_mut(d) {
        for (x, g) in px.iter_mut().zip(&gains) {
            *x = *x * g + noise_std * rng.normal();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_gives_identical_scenes() {
        let world = World::new(&GeneratorConfig::default()).unwrap();
        let a = generate_scene(&world, Domain::Target, &mut Rng::new(3)).unwrap();
        let b = generate_scene(&world, Domain::Target, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&world, Domain::Target, &mut Rng::new(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_generator_rejected() {
        let cfg = GeneratorConfig {
            classes: 1,
            ..GeneratorConfig::default()
        };
        assert!(matches!(World::new(&cfg), Err(Error::Argument(_))));
        let cfg = GeneratorConfig {
            input_dim: 1,
            ..GeneratorConfig::default()
        };
        assert!(World::new(&cfg).is_err());
    }

    #[test]
    fn labels_cover_declared_classes_only() {
        let world = World::new(&GeneratorConfig::default()).unwrap();
        let mut rng = Rng::new(0);
        for _ in 0..20 {
            let s = generate_scene(&world, Domain::Source, &mut rng).unwrap();
            assert!(s.labels.as_slice().iter().all(|&l| l < 4));
        }
    }

    #[test]
    fn class_means_follow_law_of_large_numbers() {
        let cfg = GeneratorConfig::default();
        let world = World::new(&cfg).unwrap();
        let mut rng = Rng::new(9);
        let d = cfg.input_dim;
        let mut sums = vec![vec![0.0; d]; cfg.classes];
        let mut counts = vec![0usize; cfg.classes];
        while counts.iter().any(|&c| c < 10_000) {
            let s = generate_scene(&world, Domain::Source, &mut rng).unwrap();
            for i in 0..s.len() {
                let k = s.labels.get(i) as usize;
                if counts[k] >= 10_000 {
                    continue;
                }
                counts[k] += 1;
                for (a, x) in sums[k].iter_mut().zip(s.pixel(i)) {
                    *a += x;
                }
            }
        }
        // per-axis std is at most 1.5 * noise_std
        let sigma = 1.5 * cfg.noise_std;
        for k in 0..cfg.classes {
            for j in 0..d {
                let m = sums[k][j] / 10_000.0;
                assert!((m - world.class_mean(Domain::Source, k)[j]).abs() < 3.0 * sigma / 100.0);
            }
        }
    }

    #[test]
    fn null_shift_makes_domains_indistinguishable() {
        let cfg = GeneratorConfig {
            shift_rotation: 0.0,
            shift_translation: 0.0,
            shift_cov_scale: 1.0,
            ..GeneratorConfig::default()
        };
        let world = World::new(&cfg).unwrap();
        for k in 0..cfg.classes {
            assert_eq!(world.class_mean(Domain::Source, k), world.class_mean(Domain::Target, k));
        }
        // two-sample z-test on every input axis over 20 scenes per domain
        let mut rng = Rng::new(1);
        let collect = |domain, rng: &mut Rng| {
            let mut v: Vec<Vec<f64>> = vec![Vec::new(); cfg.input_dim];
            for _ in 0..20 {
                let s = generate_scene(&world, domain, rng).unwrap();
                for i in 0..s.len() {
                    for (j, x) in s.pixel(i).iter().enumerate() {
                        v[j].push(*x);
                    }
                }
            }
            v
        };
        let a = collect(Domain::Source, &mut rng);
        let b = collect(Domain::Target, &mut rng);
        use statrs::distribution::{ContinuousCDF, Normal};
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        for j in 0..cfg.input_dim {
            let (ma, mb) = (mean(&a[j]), mean(&b[j]));
            let se = (var(&a[j], ma) / a[j].len() as f64 + var(&b[j], mb) / b[j].len() as f64).sqrt();
            let z = (ma - mb) / se;
            let p = 2.0 * (1.0 - n01.cdf(z.abs()));
            // Bonferroni over the input axes
            assert!(p > 0.01 / cfg.input_dim as f64, "axis {j}: p = {p}");
        }
    }

    #[test]
    fn crop_and_flip_preserve_alignment() {
        let world = World::new(&GeneratorConfig::default()).unwrap();
        let s = generate_scene(&world, Domain::Source, &mut Rng::new(2)).unwrap();
        let b = CropBox { top: 3, left: 5, height: 4, width: 6 };
        let c = s.crop(&b).unwrap();
        assert_eq!(c.pixel(7), s.pixel((3 + 1) * s.width + 5 + 1));
        assert_eq!(c.labels.get(7), s.labels.at(4, 6));
        let f = s.flipped();
        assert_eq!(f.pixel(0), s.pixel(s.width - 1));
        assert_eq!(f.flipped(), s);
    }
}

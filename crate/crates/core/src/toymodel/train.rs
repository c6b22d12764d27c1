//! One-stage training: supervised source loss, EMA-teacher self-training on
//! the target, and (after warm-up) semantic contrast plus the regularizer.

use serde::{Deserialize, Serialize};

use crate::bank::CentroidBank;
use crate::contrast::Temperature;
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, LabelGrid};
use crate::metrics::{class_means, miou, pdd, ConfusionMatrix};
use crate::rng::Rng;
use crate::selftrain::{
    class_balanced_crop, confidence_weight, ema_update, pseudo_labels, random_crop_box, CropBox, RareClassSampler,
};
use crate::stats::ClassStats;

use super::config::TrainConfig;
use super::model::{Head, Model, ModelShape};
use super::objective::{evaluate, Concepts, ContrastTerms, LossTerms, StepBatch};
use super::scene::{generate_scene, strong_augment, Domain, GeneratorConfig, SyntheticScene, World};

/// Scenes of one run. Target labels are only read by [`Trainer::evaluate`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub source: Vec<SyntheticScene>,
    pub target: Vec<SyntheticScene>,
    pub eval_source: Vec<SyntheticScene>,
    pub eval_target: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn generate(generator: &GeneratorConfig, config: &TrainConfig) -> Result<Self> {
        let world = World::new(generator)?;
        let root = Rng::new(config.seed).split("data");
        let draw = |label: &str, domain: Domain, n: usize| -> Result<Vec<SyntheticScene>> {
            let mut rng = root.split(label);
            (0..n).map(|_| generate_scene(&world, domain, &mut rng)).collect()
        };
        Ok(Self {
            source: draw("source", Domain::Source, config.source_scenes)?,
            target: draw("target", Domain::Target, config.target_scenes)?,
            eval_source: draw("eval-source", Domain::Source, config.eval_scenes)?,
            eval_target: draw("eval-target", Domain::Target, config.eval_scenes)?,
        })
    }
}

/// Student metrics on held-out scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Per-class PDD of the encoder features against ground-truth class means.
    pub pdd: Vec<Option<f64>>,
    pub pdd_mean: f64,
    pub source_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub contrast_active: bool,
    pub weight: f64,
    pub loss: LossTerms,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub(crate) config: TrainConfig,
    pub(crate) generator: GeneratorConfig,
    pub(crate) data: Dataset,
    pub(crate) student: Model,
    pub(crate) teacher: Model,
    pub(crate) stats: ClassStats,
    pub(crate) bank: CentroidBank,
    /// Next iteration to run.
    pub(crate) iteration: usize,
    sampler: Option<RareClassSampler>,
    /// Source crop of the latest step, kept for inspection.
    pub(crate) last_source: Option<SyntheticScene>,
}

/// Stacks equally wide grids vertically.
fn stack_features(grids: &[FeatureGrid]) -> Result<FeatureGrid> {
    let w = grids[0].width();
    let h = grids.iter().map(|g| g.height()).sum();
    let data = grids.iter().flat_map(|g| g.as_slice().iter().copied()).collect();
    FeatureGrid::new(h, w, grids[0].dim(), data)
}

fn stack_labels(grids: &[&LabelGrid]) -> Result<LabelGrid> {
    let w = grids[0].width();
    let h = grids.iter().map(|g| g.height()).sum();
    let data = grids.iter().flat_map(|g| g.as_slice().iter().copied()).collect();
    LabelGrid::new(h, w, grids[0].num_classes(), data)
}

/// Up to `max` labelled pixels of classes `keep` accepts, sorted; 0 = all.
fn choose_queries(labels: &LabelGrid, max: usize, keep: impl Fn(usize) -> bool, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..labels.len())
        .filter(|&i| labels.class_of(i).is_some_and(&keep))
        .collect();
    if max > 0 && idx.len() > max {
        for i in 0..max {
            let j = i + rng.below(idx.len() - i);
            idx.swap(i, j);
        }
        idx.truncate(max);
        idx.sort_unstable();
    }
    idx
}

impl Trainer {
    pub fn new(config: TrainConfig, generator: GeneratorConfig, data: Dataset) -> Result<Self> {
        config.validate(&generator)?;
        let shape = ModelShape {
            input_dim: generator.input_dim,
            hidden_dim: config.hidden_dim,
            embed_dim: config.embed_dim,
            classes: generator.classes,
        };
        let student = Model::init(shape, &mut Rng::new(config.seed).split("init"))?;
        let teacher = student.clone();
        let dim = config.concept_space.dim(&shape);
        let stats = ClassStats::new(generator.classes, dim)?;
        let bank = CentroidBank::new(generator.classes, dim, config.bank_size)?;
        Self::assemble(config, generator, data, student, teacher, stats, bank, 0)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        config: TrainConfig,
        generator: GeneratorConfig,
        data: Dataset,
        student: Model,
        teacher: Model,
        stats: ClassStats,
        bank: CentroidBank,
        iteration: usize,
    ) -> Result<Self> {
        config.validate(&generator)?;
        if data.source.is_empty() || data.target.is_empty() || data.eval_target.is_empty() {
            return Err(Error::Config("training needs source, target and evaluation scenes".into()));
        }
        if student.shape != teacher.shape {
            return Err(Error::State("teacher and student shapes differ".into()));
        }
        let sampler = if config.rare_class_sampling {
            let counts: Vec<Vec<u64>> = data.source.iter().map(|s| s.labels.class_counts()).collect();
            Some(RareClassSampler::new(&counts, config.rcs_temperature)?)
        } else {
            None
        };
        Ok(Self {
            config,
            generator,
            data,
            student,
            teacher,
            stats,
            bank,
            iteration,
            sampler,
            last_source: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn student(&self) -> &Model {
        &self.student
    }

    pub fn teacher(&self) -> &Model {
        &self.teacher
    }

    pub fn stats(&self) -> &ClassStats {
        &self.stats
    }

    pub fn bank(&self) -> &CentroidBank {
        &self.bank
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    fn crop(&self, labels: &LabelGrid, rng: &mut Rng) -> Result<CropBox> {
        let c = &self.config;
        if c.cbc {
            class_balanced_crop(labels, c.crop_height, c.crop_width, c.cat_max_ratio, c.crop_trials, rng)
        } else {
            random_crop_box(labels.height(), labels.width(), c.crop_height, c.crop_width, rng)
        }
    }

    /// One iteration. Its randomness depends only on the seed and the
    /// iteration number, so a resumed run replays the same draws.
    pub fn step(&mut self) -> Result<TraceRecord> {
        if self.is_finished() {
            return Err(Error::State("training already finished".into()));
        }
        let t = self.iteration;
        let cfg = self.config.clone();
        let mut rng = Rng::new(cfg.seed).split("train").fork(t as u64);

        // sample (rare-class sampling on the source)
        let s_idx = match &self.sampler {
            Some(s) => s.sample(&mut rng),
            None => rng.below(self.data.source.len()),
        };
        let t_idx = rng.below(self.data.target.len());
        let mut source = self.data.source[s_idx].clone();
        let mut target = self.data.target[t_idx].clone();
        if cfg.flip {
            if rng.bernoulli(0.5) {
                source = source.flipped();
            }
            if rng.bernoulli(0.5) {
                target = target.flipped();
            }
        }

        // teacher pseudo labels for the whole target image, then crops
        let (t_probs, _, _) = self.teacher.forward(&target, Head::Seg)?;
        let t_probs = t_probs.expect("seg head requested");
        let pseudo_full = pseudo_labels(&t_probs);
        let s_box = self.crop(&source.labels, &mut rng)?;
        let t_box = self.crop(&pseudo_full, &mut rng)?;
        let source = source.crop(&s_box)?;
        let target = target.crop(&t_box)?;
        let t_probs = t_probs.crop(&t_box)?;
        let pseudo = pseudo_full.crop(t_box.top, t_box.left, t_box.height, t_box.width)?;
        let weight = confidence_weight(&t_probs, cfg.alpha)?;

        // statistics and bank from teacher source embeddings
        let s_feat = self.teacher.concept_features(&source, cfg.concept_space)?;
        let local = self.stats.observe(&s_feat, &source.labels)?;
        for (k, st) in &local {
            self.bank.enqueue(*k, &st.centroid)?;
        }

        let contrast_on = t > cfg.warmup && !cfg.is_baseline();
        let student_target = strong_augment(&target, cfg.aug_noise, cfg.aug_gain, &mut rng);
        let (contrast, source_queries, target_queries) = if contrast_on {
            let concepts = Concepts::new(cfg.variant, &self.stats, &self.bank, cfg.normalize_concepts);
            let sq = choose_queries(&source.labels, cfg.max_queries, |k| concepts.accepts(k), &mut rng);
            let tq = choose_queries(&pseudo, cfg.max_queries, |k| concepts.accepts(k), &mut rng);
            let terms = ContrastTerms {
                concepts,
                tau: Temperature::new(cfg.tau)?,
                lambda_cl: cfg.lambda_cl,
                lambda_reg: cfg.lambda_reg,
                reg_sign: cfg.reg_sign,
                space: cfg.concept_space,
            };
            (Some(terms), sq, tq)
        } else {
            (None, Vec::new(), Vec::new())
        };

        self.last_source = Some(source.clone());
        let batch = StepBatch {
            source,
            target: student_target,
            pseudo,
            weight,
            source_queries,
            target_queries,
            contrast,
        };
        let (loss, grad) = evaluate(&self.student, &batch, true)?;
        let grad = grad.expect("gradient requested");
        for (p, g) in self.student.params.iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
        if self.student.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("student parameters diverged at iteration {t}")));
        }
        ema_update(&mut self.teacher.params, &self.student.params, cfg.beta)?;
        self.iteration += 1;
        Ok(TraceRecord {
            iteration: t,
            contrast_active: contrast_on,
            weight: weight.get(),
            loss,
            eval: None,
        })
    }

    /// Runs until `until` (capped at the configured iteration count), passing
    /// every logged record to `sink`. Records are logged every `log_every`
    /// iterations and at the last one; evaluations every `eval_every`
    /// iterations and at the last one.
    pub fn run_until<F>(&mut self, until: usize, mut sink: F) -> Result<()>
    where
        F: FnMut(&TraceRecord) -> Result<()>,
    {
        let until = until.min(self.config.iterations);
        while self.iteration < until {
            let mut rec = self.step()?;
            let done = self.iteration;
            let last = done == self.config.iterations;
            if last || done % self.config.eval_every == 0 {
                rec.eval = Some(self.evaluate()?);
            }
            if last || rec.eval.is_some() || done % self.config.log_every == 0 {
                sink(&rec)?;
            }
        }
        Ok(())
    }

    pub fn run<F>(&mut self, sink: F) -> Result<()>
    where
        F: FnMut(&TraceRecord) -> Result<()>,
    {
        self.run_until(self.config.iterations, sink)
    }

    /// Student accuracy, mIoU and PDD on the held-out target scenes, plus
    /// source accuracy.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let k = self.generator.classes;
        let predict = |scenes: &[SyntheticScene]| -> Result<(ConfusionMatrix, Vec<FeatureGrid>)> {
            let mut cm = ConfusionMatrix::new(k);
            let mut feats = Vec::with_capacity(scenes.len());
            for s in scenes {
                let acts = self.student.forward_pixels(&s.inputs, Head::Seg)?;
                let pred: Vec<u32> = acts
                    .logits
                    .chunks_exact(k)
                    .map(|l| {
                        let mut best = 0;
                        for j in 1..k {
                            if l[j] > l[best] {
                                best = j;
                            }
                        }
                        best as u32
                    })
                    .collect();
                cm.accumulate(&LabelGrid::new(s.height, s.width, k, pred)?, &s.labels)?;
                // tanh(z) = 2 sigmoid(2z) - 1, so (1 + h) / 2 is the same layer written as a
                // non-negative gate. Cosine PDD needs non-negative features: with zero-centred
                // ones the clamped denominator sits at its floor and the ratio explodes.
                let gates = acts.hidden.iter().map(|h| 0.5 * (1.0 + h)).collect();
                feats.push(FeatureGrid::new(s.height, s.width, self.student.shape.hidden_dim, gates)?);
            }
            Ok((cm, feats))
        };
        let (cm, feats) = predict(&self.data.eval_target)?;
        let iou = miou(&cm);
        let feats = stack_features(&feats)?;
        let labels = stack_labels(&self.data.eval_target.iter().map(|s| &s.labels).collect::<Vec<_>>())?;
        let protos = class_means(&feats, &labels, k)?;
        let report = pdd(&feats, &labels, &protos)?;
        let source_accuracy = if self.data.eval_source.is_empty() {
            f64::NAN
        } else {
            predict(&self.data.eval_source)?.0.pixel_accuracy()
        };
        Ok(EvalReport {
            accuracy: cm.pixel_accuracy(),
            miou: iou.mean,
            per_class_iou: iou.per_class,
            pdd_mean: report.mean(),
            pdd: report.per_class,
            source_accuracy,
        })
    }
}

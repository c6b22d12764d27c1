//! The composite training objective
//! `L_ce + L_ssl + lambda_cl L_cl + lambda_reg L_reg` and its gradient with
//! respect to the student parameters.

use serde::{Deserialize, Serialize};

use crate::bank::CentroidBank;
use crate::contrast::{bank_loss, dist_loss, proto_loss, reg_loss, Query, QuerySet, RegSign, Temperature};
use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::selftrain::{source_ce, target_ssl, ConfWeight, ProbGrid};
use crate::stats::{ClassStats, Prototypes};

use super::model::{normalize_backward, unit_rows, Activations, ConceptSpace, Head, Model, ModelShape};
use super::scene::{generate_scene, Domain, GeneratorConfig, SyntheticScene, World};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Proto,
    Bank,
    #[default]
    Dist,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proto" => Ok(Variant::Proto),
            "bank" => Ok(Variant::Bank),
            "dist" => Ok(Variant::Dist),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected proto, bank or dist)"))),
        }
    }
}

/// Semantic concepts the contrast and regularizer terms compare against,
/// frozen for one step.
#[derive(Clone, Debug)]
pub struct Concepts {
    pub variant: Variant,
    pub stats: ClassStats,
    pub bank: CentroidBank,
    pub prototypes: Prototypes,
}

impl Concepts {
    /// With `normalize`, prototypes, statistic means and bank entries are
    /// scaled to unit length; covariances are kept as estimated.
    pub fn new(variant: Variant, stats: &ClassStats, bank: &CentroidBank, normalize: bool) -> Self {
        if normalize {
            let stats = stats.with_normalized_means();
            Self {
                variant,
                prototypes: stats.prototypes(),
                stats,
                bank: bank.normalized(),
            }
        } else {
            Self {
                variant,
                prototypes: stats.prototypes(),
                stats: stats.clone(),
                bank: bank.clone(),
            }
        }
    }

    /// Whether a query of class `k` can be scored.
    pub fn accepts(&self, k: usize) -> bool {
        match self.variant {
            Variant::Proto | Variant::Dist => self.stats.is_initialized(k) && self.prototypes.initialized_count() >= 2,
            Variant::Bank => {
                !self.bank.is_empty(k) && (0..self.bank.num_classes()).any(|j| j != k && !self.bank.is_empty(j))
            }
        }
    }

    fn contrast(&self, queries: &QuerySet, tau: Temperature) -> Result<crate::contrast::LossValue> {
        match self.variant {
            Variant::Proto => proto_loss(queries, &self.prototypes, tau),
            Variant::Bank => bank_loss(queries, &self.bank, tau),
            Variant::Dist => dist_loss(queries, &self.stats, tau),
        }
    }
}

/// Contrast settings for one step; `None` in [`StepBatch`] means warm-up.
#[derive(Clone, Debug)]
pub struct ContrastTerms {
    pub concepts: Concepts,
    pub tau: Temperature,
    pub lambda_cl: f64,
    pub lambda_reg: f64,
    pub reg_sign: RegSign,
    pub space: ConceptSpace,
}

/// Everything one student update sees.
#[derive(Clone, Debug)]
pub struct StepBatch {
    /// Source crop with ground-truth labels.
    pub source: SyntheticScene,
    /// Augmented target crop; its label field is never read.
    pub target: SyntheticScene,
    pub pseudo: LabelGrid,
    pub weight: ConfWeight,
    /// Pixel indices used as contrast queries in each crop.
    pub source_queries: Vec<usize>,
    pub target_queries: Vec<usize>,
    pub contrast: Option<ContrastTerms>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub ssl: f64,
    pub cl: f64,
    pub reg: f64,
    pub total: f64,
}

/// Loss terms and, when requested, the gradient with respect to every
/// student parameter.
pub fn evaluate(model: &Model, batch: &StepBatch, want_grad: bool) -> Result<(LossTerms, Option<Vec<f64>>)> {
    let shape = model.shape;
    let terms = batch.contrast.as_ref();
    let cl_on = terms.is_some_and(|c| c.lambda_cl != 0.0);
    let reg_on = terms.is_some_and(|c| c.lambda_reg != 0.0);
    let space = terms.map_or(ConceptSpace::Projection, |c| c.space);
    let head = if cl_on || reg_on { space.head() } else { Head::Seg };

    let src = &batch.source;
    let tgt = &batch.target;
    let src_acts = model.forward_pixels(&src.inputs, head)?;
    let tgt_acts = model.forward_pixels(&tgt.inputs, head)?;
    let src_probs = ProbGrid::from_logits(src.height, src.width, shape.classes, &src_acts.logits)?;
    let tgt_probs = ProbGrid::from_logits(tgt.height, tgt.width, shape.classes, &tgt_acts.logits)?;

    let ce = source_ce(&src_probs, &src.labels)?;
    let ssl = target_ssl(&tgt_probs, &batch.pseudo, batch.weight)?;
    let mut out = LossTerms {
        ce: ce.value,
        ssl: ssl.value,
        ..LossTerms::default()
    };
    let a = space.dim(&shape);
    let (src_q, src_norms) = concept_rows(&src_acts, space, cl_on || reg_on, a);
    let (tgt_q, tgt_norms) = concept_rows(&tgt_acts, space, cl_on || reg_on, a);
    let mut d_embed_s = if cl_on || reg_on { vec![0.0; src_acts.n * a] } else { Vec::new() };
    let mut d_embed_t = if cl_on || reg_on { vec![0.0; tgt_acts.n * a] } else { Vec::new() };

    if let Some(c) = terms {
        if cl_on {
            let mut qs = Vec::with_capacity(batch.source_queries.len() + batch.target_queries.len());
            for &i in &batch.source_queries {
                let k = src.labels.class_of(i).ok_or_else(|| Error::Argument(format!("source query {i} is unlabeled")))?;
                qs.push(Query::new(src_q[i * a..(i + 1) * a].to_vec(), k));
            }
            for &i in &batch.target_queries {
                let k = batch.pseudo.class_of(i).ok_or_else(|| Error::Argument(format!("target query {i} is unlabeled")))?;
                qs.push(Query::new(tgt_q[i * a..(i + 1) * a].to_vec(), k));
            }
            if !qs.is_empty() {
                let set = QuerySet::unnormalized(a, qs)?;
                let lv = c.concepts.contrast(&set, c.tau)?;
                out.cl = lv.value;
                let ns = batch.source_queries.len();
                for (j, g) in lv.grads.iter().enumerate() {
                    let (buf, i) = if j < ns {
                        (&mut d_embed_s, batch.source_queries[j])
                    } else {
                        (&mut d_embed_t, batch.target_queries[j - ns])
                    };
                    for (d, v) in buf[i * a..(i + 1) * a].iter_mut().zip(g) {
                        *d += c.lambda_cl * v;
                    }
                }
            }
        }
        if reg_on && c.concepts.prototypes.initialized_count() >= 2 {
            // averaged over the two images; each image term sees its mean embedding
            let mut total = 0.0;
            for (rows, buf) in [(&src_q, &mut d_embed_s), (&tgt_q, &mut d_embed_t)] {
                let n = (rows.len() / a) as f64;
                let mut mean = vec![0.0; a];
                for px in rows.chunks_exact(a) {
                    mean.iter_mut().zip(px).for_each(|(m, v)| *m += v / n);
                }
                let lv = reg_loss(&mean, &c.concepts.prototypes, c.tau, c.reg_sign)?;
                total += lv.value / 2.0;
                let scale = c.lambda_reg / (2.0 * n);
                for px in buf.chunks_exact_mut(a) {
                    px.iter_mut().zip(&lv.grads[0]).for_each(|(d, g)| *d += scale * g);
                }
            }
            out.reg = total;
        }
    }
    let (lcl, lreg) = terms.map_or((0.0, 0.0), |c| (c.lambda_cl, c.lambda_reg));
    out.total = out.ce + out.ssl + lcl * out.cl + lreg * out.reg;
    if !out.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {}", out.total)));
    }
    if !want_grad {
        return Ok((out, None));
    }

    let flat = |g: &[Vec<f64>]| g.iter().flatten().copied().collect::<Vec<f64>>();
    let (d_embed_s, d_hidden_s) = route(space, &src_q, &src_norms, d_embed_s, a);
    let (d_embed_t, d_hidden_t) = route(space, &tgt_q, &tgt_norms, d_embed_t, a);
    let mut grad = model.backward(&src.inputs, &src_acts, &flat(&ce.grads), &d_embed_s, &d_hidden_s)?;
    let g_t = model.backward(&tgt.inputs, &tgt_acts, &flat(&ssl.grads), &d_embed_t, &d_hidden_t)?;
    grad.iter_mut().zip(&g_t).for_each(|(a, b)| *a += b);
    Ok((out, Some(grad)))
}

/// Unit-norm concept-space rows of one image and their pre-normalization
/// norms; empty when no concept term is active.
fn concept_rows(acts: &Activations, space: ConceptSpace, needed: bool, dim: usize) -> (Vec<f64>, Vec<f64>) {
    match (needed, space) {
        (false, _) => (Vec::new(), Vec::new()),
        (true, ConceptSpace::Projection) => (acts.embed.clone(), acts.embed_norm.clone()),
        (true, ConceptSpace::Encoder) => unit_rows(&acts.hidden, dim),
    }
}

/// Sends concept-space gradients to the model input they belong to:
/// `(d_embed, d_hidden)`.
fn route(space: ConceptSpace, q: &[f64], norms: &[f64], d_q: Vec<f64>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    match space {
        ConceptSpace::Projection => (d_q, Vec::new()),
        ConceptSpace::Encoder if d_q.is_empty() => (Vec::new(), Vec::new()),
        ConceptSpace::Encoder => {
            let mut d_h = vec![0.0; d_q.len()];
            for (i, nrm) in norms.iter().enumerate() {
                let r = i * dim..(i + 1) * dim;
                normalize_backward(&q[r.clone()], *nrm, &d_q[r.clone()], &mut d_h[r]);
            }
            (Vec::new(), d_h)
        }
    }
}

/// Random 6x6 source/target batch with a small model, populated statistics
/// and bank, and every eligible pixel used as a query. Meant for gradient
/// checks.
pub fn random_batch(variant: Variant, space: ConceptSpace, lambda_cl: f64, lambda_reg: f64, seed: u64) -> Result<(Model, StepBatch)> {
    let gen = GeneratorConfig {
        height: 6,
        width: 6,
        rect_min: 2,
        rect_max: 4,
        ..GeneratorConfig::default()
    };
    let world = World::new(&gen)?;
    let mut rng = Rng::new(seed);
    let shape = ModelShape {
        hidden_dim: 6,
        embed_dim: 5,
        ..ModelShape::default()
    };
    let model = Model::init(shape, &mut rng)?;
    let source = generate_scene(&world, Domain::Source, &mut rng)?;
    let target = generate_scene(&world, Domain::Target, &mut rng)?;
    let pseudo = LabelGrid::new(6, 6, 4, (0..36).map(|_| rng.below(4) as u32).collect())?;

    let dim = space.dim(&shape);
    let mut stats = ClassStats::new(4, dim)?;
    let mut bank = CentroidBank::new(4, dim, 3)?;
    for _ in 0..4 {
        let mut rows = Vec::new();
        for _ in 0..36 {
            rows.push((0..dim).map(|_| rng.normal()).collect::<Vec<f64>>());
        }
        let feat = crate::grid::FeatureGrid::from_pixels(6, 6, &rows)?;
        let mask = LabelGrid::new(6, 6, 4, (0..36).map(|_| rng.below(4) as u32).collect())?;
        for (k, st) in stats.observe(&feat, &mask)? {
            bank.enqueue(k, &st.centroid)?;
        }
    }
    let concepts = Concepts::new(variant, &stats, &bank, true);
    let source_queries: Vec<usize> = (0..36).filter(|&i| concepts.accepts(source.labels.get(i) as usize)).collect();
    let target_queries: Vec<usize> = (0..36).filter(|&i| concepts.accepts(pseudo.get(i) as usize)).collect();
    let batch = StepBatch {
        source,
        target,
        pseudo,
        weight: ConfWeight::new(0.75)?,
        source_queries,
        target_queries,
        contrast: Some(ContrastTerms {
            concepts,
            tau: Temperature::new(0.5)?,
            lambda_cl,
            lambda_reg,
            reg_sign: RegSign::AsWritten,
            space,
        }),
    };
    Ok((model, batch))
}

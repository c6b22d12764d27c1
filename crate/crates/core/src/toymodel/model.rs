//! Per-pixel encoder, segmentation head and projection head with
//! hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector so EMA, SGD, finite differences and
//! checkpoints all treat them uniformly. Weight matrices are row-major
//! `out x in`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::grid::FeatureGrid;
use crate::num::NORM_EPS;
use crate::rng::Rng;
use crate::selftrain::ProbGrid;

use super::scene::SyntheticScene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden_dim: 32,
            embed_dim: 16,
            classes: 4,
        }
    }
}

/// One affine layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub weight: usize,
    pub bias: usize,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl Affine {
    fn end(&self) -> usize {
        self.bias + self.out_dim
    }

    fn apply(&self, p: &[f64], x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            let row = &p[self.weight + o * self.in_dim..self.weight + (o + 1) * self.in_dim];
            *y = p[self.bias + o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients for upstream `dy` and input `x`, and
    /// adds `W^T dy` into `dx` when given.
    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[self.bias + o] += g;
            let gw = &mut grad[self.weight + o * self.in_dim..self.weight + (o + 1) * self.in_dim];
            for (gi, xi) in gw.iter_mut().zip(x) {
                *gi += g * xi;
            }
        }
        if let Some(dx) = dx {
            for (o, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &p[self.weight + o * self.in_dim..self.weight + (o + 1) * self.in_dim];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }
}

/// Offsets of every layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub enc1: Affine,
    pub enc2: Affine,
    pub seg: Affine,
    pub proj1: Affine,
    pub proj2: Affine,
    pub len: usize,
}

impl Layout {
    pub fn new(s: &ModelShape) -> Self {
        let mut at = 0;
        let mut layer = |out_dim: usize, in_dim: usize| {
            let a = Affine {
                weight: at,
                bias: at + out_dim * in_dim,
                out_dim,
                in_dim,
            };
            at = a.end();
            a
        };
        let enc1 = layer(s.hidden_dim, s.input_dim);
        let enc2 = layer(s.hidden_dim, s.hidden_dim);
        let seg = layer(s.classes, s.hidden_dim);
        let proj1 = layer(s.hidden_dim, s.hidden_dim);
        let proj2 = layer(s.embed_dim, s.hidden_dim);
        Self {
            enc1,
            enc2,
            seg,
            proj1,
            proj2,
            len: at,
        }
    }

    /// Index range of the projection head.
    pub fn projection_range(&self) -> std::ops::Range<usize> {
        self.proj1.weight..self.proj2.end()
    }
}

/// Which outputs [`Model::forward`] computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Seg,
    Proj,
    Both,
}

impl Head {
    fn seg(self) -> bool {
        matches!(self, Head::Seg | Head::Both)
    }

    fn proj(self) -> bool {
        matches!(self, Head::Proj | Head::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub shape: ModelShape,
    pub params: Vec<f64>,
}

/// Representation the class statistics, bank and contrast queries live in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptSpace {
    /// Unit-norm projection-head output.
    #[default]
    Projection,
    /// Unit-norm encoder output; the projection head stays idle.
    Encoder,
}

impl ConceptSpace {
    pub fn dim(self, shape: &ModelShape) -> usize {
        match self {
            ConceptSpace::Projection => shape.embed_dim,
            ConceptSpace::Encoder => shape.hidden_dim,
        }
    }

    /// Heads a forward pass must run to produce concept-space features.
    pub fn head(self) -> Head {
        match self {
            ConceptSpace::Projection => Head::Both,
            ConceptSpace::Encoder => Head::Seg,
        }
    }
}

impl std::str::FromStr for ConceptSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(ConceptSpace::Projection),
            "encoder" => Ok(ConceptSpace::Encoder),
            other => Err(Error::Config(format!("unknown concept space `{other}` (expected projection or encoder)"))),
        }
    }
}

/// Rows of `v` scaled to unit length, with their original norms. Rows at or
/// below the degeneracy threshold are copied unchanged.
pub fn unit_rows(v: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = v.to_vec();
    let norms = out
        .chunks_exact_mut(dim)
        .map(|row| {
            let nrm = crate::num::norm(row);
            if nrm > NORM_EPS {
                row.iter_mut().for_each(|x| *x /= nrm);
            }
            nrm
        })
        .collect();
    (out, norms)
}

/// Cached activations of one forward pass over `n` pixels.
#[derive(Clone, Debug)]
pub struct Activations {
    pub n: usize,
    pub h1: Vec<f64>,
    /// Encoder output (hidden features).
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub p1: Vec<f64>,
    /// Projection output before normalization.
    pub embed_raw: Vec<f64>,
    /// Unit-norm embeddings.
    pub embed: Vec<f64>,
    pub embed_norm: Vec<f64>,
}

impl Model {
    /// Weights uniform in `+- 1/sqrt(fan_in)`, biases zero.
    pub fn init(shape: ModelShape, rng: &mut Rng) -> Result<Self> {
        if shape.input_dim == 0 || shape.hidden_dim == 0 || shape.embed_dim == 0 || shape.classes < 2 {
            return Err(Error::Argument(format!("invalid model shape {shape:?}")));
        }
        let layout = Layout::new(&shape);
        let mut params = vec![0.0; layout.len];
        for a in [layout.enc1, layout.enc2, layout.seg, layout.proj1, layout.proj2] {
            let bound = 1.0 / (a.in_dim as f64).sqrt();
            for w in &mut params[a.weight..a.bias] {
                *w = rng.uniform_in(-bound, bound);
            }
        }
        Ok(Self { shape, params })
    }

    pub fn from_params(shape: ModelShape, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&shape);
        if params.len() != layout.len {
            return Err(dim_err("parameter count", layout.len, params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        Ok(Self { shape, params })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.shape)
    }

    /// Runs the network on `n` pixels stored row-major in `inputs`.
    pub fn forward_pixels(&self, inputs: &[f64], head: Head) -> Result<Activations> {
        let s = &self.shape;
        if inputs.len() % s.input_dim != 0 {
            return Err(dim_err("input length multiple", s.input_dim, inputs.len()));
        }
        let n = inputs.len() / s.input_dim;
        let l = self.layout();
        let p = &self.params;
        let (hd, k, a) = (s.hidden_dim, s.classes, s.embed_dim);
        let mut acts = Activations {
            n,
            h1: vec![0.0; n * hd],
            hidden: vec![0.0; n * hd],
            logits: if head.seg() { vec![0.0; n * k] } else { Vec::new() },
            p1: if head.proj() { vec![0.0; n * hd] } else { Vec::new() },
            embed_raw: if head.proj() { vec![0.0; n * a] } else { Vec::new() },
            embed: if head.proj() { vec![0.0; n * a] } else { Vec::new() },
            embed_norm: if head.proj() { vec![0.0; n] } else { Vec::new() },
        };
        for i in 0..n {
            let x = &inputs[i * s.input_dim..(i + 1) * s.input_dim];
            let h1 = &mut acts.h1[i * hd..(i + 1) * hd];
            l.enc1.apply(p, x, h1);
            h1.iter_mut().for_each(|v| *v = v.tanh());
            let h = &mut acts.hidden[i * hd..(i + 1) * hd];
            l.enc2.apply(p, &acts.h1[i * hd..(i + 1) * hd], h);
            h.iter_mut().for_each(|v| *v = v.tanh());
            let h = &acts.hidden[i * hd..(i + 1) * hd];
            if head.seg() {
                l.seg.apply(p, h, &mut acts.logits[i * k..(i + 1) * k]);
            }
            if head.proj() {
                let p1 = &mut acts.p1[i * hd..(i + 1) * hd];
                l.proj1.apply(p, h, p1);
                p1.iter_mut().for_each(|v| *v = v.tanh());
                let e = &mut acts.embed_raw[i * a..(i + 1) * a];
                l.proj2.apply(p, &acts.p1[i * hd..(i + 1) * hd], e);
                let nrm = crate::num::norm(e);
                acts.embed_norm[i] = nrm;
                let q = &mut acts.embed[i * a..(i + 1) * a];
                if nrm > NORM_EPS {
                    q.iter_mut().zip(e.iter()).for_each(|(qi, ei)| *qi = ei / nrm);
                } else {
                    q.copy_from_slice(e);
                }
            }
        }
        Ok(acts)
    }

    /// Segmentation probabilities and unit-norm embeddings of a scene.
    pub fn forward(&self, scene: &SyntheticScene, head: Head) -> Result<(Option<ProbGrid>, Option<FeatureGrid>, Activations)> {
        if scene.input_dim != self.shape.input_dim {
            return Err(dim_err("scene input dim", self.shape.input_dim, scene.input_dim));
        }
        let acts = self.forward_pixels(&scene.inputs, head)?;
        let probs = if head.seg() {
            Some(ProbGrid::from_logits(scene.height, scene.width, self.shape.classes, &acts.logits)?)
        } else {
            None
        };
        let feats = if head.proj() {
            Some(FeatureGrid::new(scene.height, scene.width, self.shape.embed_dim, acts.embed.clone())?)
        } else {
            None
        };
        Ok((probs, feats, acts))
    }

    /// Encoder output as a feature grid.
    pub fn hidden_features(&self, scene: &SyntheticScene) -> Result<FeatureGrid> {
        let acts = self.forward_pixels(&scene.inputs, Head::Seg)?;
        FeatureGrid::new(scene.height, scene.width, self.shape.hidden_dim, acts.hidden)
    }

    /// Unit-norm features of a scene in the given concept space.
    pub fn concept_features(&self, scene: &SyntheticScene, space: ConceptSpace) -> Result<FeatureGrid> {
        let dim = space.dim(&self.shape);
        let data = match space {
            ConceptSpace::Projection => self.forward(scene, Head::Proj)?.2.embed,
            ConceptSpace::Encoder => unit_rows(&self.forward_pixels(&scene.inputs, Head::Seg)?.hidden, dim).0,
        };
        FeatureGrid::new(scene.height, scene.width, dim, data)
    }

    /// Parameter gradient given upstream gradients on the logits, the unit
    /// embeddings and (optionally) the hidden features. Empty slices mean
    /// zero upstream gradient.
    pub fn backward(&self, inputs: &[f64], acts: &Activations, d_logits: &[f64], d_embed: &[f64], d_hidden: &[f64]) -> Result<Vec<f64>> {
        let s = &self.shape;
        let (n, hd, k, a) = (acts.n, s.hidden_dim, s.classes, s.embed_dim);
        for (what, got, want) in [("logit gradient", d_logits.len(), n * k), ("embedding gradient", d_embed.len(), n * a), ("hidden gradient", d_hidden.len(), n * hd)] {
            if got != 0 && got != want {
                return Err(dim_err(what, want, got));
            }
        }
        if !d_logits.is_empty() && acts.logits.is_empty() {
            return Err(Error::State("forward pass did not compute the segmentation head".into()));
        }
        if !d_embed.is_empty() && acts.embed.is_empty() {
            return Err(Error::State("forward pass did not compute the projection head".into()));
        }
        let l = self.layout();
        let p = &self.params;
        let mut grad = vec![0.0; l.len];
        let mut dh = vec![0.0; hd];
        let mut dz = vec![0.0; hd];
        let mut de = vec![0.0; a];
        for i in 0..n {
            let h = &acts.hidden[i * hd..(i + 1) * hd];
            dh.iter_mut().for_each(|v| *v = 0.0);
            let mut live = false;
            if !d_hidden.is_empty() {
                dh.copy_from_slice(&d_hidden[i * hd..(i + 1) * hd]);
                live |= dh.iter().any(|&v| v != 0.0);
            }
            if !d_logits.is_empty() {
                let dl = &d_logits[i * k..(i + 1) * k];
                if dl.iter().any(|&v| v != 0.0) {
                    l.seg.backward(p, h, dl, &mut grad, Some(&mut dh));
                    live = true;
                }
            }
            if !d_embed.is_empty() {
                let dq = &d_embed[i * a..(i + 1) * a];
                if dq.iter().any(|&v| v != 0.0) {
                    let q = &acts.embed[i * a..(i + 1) * a];
                    normalize_backward(q, acts.embed_norm[i], dq, &mut de);
                    let p1 = &acts.p1[i * hd..(i + 1) * hd];
                    dz.iter_mut().for_each(|v| *v = 0.0);
                    l.proj2.backward(p, p1, &de, &mut grad, Some(&mut dz));
                    dz.iter_mut().zip(p1).for_each(|(d, y)| *d *= 1.0 - y * y);
                    l.proj1.backward(p, h, &dz, &mut grad, Some(&mut dh));
                    live = true;
                }
            }
            if !live {
                continue;
            }
            // encoder
            dz.iter_mut().zip(dh.iter().zip(h)).for_each(|(d, (g, y))| *d = g * (1.0 - y * y));
            let h1 = &acts.h1[i * hd..(i + 1) * hd];
            let mut dh1 = vec![0.0; hd];
            l.enc2.backward(p, h1, &dz, &mut grad, Some(&mut dh1));
            dh1.iter_mut().zip(h1).for_each(|(d, y)| *d *= 1.0 - y * y);
            l.enc1.backward(p, &inputs[i * s.input_dim..(i + 1) * s.input_dim], &dh1, &mut grad, None);
        }
        Ok(grad)
    }
}

/// Gradient through `q = v / |v|`: `(dq - q (q . dq)) / |v|`. Degenerate
/// vectors pass the gradient through unchanged.
pub fn normalize_backward(q: &[f64], norm: f64, dq: &[f64], dv: &mut [f64]) {
    if norm <= NORM_EPS {
        dv.copy_from_slice(dq);
        return;
    }
    let proj: f64 = q.iter().zip(dq).map(|(a, b)| a * b).sum();
    for ((d, g), qi) in dv.iter_mut().zip(dq).zip(q) {
        *d = (g - qi * proj) / norm;
    }
}

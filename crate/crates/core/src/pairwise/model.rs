//! Two-layer pairwise network: one shared ReLU hidden layer feeding four
//! independent softmax heads (object of i, object of j, SCP of i, SCP of j).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PairwiseFeatures;
use crate::grammar::LabelGrammar;
use crate::io::{Reader, Writer, PAIRWISE_MAGIC};
use crate::potentials::{TrainConfig, TrainLog};
use crate::{neg_log, Error, Result};

pub const HIDDEN_UNITS: usize = 32;
pub const DEFAULT_DROPOUT: f64 = 0.2;

/// Dimensions of a pairwise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub num_objects: usize,
    pub num_scps: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl ModelShape {
    pub fn for_grammar(g: &LabelGrammar) -> Self {
        Self {
            num_objects: g.num_objects(),
            num_scps: g.num_scps(),
            hidden: HIDDEN_UNITS,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn input_dim(&self) -> usize {
        PairwiseFeatures::input_dim(self.num_objects, self.num_scps)
    }

    fn head_sizes(&self) -> [usize; 4] {
        [
            self.num_objects,
            self.num_objects,
            self.num_scps,
            self.num_scps,
        ]
    }

    fn param_count(&self) -> usize {
        let h = self.hidden;
        h * self.input_dim() + h + self.head_sizes().iter().map(|k| k * h + k).sum::<usize>()
    }
}

/// Ground-truth labels of an ordered segment pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairLabels {
    pub object_i: usize,
    pub object_j: usize,
    pub scp_i: usize,
    pub scp_j: usize,
}

impl PairLabels {
    fn as_array(&self) -> [usize; 4] {
        [self.object_i, self.object_j, self.scp_i, self.scp_j]
    }
}

#[derive(Debug, Clone)]
pub struct PairwiseSample {
    pub features: PairwiseFeatures,
    pub labels: PairLabels,
}

/// Output distributions of the four heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProbs {
    pub object_i: Vec<f64>,
    pub object_j: Vec<f64>,
    pub scp_i: Vec<f64>,
    pub scp_j: Vec<f64>,
}

impl HeadProbs {
    pub fn heads(&self) -> [&[f64]; 4] {
        [&self.object_i, &self.object_j, &self.scp_i, &self.scp_j]
    }

    /// `-log P(l_o^i) - log P(l_o^j) - log P(l_p^i) - log P(l_p^j)`.
    pub fn energy(&self, labels: &PairLabels) -> Result<f64> {
        let mut e = 0.0;
        for (probs, l) in self.heads().iter().zip(labels.as_array()) {
            let p = probs.get(l).ok_or(Error::IndexOutOfRange {
                what: "label",
                index: l,
                len: probs.len(),
            })?;
            e += neg_log(*p);
        }
        Ok(e)
    }
}

/// Parameters live in one flat vector:
/// `W1 (hidden × input, row-major) | b1 | for each head: W (out × hidden) | b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseModel {
    shape: ModelShape,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: PairwiseModel,
    pub log: TrainLog,
}

struct Layout {
    input: usize,
    hidden: usize,
    b1: usize,
    heads: [(usize, usize, usize); 4], // (weights offset, bias offset, size)
}

impl PairwiseModel {
    /// All-zero parameters: every head outputs the uniform distribution.
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            params: vec![0.0; shape.param_count()],
        }
    }

    /// Glorot-uniform weights, zero offsets.
    pub fn random(shape: ModelShape, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(shape);
        let lay = m.layout();
        let a = (6.0 / (lay.input + lay.hidden) as f64).sqrt();
        for w in &mut m.params[..lay.b1] {
            *w = rng.random_range(-a..=a);
        }
        for (wo, bo, k) in lay.heads {
            let a = (6.0 / (lay.hidden + k) as f64).sqrt();
            for w in &mut m.params[wo..bo] {
                *w = rng.random_range(-a..=a);
            }
        }
        m
    }

    pub fn from_params(shape: ModelShape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "model needs {} parameters, got {}",
                shape.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite model parameter".into()));
        }
        if !(0.0..1.0).contains(&shape.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {}", shape.dropout)));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_dropout(&mut self, rate: f64) {
        self.shape.dropout = rate;
    }

    fn layout(&self) -> Layout {
        let input = self.shape.input_dim();
        let hidden = self.shape.hidden;
        let b1 = hidden * input;
        let mut off = b1 + hidden;
        let mut heads = [(0, 0, 0); 4];
        for (slot, k) in heads.iter_mut().zip(self.shape.head_sizes()) {
            *slot = (off, off + k * hidden, k);
            off += k * hidden + k;
        }
        Layout {
            input,
            hidden,
            b1,
            heads,
        }
    }

    /// Inference forward pass (dropout off).
    pub fn forward(&self, f: &PairwiseFeatures) -> Result<HeadProbs> {
        self.forward_input(&f.to_input())
    }

    pub fn forward_input(&self, x: &[f64]) -> Result<HeadProbs> {
        let lay = self.layout();
        if x.len() != lay.input {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} features, got {}",
                lay.input,
                x.len()
            )));
        }
        let hidden = self.hidden(&lay, x);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(4);
        for &(wo, bo, k) in &lay.heads {
            let mut z = self.head_logits(&lay, wo, bo, k, &hidden);
            crate::potentials::softmax_in_place(&mut z);
            out.push(z);
        }
        let scp_j = out.pop().unwrap();
        let scp_i = out.pop().unwrap();
        let object_j = out.pop().unwrap();
        let object_i = out.pop().unwrap();
        Ok(HeadProbs {
            object_i,
            object_j,
            scp_i,
            scp_j,
        })
    }

    /// Pairwise energy of a label quadruple under this model.
    pub fn pairwise_potential(&self, f: &PairwiseFeatures, labels: &PairLabels) -> Result<f64> {
        self.forward(f)?.energy(labels)
    }

    fn hidden(&self, lay: &Layout, x: &[f64]) -> Vec<f64> {
        (0..lay.hidden)
            .map(|u| {
                let row = &self.params[u * lay.input..(u + 1) * lay.input];
                let z = self.params[lay.b1 + u] + dot(row, x);
                z.max(0.0)
            })
            .collect()
    }

    fn head_logits(&self, lay: &Layout, wo: usize, bo: usize, k: usize, h: &[f64]) -> Vec<f64> {
        (0..k)
            .map(|o| {
                let row = &self.params[wo + o * lay.hidden..wo + (o + 1) * lay.hidden];
                self.params[bo + o] + dot(row, h)
            })
            .collect()
    }

    /// Mean over samples of the summed four-head loss, dropout off.
    pub fn loss(&self, samples: &[&PairwiseSample]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            total += self.pairwise_potential(&s.features, &s.labels)?;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    /// Mean loss and its gradient. When `rng` is given, dropout with the
    /// model's rate is applied to the hidden activations.
    pub fn loss_and_grad(
        &self,
        samples: &[&PairwiseSample],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<f64>)> {
        let lay = self.layout();
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let norm = 1.0 / samples.len().max(1) as f64;
        let keep = 1.0 - self.shape.dropout;
        let mut mask = vec![1.0; lay.hidden];
        for s in samples {
            let x = s.features.to_input();
            if x.len() != lay.input {
                return Err(Error::ShapeMismatch(format!(
                    "model expects {} features, got {}",
                    lay.input,
                    x.len()
                )));
            }
            let pre: Vec<f64> = (0..lay.hidden)
                .map(|u| {
                    self.params[lay.b1 + u] + dot(&self.params[u * lay.input..][..lay.input], &x)
                })
                .collect();
            if let Some(r) = rng.as_deref_mut() {
                for m in mask.iter_mut() {
                    *m = if r.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    };
                }
            }
            let h: Vec<f64> = pre.iter().zip(&mask).map(|(z, m)| z.max(0.0) * m).collect();
            let mut dh = vec![0.0; lay.hidden];
            for (&(wo, bo, k), &label) in lay.heads.iter().zip(&s.labels.as_array()) {
                if label >= k {
                    return Err(Error::IndexOutOfRange {
                        what: "label",
                        index: label,
                        len: k,
                    });
                }
                let mut p = self.head_logits(&lay, wo, bo, k, &h);
                crate::potentials::softmax_in_place(&mut p);
                loss += neg_log(p[label]);
                p[label] -= 1.0;
                for (o, d) in p.iter().enumerate() {
                    let d = d * norm;
                    grad[bo + o] += d;
                    let row = wo + o * lay.hidden;
                    for u in 0..lay.hidden {
                        grad[row + u] += d * h[u];
                        dh[u] += d * self.params[row + u];
                    }
                }
            }
            for u in 0..lay.hidden {
                if pre[u] <= 0.0 || mask[u] == 0.0 {
                    continue;
                }
                let d = dh[u] * mask[u];
                grad[lay.b1 + u] += d;
                for (g, xv) in grad[u * lay.input..][..lay.input].iter_mut().zip(&x) {
                    *g += d * xv;
                }
            }
        }
        Ok((loss * norm, grad))
    }

    /// Writes the model.
    ///
    /// Layout after the 16-byte header: `u32` input dim, hidden units, object
    /// labels, SCP labels; `f32` dropout rate; then every parameter as `f32`
    /// in the flat order described on [`PairwiseModel`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(PAIRWISE_MAGIC);
        w.u32(self.shape.input_dim())?;
        w.u32(self.shape.hidden)?;
        w.u32(self.shape.num_objects)?;
        w.u32(self.shape.num_scps)?;
        w.f32s(&[self.shape.dropout]);
        w.f32s(&self.params);
        w.finish(path.as_ref())
    }

    /// Reads a model; with a grammar, head sizes are checked against it.
    pub fn load(path: impl AsRef<Path>, grammar: Option<&LabelGrammar>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = Reader::open(path, PAIRWISE_MAGIC)?;
        let input = r.dim()?;
        let shape = ModelShape {
            hidden: r.dim()?,
            num_objects: r.dim()?,
            num_scps: r.dim()?,
            dropout: r.f32s(1)?[0],
        };
        if shape.input_dim() != input {
            return Err(r.err(format!(
                "input dim {input} inconsistent with {} objects and {} scps",
                shape.num_objects, shape.num_scps
            )));
        }
        if let Some(g) = grammar {
            if shape.num_objects != g.num_objects() || shape.num_scps != g.num_scps() {
                return Err(r.err(format!(
                    "model heads ({}, {}) do not match grammar ({}, {})",
                    shape.num_objects,
                    shape.num_scps,
                    g.num_objects(),
                    g.num_scps()
                )));
            }
        }
        let params = r.f32s(shape.param_count())?;
        r.finish()?;
        Self::from_params(shape, params).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains a freshly initialized model (seeded from `cfg.seed`).
pub fn train_model(
    samples: &[PairwiseSample],
    shape: ModelShape,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = PairwiseModel::random(shape, &mut rng);
    train_model_from(init, samples, cfg)
}

/// Mini-batch gradient descent on the summed four-head logistic loss.
pub fn train_model_from(
    init: PairwiseModel,
    samples: &[PairwiseSample],
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty pairwise training set".into()));
    }
    let sizes = init.shape.head_sizes();
    for s in samples {
        for (l, k) in s.labels.as_array().into_iter().zip(sizes) {
            if l >= k {
                return Err(Error::IndexOutOfRange {
                    what: "label",
                    index: l,
                    len: k,
                });
            }
        }
    }
    let mut model = init;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let all: Vec<&PairwiseSample> = samples.iter().collect();
    let mut log = TrainLog::default();
    log.push(0, model.loss(&all)?)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let use_dropout = model.shape.dropout > 0.0;
    for epoch in 1..=cfg.max_epochs {
        if cfg.batch_size < samples.len() {
            order.shuffle(&mut shuffle_rng);
        }
        for chunk in order.chunks(cfg.batch_size.min(samples.len())) {
            let batch: Vec<&PairwiseSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let rng = use_dropout.then_some(&mut dropout_rng);
            let (_, grad) = model.loss_and_grad(&batch, rng)?;
            for (p, g) in model.params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
        log.push(epoch, model.loss(&all)?)?;
    }
    Ok(TrainedModel { model, log })
}

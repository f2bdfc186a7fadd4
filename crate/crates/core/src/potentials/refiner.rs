use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use super::{PotentialMap, TrainConfig, TrainLog};
use crate::io::{Reader, Writer, REFINER_MAGIC};
use crate::proposal::LabelMap;
use crate::{neg_log, Error, Result};

pub const KERNEL_SIZE: usize = 5;

/// Convolution over the channel-concatenated (SCP, object) potentials that
/// predicts joint object potentials.
///
/// Weights are indexed `[ky][kx][in_channel][out_channel]`; the input stack
/// puts the SCP channels first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvRefiner {
    kernel_size: usize,
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Gradient of the mean per-pixel loss, laid out like the refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// One training image: input potentials and the ground-truth object labels.
#[derive(Debug, Clone)]
pub struct RefinerSample {
    pub scp: PotentialMap,
    pub obj: PotentialMap,
    pub labels: LabelMap,
}

#[derive(Debug, Clone)]
pub struct TrainedRefiner {
    pub refiner: ConvRefiner,
    pub log: TrainLog,
}

impl ConvRefiner {
    pub fn new(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        if out_channels == 0 || in_channels <= out_channels {
            return Err(Error::InvalidArgument(format!(
                "refiner maps {in_channels} input channels to {out_channels}; \
                 the input must hold the object channels plus at least one scp channel"
            )));
        }
        let expected = kernel_size * kernel_size * in_channels * out_channels;
        if weights.len() != expected || bias.len() != out_channels {
            return Err(Error::ShapeMismatch(format!(
                "refiner expects {expected} weights and {out_channels} biases, got {} and {}",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("non-finite refiner weight".into()));
        }
        Ok(Self {
            kernel_size,
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(num_scps: usize, num_objects: usize) -> Self {
        let in_channels = num_scps + num_objects;
        Self {
            kernel_size: KERNEL_SIZE,
            in_channels,
            out_channels: num_objects,
            weights: vec![0.0; KERNEL_SIZE * KERNEL_SIZE * in_channels * num_objects],
            bias: vec![0.0; num_objects],
        }
    }

    /// Center tap copies the object channels through; everything else zero.
    pub fn identity(num_scps: usize, num_objects: usize) -> Self {
        let mut r = Self::zeros(num_scps, num_objects);
        let c = KERNEL_SIZE / 2;
        for o in 0..num_objects {
            let idx = r.weight_index(c, c, num_scps + o, o);
            r.weights[idx] = 1.0;
        }
        r
    }

    /// Weights and biases drawn uniformly from `[-scale, scale]`.
    pub fn random(num_scps: usize, num_objects: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut r = Self::zeros(num_scps, num_objects);
        for w in r.weights.iter_mut().chain(r.bias.iter_mut()) {
            *w = rng.random_range(-scale..=scale);
        }
        r
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn num_scp_channels(&self) -> usize {
        self.in_channels - self.out_channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Writes the refiner.
    ///
    /// Layout after the 16-byte header: `u32` kernel size, input channels,
    /// output channels; then the weights in index order and the biases, all
    /// `f32`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(REFINER_MAGIC);
        w.u32(self.kernel_size)?;
        w.u32(self.in_channels)?;
        w.u32(self.out_channels)?;
        w.f32s(&self.weights);
        w.f32s(&self.bias);
        w.finish(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = Reader::open(path, REFINER_MAGIC)?;
        let (k, cin, cout) = (r.dim()?, r.dim()?, r.dim()?);
        let n = k
            .checked_mul(k)
            .and_then(|v| v.checked_mul(cin))
            .and_then(|v| v.checked_mul(cout))
            .ok_or_else(|| r.err("refiner dimensions overflow"))?;
        let weights = r.f32s(n)?;
        let bias = r.f32s(cout)?;
        r.finish()?;
        Self::new(k, cin, cout, weights, bias).map_err(|e| Error::format(path, e.to_string()))
    }

    #[inline]
    pub fn weight_index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.kernel_size + kx) * self.in_channels + ci) * self.out_channels + co
    }

    /// Stacks SCP and object channels into one H×W×C_in input.
    pub fn stack_input(&self, scp: &PotentialMap, obj: &PotentialMap) -> Result<Vec<f64>> {
        if !scp.same_size(obj) {
            return Err(Error::ShapeMismatch(format!(
                "scp map is {}x{}, object map is {}x{}",
                scp.height(),
                scp.width(),
                obj.height(),
                obj.width()
            )));
        }
        if scp.channels() != self.num_scp_channels() || obj.channels() != self.out_channels {
            return Err(Error::ShapeMismatch(format!(
                "refiner expects {} scp + {} object channels, got {} + {}",
                self.num_scp_channels(),
                self.out_channels,
                scp.channels(),
                obj.channels()
            )));
        }
        let mut input = Vec::with_capacity(scp.height() * scp.width() * self.in_channels);
        for (s, o) in scp
            .values()
            .chunks_exact(scp.channels())
            .zip(obj.values().chunks_exact(obj.channels()))
        {
            input.extend_from_slice(s);
            input.extend_from_slice(o);
        }
        Ok(input)
    }

    /// Zero-padded, stride-1 convolution plus bias on a raw H×W×C_in stack.
    pub fn pre_activation_raw(&self, input: &[f64], height: usize, width: usize) -> Vec<f64> {
        assert_eq!(input.len(), height * width * self.in_channels);
        let (k, cin, cout) = (self.kernel_size, self.in_channels, self.out_channels);
        let r = k / 2;
        let mut out = Vec::with_capacity(height * width * cout);
        for y in 0..height {
            for x in 0..width {
                let start = out.len();
                out.extend_from_slice(&self.bias);
                let acc = &mut out[start..];
                for ky in 0..k {
                    let Some(sy) = (y + ky).checked_sub(r).filter(|&v| v < height) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(sx) = (x + kx).checked_sub(r).filter(|&v| v < width) else {
                            continue;
                        };
                        let px = &input[(sy * width + sx) * cin..][..cin];
                        let base = (ky * k + kx) * cin * cout;
                        for (ci, &v) in px.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let w = &self.weights[base + ci * cout..][..cout];
                            for (a, wv) in acc.iter_mut().zip(w) {
                                *a += wv * v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn pre_activation(&self, scp: &PotentialMap, obj: &PotentialMap) -> Result<Vec<f64>> {
        let input = self.stack_input(scp, obj)?;
        Ok(self.pre_activation_raw(&input, scp.height(), scp.width()))
    }

    /// Joint object potentials: convolution followed by a per-pixel softmax.
    pub fn refine(&self, scp: &PotentialMap, obj: &PotentialMap) -> Result<PotentialMap> {
        let mut z = self.pre_activation(scp, obj)?;
        z.chunks_exact_mut(self.out_channels)
            .for_each(softmax_in_place);
        PotentialMap::new(obj.height(), obj.width(), self.out_channels, z)
    }

    /// Mean per-pixel multinomial logistic loss over all samples.
    pub fn loss(&self, samples: &[&RefinerSample]) -> Result<f64> {
        Ok(self.loss_impl(samples, false)?.0)
    }

    /// Mean per-pixel loss and its gradient with respect to weights and bias.
    pub fn loss_and_grad(&self, samples: &[&RefinerSample]) -> Result<(f64, RefinerGrad)> {
        let (loss, grad) = self.loss_impl(samples, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn loss_impl(
        &self,
        samples: &[&RefinerSample],
        with_grad: bool,
    ) -> Result<(f64, Option<RefinerGrad>)> {
        let (k, cin, cout) = (self.kernel_size, self.in_channels, self.out_channels);
        let r = k / 2;
        let total: usize = samples.iter().map(|s| s.labels.len()).sum();
        if total == 0 {
            return Err(Error::InvalidArgument("no pixels to train on".into()));
        }
        let norm = 1.0 / total as f64;
        let mut loss = 0.0;
        let mut grad = with_grad.then(|| RefinerGrad {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; cout],
        });
        for s in samples {
            let (h, w) = (s.labels.height(), s.labels.width());
            let input = self.stack_input(&s.scp, &s.obj)?;
            let mut z = self.pre_activation_raw(&input, h, w);
            for (i, px) in z.chunks_exact_mut(cout).enumerate() {
                softmax_in_place(px);
                let label = s.labels.labels()[i] as usize;
                loss += neg_log(px[label]);
                // px becomes dL/dz for this pixel
                px[label] -= 1.0;
                px.iter_mut().for_each(|v| *v *= norm);
            }
            let Some(g) = grad.as_mut() else { continue };
            for y in 0..h {
                for x in 0..w {
                    let dz = &z[(y * w + x) * cout..][..cout];
                    for (gb, d) in g.bias.iter_mut().zip(dz) {
                        *gb += d;
                    }
                    for ky in 0..k {
                        let Some(sy) = (y + ky).checked_sub(r).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(sx) = (x + kx).checked_sub(r).filter(|&v| v < w) else {
                                continue;
                            };
                            let px = &input[(sy * w + sx) * cin..][..cin];
                            let base = (ky * k + kx) * cin * cout;
                            for (ci, &v) in px.iter().enumerate() {
                                if v == 0.0 {
                                    continue;
                                }
                                let gw = &mut g.weights[base + ci * cout..][..cout];
                                for (a, d) in gw.iter_mut().zip(dz) {
                                    *a += d * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((loss * norm, grad))
    }

    fn step(&mut self, grad: &RefinerGrad, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

impl RefinerSample {
    pub fn new(scp: PotentialMap, obj: PotentialMap, labels: LabelMap) -> Result<Self> {
        if !scp.same_size(&obj) || labels.height() != obj.height() || labels.width() != obj.width()
        {
            return Err(Error::ShapeMismatch(
                "refiner sample maps differ in size".into(),
            ));
        }
        labels.check_range(obj.channels())?;
        Ok(Self { scp, obj, labels })
    }
}

/// Trains a refiner starting from the identity initialization.
pub fn train_refiner(samples: &[RefinerSample], cfg: &TrainConfig) -> Result<TrainedRefiner> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty refiner training set".into()))?;
    let init = ConvRefiner::identity(first.scp.channels(), first.obj.channels());
    train_refiner_from(init, samples, cfg)
}

/// Plain (mini-)batch gradient descent on the mean per-pixel loss.
pub fn train_refiner_from(
    init: ConvRefiner,
    samples: &[RefinerSample],
    cfg: &TrainConfig,
) -> Result<TrainedRefiner> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty refiner training set".into()));
    }
    for s in samples {
        s.labels.check_range(init.out_channels)?;
    }
    let mut refiner = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all: Vec<&RefinerSample> = samples.iter().collect();
    let mut log = TrainLog::default();
    log.push(0, refiner.loss(&all)?)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        if cfg.batch_size < samples.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_size.min(samples.len())) {
            let batch: Vec<&RefinerSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (_, grad) = refiner.loss_and_grad(&batch)?;
            refiner.step(&grad, cfg.learning_rate);
        }
        log.push(epoch, refiner.loss(&all)?)?;
    }
    Ok(TrainedRefiner { refiner, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> PotentialMap {
        let raw: Vec<f64> = (0..h * w * c)
            .map(|_| rng.random_range(0.01..1.0))
            .collect();
        PotentialMap::normalize(h, w, c, raw).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.conv");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = ConvRefiner::random(4, 3, 0.5, &mut rng);
        r.save(&path).unwrap();
        let back = ConvRefiner::load(&path).unwrap();
        assert_eq!(back.in_channels(), 7);
        for (a, b) in r.weights().iter().zip(back.weights()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        std::fs::write(&path, b"PARTSEG-TNSR\x01\0\0\0").unwrap();
        assert!(ConvRefiner::load(&path)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    // Direct nested-loop correlation, independent of the optimized path.
    fn naive_conv(r: &ConvRefiner, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = r.kernel_size() as isize;
        let half = k / 2;
        let (cin, cout) = (r.in_channels(), r.out_channels());
        let mut out = vec![0.0; h * w * cout];
        for y in 0..h as isize {
            for x in 0..w as isize {
                for co in 0..cout {
                    let mut acc = r.bias()[co];
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let (sy, sx) = (y + dy, x + dx);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let wv = r.weights()[r.weight_index(
                                    (dy + half) as usize,
                                    (dx + half) as usize,
                                    ci,
                                    co,
                                )];
                                acc += wv * input[((sy as usize) * w + sx as usize) * cin + ci];
                            }
                        }
                    }
                    out[((y as usize) * w + x as usize) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_refiner_is_softmax_of_object_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scp = random_map(4, 5, 4, &mut rng);
        let obj = random_map(4, 5, 3, &mut rng);
        let out = ConvRefiner::identity(4, 3).refine(&scp, &obj).unwrap();
        for (o, p) in out
            .values()
            .chunks_exact(3)
            .zip(obj.values().chunks_exact(3))
        {
            let mut expect = p.to_vec();
            softmax_in_place(&mut expect);
            for (a, b) in o.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_refiner_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scp = random_map(3, 3, 6, &mut rng);
        let obj = random_map(3, 3, 3, &mut rng);
        let out = ConvRefiner::zeros(6, 3).refine(&scp, &obj).unwrap();
        assert!(out.values().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scp = random_map(3, 3, 4, &mut rng);
        let obj = random_map(3, 3, 3, &mut rng);
        let r = ConvRefiner::random(4, 3, 0.5, &mut rng);
        let input = r.stack_input(&scp, &obj).unwrap();
        let fast = r.pre_activation(&scp, &obj).unwrap();
        let slow = naive_conv(&r, &input, 3, 3);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pre_activation_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut r = ConvRefiner::random(3, 2, 0.7, &mut rng);
        r.bias_mut().iter_mut().for_each(|b| *b = 0.0);
        let input: Vec<f64> = (0..6 * 7 * 5).map(|_| rng.random_range(0.0..1.0)).collect();
        let base = r.pre_activation_raw(&input, 6, 7);
        for alpha in [0.0, 0.5, 3.25, -2.0] {
            let scaled: Vec<f64> = input.iter().map(|v| v * alpha).collect();
            let z = r.pre_activation_raw(&scaled, 6, 7);
            for (a, b) in z.iter().zip(&base) {
                assert!((a - alpha * b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let scp = PotentialMap::uniform(3, 3, 4);
        let obj = PotentialMap::uniform(3, 4, 3);
        assert!(matches!(
            ConvRefiner::identity(4, 3).refine(&scp, &obj),
            Err(Error::ShapeMismatch(_))
        ));
        let obj = PotentialMap::uniform(3, 3, 2);
        assert!(ConvRefiner::identity(4, 3).refine(&scp, &obj).is_err());
        assert!(ConvRefiner::new(4, 5, 2, vec![0.0; 4 * 4 * 10], vec![0.0; 2]).is_err());
    }

    #[test]
    fn training_rejects_bad_input() {
        let cfg = TrainConfig::default();
        assert!(train_refiner(&[], &cfg).is_err());
        let labels = LabelMap::new(1, 1, vec![5]).unwrap();
        let s = RefinerSample {
            scp: PotentialMap::uniform(1, 1, 2),
            obj: PotentialMap::uniform(1, 1, 2),
            labels,
        };
        assert!(train_refiner(&[s], &cfg).is_err());
    }
}

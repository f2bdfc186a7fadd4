//! Per-pixel potential maps and the joint object-potential refiner.

mod refiner;

pub(crate) use refiner::softmax_in_place;

pub use refiner::{
    train_refiner, train_refiner_from, ConvRefiner, RefinerGrad, RefinerSample, TrainedRefiner,
    KERNEL_SIZE,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::proposal::LabelMap;
use crate::{io, Error, Result};

/// Allowed deviation of a pixel's channel sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-5;

/// H×W×C tensor of per-pixel probabilities, row-major with channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl PotentialMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidPotential("zero channels".into()));
        }
        if values.len() != height * width * channels {
            return Err(Error::InvalidPotential(format!(
                "expected {}x{}x{} = {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                values.len()
            )));
        }
        for (i, px) in values.chunks_exact(channels).enumerate() {
            let (r, c) = (i / width, i % width);
            let mut sum = 0.0;
            for &v in px {
                if v.is_nan() {
                    return Err(Error::InvalidPotential(format!("NaN at pixel ({r}, {c})")));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidPotential(format!(
                        "value {v} outside [0, 1] at pixel ({r}, {c})"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidPotential(format!(
                    "channel sum {sum} at pixel ({r}, {c})"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    /// Divides every pixel by its channel sum.
    pub fn normalize(height: usize, width: usize, channels: usize, raw: Vec<f64>) -> Result<Self> {
        if channels == 0 || raw.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} raw values for {height}x{width}x{channels}",
                raw.len()
            )));
        }
        let mut values = raw;
        for (i, px) in values.chunks_exact_mut(channels).enumerate() {
            let (r, c) = (i / width, i % width);
            if px.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidPotential(format!(
                    "negative or non-finite score at pixel ({r}, {c})"
                )));
            }
            let sum: f64 = px.iter().sum();
            if sum <= 0.0 {
                return Err(Error::InvalidPotential(format!(
                    "all-zero pixel ({r}, {c})"
                )));
            }
            px.iter_mut().for_each(|v| *v /= sum);
        }
        Self::new(height, width, channels, values)
    }

    pub fn uniform(height: usize, width: usize, channels: usize) -> Self {
        let v = 1.0 / channels as f64;
        Self {
            height,
            width,
            channels,
            values: vec![v; height * width * channels],
        }
    }

    /// One-hot encoding of a label map.
    pub fn one_hot(labels: &LabelMap, channels: usize) -> Result<Self> {
        labels.check_range(channels)?;
        let mut values = vec![0.0; labels.len() * channels];
        for (i, &l) in labels.labels().iter().enumerate() {
            values[i * channels + l as usize] = 1.0;
        }
        Ok(Self {
            height: labels.height(),
            width: labels.width(),
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[(row * self.width + col) * self.channels + channel]
    }

    pub fn same_size(&self, other: &PotentialMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::read_potential_map(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_potential_map(self, path)
    }
}

/// Hyperparameters shared by the refiner and pairwise trainers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Samples per gradient step; anything ≥ the sample count is full batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 32,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Refiner settings used for VGG-scale fine-tuning.
    pub fn refiner_full_scale() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            ..Self::default()
        }
    }

    /// Pairwise network settings used at full scale.
    pub fn pairwise_full_scale() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 10_000,
            ..Self::default()
        }
    }

    pub fn full_batch(learning_rate: f64, max_epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            batch_size: usize::MAX,
            max_epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Training-set loss before the first step and after every epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn initial(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    pub(crate) fn push(&mut self, epoch: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!(
                    "loss {loss}; previous losses {:?}",
                    &self.losses[self.losses.len().saturating_sub(5)..]
                ),
            });
        }
        self.losses.push(loss);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let m = PotentialMap::normalize(1, 1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(m.pixel(0, 0), &[0.5, 0.5]);
        let m = PotentialMap::normalize(1, 1, 3, vec![2.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.pixel(0, 0), &[1.0, 0.0, 0.0]);
        assert!(matches!(
            PotentialMap::normalize(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]),
            Err(Error::InvalidPotential(_))
        ));
        assert!(PotentialMap::normalize(1, 1, 2, vec![-1.0, 2.0]).is_err());
    }

    #[test]
    fn normalize_is_idempotent() {
        let raw: Vec<f64> = (0..4 * 4 * 3)
            .map(|i| ((i * 37) % 11) as f64 + 0.5)
            .collect();
        let once = PotentialMap::normalize(4, 4, 3, raw).unwrap();
        let twice = PotentialMap::normalize(4, 4, 3, once.values().to_vec()).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn validation() {
        assert!(PotentialMap::new(1, 1, 2, vec![0.3, 0.7]).is_ok());
        let err = PotentialMap::new(1, 1, 2, vec![0.3, 0.5]).unwrap_err();
        assert!(err.to_string().contains("channel sum"), "{err}");
        assert!(PotentialMap::new(1, 1, 2, vec![f64::NAN, 1.0]).is_err());
        assert!(PotentialMap::new(1, 1, 2, vec![-0.5, 1.5]).is_err());
        assert!(PotentialMap::new(2, 1, 2, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn one_hot_matches_labels() {
        let lm = LabelMap::new(1, 3, vec![0, 2, 1]).unwrap();
        let m = PotentialMap::one_hot(&lm, 3).unwrap();
        assert_eq!(m.pixel(0, 1), &[0.0, 0.0, 1.0]);
        assert!(PotentialMap::one_hot(&lm, 2).is_err());
    }

    #[test]
    fn train_config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::refiner_full_scale().learning_rate, 1e-4);
        assert_eq!(TrainConfig::pairwise_full_scale().batch_size, 10_000);
    }
}

//! Calibration scores: ECE, MCE, Brier score and NLL with reliability bins.
//!
//! A pixel is correct when the argmax of the prediction (lowest class on
//! ties) equals its label. Ignored pixels are excluded from every score.
//! [`CalibrationAccumulator`] is mergeable, so image collections can be
//! scored in any grouping and combined afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{argmax, LabelMap, ProbTensor, UncertaintyMap};

pub const DEFAULT_NUM_BINS: usize = 15;
/// Floor applied to the true-class probability before taking its log.
pub const NLL_EPSILON: f64 = 1e-12;

/// Where per-pixel confidence comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    /// Largest class probability of the prediction.
    MaxProb,
    /// `1 - u / normalizer` of an uncertainty map.
    OneMinusNormalizedUncertainty,
}

/// `1 - value / normalizer`, clamped to `[0, 1]`.
pub fn confidence_from_uncertainty(map: &UncertaintyMap) -> Result<Vec<f64>> {
    if map.normalizer.is_nan() || map.normalizer <= 0.0 {
        return Err(Error::ZeroNormalizer);
    }
    Ok(map
        .values
        .iter()
        .map(|&v| (1.0 - v / map.normalizer).clamp(0.0, 1.0))
        .collect())
}

pub fn max_prob_confidence(pred: &ProbTensor) -> Vec<f64> {
    pred.pixels().map(|p| p.iter().copied().fold(0.0, f64::max)).collect()
}

/// Bin of `confidence` among `num_bins` equal-width bins `[m/M, (m+1)/M)`,
/// the last one closed at 1.
pub fn bin_index(confidence: f64, num_bins: usize) -> usize {
    let m = num_bins as f64;
    let mut idx = ((confidence * m).floor().max(0.0) as usize).min(num_bins - 1);
    // keep the index consistent with the edges as computed in f64
    if idx > 0 && confidence < idx as f64 / m {
        idx -= 1;
    } else if idx + 1 < num_bins && confidence >= (idx + 1) as f64 / m {
        idx += 1;
    }
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    /// `None` for empty bins.
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub num_bins: usize,
    pub bins: Vec<ReliabilityBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub mce: f64,
    pub brier: f64,
    pub nll: f64,
    pub n_pixels: u64,
    /// Pixels whose true-class probability was below [`NLL_EPSILON`].
    pub nll_clamped: u64,
    pub bins: ReliabilityBins,
}

/// Running sums for the calibration scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationAccumulator {
    num_bins: usize,
    counts: Vec<u64>,
    conf_sums: Vec<f64>,
    correct: Vec<u64>,
    brier_sum: f64,
    nll_sum: f64,
    nll_clamped: u64,
    n: u64,
}

impl CalibrationAccumulator {
    pub fn new(num_bins: usize) -> Result<Self> {
        if num_bins == 0 {
            return Err(Error::InvalidSpec("need at least one calibration bin".into()));
        }
        Ok(CalibrationAccumulator {
            num_bins,
            counts: vec![0; num_bins],
            conf_sums: vec![0.0; num_bins],
            correct: vec![0; num_bins],
            brier_sum: 0.0,
            nll_sum: 0.0,
            nll_clamped: 0,
            n: 0,
        })
    }

    /// Adds one pixel: its predicted distribution, confidence and true class.
    pub fn push(&mut self, dist: &[f64], confidence: f64, label: usize) {
        let correct = argmax(dist) == label;
        let b = bin_index(confidence, self.num_bins);
        self.counts[b] += 1;
        self.conf_sums[b] += confidence;
        self.correct[b] += u64::from(correct);

        self.brier_sum += dist
            .iter()
            .enumerate()
            .map(|(c, &p)| {
                let d = p - if c == label { 1.0 } else { 0.0 };
                d * d
            })
            .sum::<f64>();
        let p_true = dist[label];
        if p_true < NLL_EPSILON {
            self.nll_clamped += 1;
        }
        self.nll_sum -= p_true.max(NLL_EPSILON).ln();
        self.n += 1;
    }

    /// Adds every non-ignored pixel of one image.
    pub fn add_image(&mut self, pred: &ProbTensor, confidence: &[f64], labels: &LabelMap) -> Result<()> {
        labels.check_shape(pred.height(), pred.width())?;
        if confidence.len() != pred.num_pixels() {
            return Err(Error::ShapeMismatch(format!(
                "{} confidences for {} pixels",
                confidence.len(),
                pred.num_pixels()
            )));
        }
        labels.validate(pred.num_classes())?;
        for (idx, (dist, &conf)) in pred.pixels().zip(confidence).enumerate() {
            if let Some(label) = labels.label(idx) {
                self.push(dist, conf, label);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CalibrationAccumulator) -> Result<()> {
        if other.num_bins != self.num_bins {
            return Err(Error::InvalidSpec(format!(
                "cannot merge {} bins into {}",
                other.num_bins, self.num_bins
            )));
        }
        for b in 0..self.num_bins {
            self.counts[b] += other.counts[b];
            self.conf_sums[b] += other.conf_sums[b];
            self.correct[b] += other.correct[b];
        }
        self.brier_sum += other.brier_sum;
        self.nll_sum += other.nll_sum;
        self.nll_clamped += other.nll_clamped;
        self.n += other.n;
        Ok(())
    }

    pub fn num_pixels(&self) -> u64 {
        self.n
    }

    pub fn finish(&self) -> Result<CalibrationReport> {
        if self.n == 0 {
            return Err(Error::NoValidPixels);
        }
        let n = self.n as f64;
        let m = self.num_bins as f64;
        let mut ece = 0.0;
        let mut mce: f64 = 0.0;
        let mut bins = Vec::with_capacity(self.num_bins);
        for b in 0..self.num_bins {
            let count = self.counts[b];
            let (mean_confidence, accuracy) = if count > 0 {
                let conf = self.conf_sums[b] / count as f64;
                let acc = self.correct[b] as f64 / count as f64;
                let gap = (acc - conf).abs();
                ece += count as f64 / n * gap;
                mce = mce.max(gap);
                (Some(conf), Some(acc))
            } else {
                (None, None)
            };
            bins.push(ReliabilityBin {
                lo: b as f64 / m,
                hi: (b + 1) as f64 / m,
                count,
                mean_confidence,
                accuracy,
            });
        }
        Ok(CalibrationReport {
            // last-ulp clamp: ECE <= MCE
            ece: ece.min(mce),
            mce,
            brier: self.brier_sum / n,
            nll: self.nll_sum / n,
            n_pixels: self.n,
            nll_clamped: self.nll_clamped,
            bins: ReliabilityBins {
                num_bins: self.num_bins,
                bins,
            },
        })
    }
}

/// Scores one prediction against its labels.
pub fn calibration(
    pred: &ProbTensor,
    confidence: &[f64],
    labels: &LabelMap,
    num_bins: usize,
) -> Result<CalibrationReport> {
    let mut acc = CalibrationAccumulator::new(num_bins)?;
    acc.add_image(pred, confidence, labels)?;
    acc.finish()
}

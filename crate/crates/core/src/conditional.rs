//! Patch-based conditional correctness metrics and segmentation mIoU.
//!
//! An image is tiled into `patch_size x patch_size` patches (edge patches
//! keep their true, smaller pixel count). A patch is accurate when its pixel
//! accuracy is strictly above the accuracy threshold and uncertain when its
//! mean normalized uncertainty is strictly above the uncertainty threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelMap, ProbTensor, UncertaintyMap};

pub const DEFAULT_PATCH_SIZE: usize = 4;
pub const DEFAULT_ACC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    /// Non-ignored pixels in the patch.
    pub valid: usize,
    pub accuracy: f64,
    /// Mean of `u / normalizer` over valid pixels.
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub patches: Vec<Patch>,
}

impl PatchGrid {
    /// Pools the patches of another image into this grid.
    pub fn extend(&mut self, other: &PatchGrid) {
        self.patches.extend_from_slice(&other.patches);
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Tiles one image into patches. Patches with no valid pixel are dropped.
pub fn patchify(pred: &ProbTensor, umap: &UncertaintyMap, labels: &LabelMap, patch_size: usize) -> Result<PatchGrid> {
    let (h, w) = (pred.height(), pred.width());
    if h == 0 || w == 0 {
        return Err(Error::EmptyImage);
    }
    if patch_size == 0 {
        return Err(Error::InvalidSpec("patch size must be at least 1".into()));
    }
    if umap.height != h || umap.width != w || umap.values.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "uncertainty map is {}x{} but predictions are {h}x{w}",
            umap.height, umap.width
        )));
    }
    if umap.normalizer.is_nan() || umap.normalizer <= 0.0 {
        return Err(Error::ZeroNormalizer);
    }
    let unc: Vec<f64> = umap.normalized().collect();
    patchify_normalized(pred, &unc, labels, patch_size)
}

/// [`patchify`] for an uncertainty signal already scaled into `[0, 1]`.
pub fn patchify_normalized(pred: &ProbTensor, unc: &[f64], labels: &LabelMap, patch_size: usize) -> Result<PatchGrid> {
    let (h, w) = (pred.height(), pred.width());
    if h == 0 || w == 0 {
        return Err(Error::EmptyImage);
    }
    if patch_size == 0 {
        return Err(Error::InvalidSpec("patch size must be at least 1".into()));
    }
    if unc.len() != h * w {
        return Err(Error::ShapeMismatch(format!("{} uncertainties for {} pixels", unc.len(), h * w)));
    }
    labels.check_shape(h, w)?;

    let predicted = pred.argmax();
    let mut patches = Vec::new();
    for r0 in (0..h).step_by(patch_size) {
        for c0 in (0..w).step_by(patch_size) {
            let (mut valid, mut correct, mut unc_sum) = (0usize, 0usize, 0.0);
            for r in r0..(r0 + patch_size).min(h) {
                for c in c0..(c0 + patch_size).min(w) {
                    let idx = r * w + c;
                    if let Some(label) = labels.label(idx) {
                        valid += 1;
                        correct += usize::from(predicted[idx] == label);
                        unc_sum += unc[idx];
                    }
                }
            }
            if valid > 0 {
                patches.push(Patch {
                    row: r0 / patch_size,
                    col: c0 / patch_size,
                    valid,
                    accuracy: correct as f64 / valid as f64,
                    uncertainty: unc_sum / valid as f64,
                });
            }
        }
    }
    Ok(PatchGrid { patch_size, patches })
}

/// Accurate/inaccurate x certain/uncertain patch counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConditionalCounts {
    pub n_ac: u64,
    pub n_au: u64,
    pub n_ic: u64,
    pub n_iu: u64,
}

impl ConditionalCounts {
    pub fn from_grid(grid: &PatchGrid, acc_threshold: f64, unc_threshold: f64) -> Self {
        let mut counts = ConditionalCounts::default();
        for p in &grid.patches {
            match (p.accuracy > acc_threshold, p.uncertainty > unc_threshold) {
                (true, false) => counts.n_ac += 1,
                (true, true) => counts.n_au += 1,
                (false, false) => counts.n_ic += 1,
                (false, true) => counts.n_iu += 1,
            }
        }
        counts
    }

    pub fn merge(&mut self, other: &ConditionalCounts) {
        self.n_ac += other.n_ac;
        self.n_au += other.n_au;
        self.n_ic += other.n_ic;
        self.n_iu += other.n_iu;
    }

    pub fn total(&self) -> u64 {
        self.n_ac + self.n_au + self.n_ic + self.n_iu
    }

    pub fn p_accurate_given_certain(&self) -> Option<f64> {
        ratio(self.n_ac, self.n_ac + self.n_ic)
    }

    pub fn p_uncertain_given_inaccurate(&self) -> Option<f64> {
        ratio(self.n_iu, self.n_ic + self.n_iu)
    }

    pub fn pavpu(&self) -> Option<f64> {
        ratio(self.n_ac + self.n_iu, self.total())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Conditional metrics at one threshold pair. Ratios with a zero
/// denominator are `None` and serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalReport {
    #[serde(flatten)]
    pub counts: ConditionalCounts,
    pub p_accurate_given_certain: Option<f64>,
    pub p_uncertain_given_inaccurate: Option<f64>,
    pub pavpu: Option<f64>,
    pub acc_threshold: f64,
    pub unc_threshold: f64,
}

impl ConditionalReport {
    pub fn from_counts(counts: ConditionalCounts, acc_threshold: f64, unc_threshold: f64) -> Self {
        ConditionalReport {
            counts,
            p_accurate_given_certain: counts.p_accurate_given_certain(),
            p_uncertain_given_inaccurate: counts.p_uncertain_given_inaccurate(),
            pavpu: counts.pavpu(),
            acc_threshold,
            unc_threshold,
        }
    }
}

pub fn conditional_metrics(grid: &PatchGrid, acc_threshold: f64, unc_threshold: f64) -> ConditionalReport {
    let counts = ConditionalCounts::from_grid(grid, acc_threshold, unc_threshold);
    ConditionalReport::from_counts(counts, acc_threshold, unc_threshold)
}

/// Strictly increasing uncertainty thresholds inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThresholdGrid(Vec<f64>);

impl ThresholdGrid {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::InvalidSpec("empty threshold grid".into()));
        }
        if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidSpec("thresholds must lie in [0, 1]".into()));
        }
        if thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSpec("thresholds must be strictly increasing".into()));
        }
        Ok(ThresholdGrid(thresholds))
    }

    /// `0.00, 0.05, ..., 1.00`.
    pub fn uniform(steps: usize) -> Self {
        let steps = steps.max(1);
        ThresholdGrid((0..=steps).map(|i| i as f64 / steps as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid::uniform(20)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub value: Option<f64>,
}

/// Metric as a function of the uncertainty threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
    /// Trapezoidal area over segments whose two end points are defined.
    pub au: f64,
    /// Total threshold width left out of `au` because of undefined points.
    pub excluded_width: f64,
}

impl SweepCurve {
    pub fn from_points(points: Vec<SweepPoint>) -> Self {
        let mut au = 0.0;
        let mut excluded_width = 0.0;
        for w in points.windows(2) {
            let width = w[1].threshold - w[0].threshold;
            match (w[0].value, w[1].value) {
                (Some(a), Some(b)) => au += 0.5 * (a + b) * width,
                _ => excluded_width += width,
            }
        }
        SweepCurve {
            points,
            au,
            excluded_width,
        }
    }

    pub fn peak(&self) -> Option<f64> {
        self.points.iter().filter_map(|p| p.value).reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub acc_threshold: f64,
    pub pavpu: SweepCurve,
    pub p_accurate_given_certain: SweepCurve,
    pub p_uncertain_given_inaccurate: SweepCurve,
}

/// Counts at every threshold of `thresholds`.
pub fn sweep_counts(grid: &PatchGrid, acc_threshold: f64, thresholds: &ThresholdGrid) -> Vec<ConditionalCounts> {
    thresholds
        .as_slice()
        .iter()
        .map(|&t| ConditionalCounts::from_grid(grid, acc_threshold, t))
        .collect()
}

pub fn sweep_pavpu(grid: &PatchGrid, acc_threshold: f64, thresholds: &ThresholdGrid) -> SweepResult {
    SweepResult::from_counts(acc_threshold, thresholds, &sweep_counts(grid, acc_threshold, thresholds))
}

impl SweepResult {
    /// Curves from counts pooled per threshold; `counts[i]` belongs to
    /// `thresholds[i]`.
    pub fn from_counts(acc_threshold: f64, thresholds: &ThresholdGrid, counts: &[ConditionalCounts]) -> Self {
        let curve = |f: fn(&ConditionalCounts) -> Option<f64>| {
            SweepCurve::from_points(
                thresholds
                    .as_slice()
                    .iter()
                    .zip(counts)
                    .map(|(&threshold, c)| SweepPoint { threshold, value: f(c) })
                    .collect(),
            )
        };
        SweepResult {
            acc_threshold,
            pavpu: curve(ConditionalCounts::pavpu),
            p_accurate_given_certain: curve(ConditionalCounts::p_accurate_given_certain),
            p_uncertain_given_inaccurate: curve(ConditionalCounts::p_uncertain_given_inaccurate),
        }
    }
}

/// Confusion matrix indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add_image(&mut self, pred: &ProbTensor, labels: &LabelMap) -> Result<()> {
        labels.check_shape(pred.height(), pred.width())?;
        if pred.num_classes() != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "{} classes in prediction, {} in confusion matrix",
                pred.num_classes(),
                self.num_classes
            )));
        }
        labels.validate(self.num_classes)?;
        for (idx, p) in pred.argmax().into_iter().enumerate() {
            if let Some(t) = labels.label(idx) {
                self.counts[t * self.num_classes + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn finish(&self) -> Result<MiouReport> {
        let c = self.num_classes;
        if self.counts.iter().all(|&n| n == 0) {
            return Err(Error::NoValidPixels);
        }
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).filter(|&j| j != k).map(|j| self.get(k, j)).sum();
                let fp: u64 = (0..c).filter(|&j| j != k).map(|j| self.get(j, k)).sum();
                ratio(tp, tp + fp + fn_)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok(MiouReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class_iou: per_class,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    /// `None` for classes absent from both labels and predictions.
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn miou(pred: &ProbTensor, labels: &LabelMap) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(pred.num_classes());
    cm.add_image(pred, labels)?;
    cm.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Measure, Shape};

    fn one_hot(h: usize, w: usize, c: usize, classes: &[usize]) -> ProbTensor {
        let mut data = vec![0.0; h * w * c];
        for (i, &k) in classes.iter().enumerate() {
            data[i * c + k] = 1.0;
        }
        ProbTensor::new(Shape::new(h, w, c), data).unwrap()
    }

    fn umap(h: usize, w: usize, values: Vec<f64>) -> UncertaintyMap {
        UncertaintyMap {
            height: h,
            width: w,
            values,
            measure: Measure::PredictiveEntropy,
            normalizer: 1.0,
        }
    }

    fn patch(accuracy: f64, uncertainty: f64) -> Patch {
        Patch {
            row: 0,
            col: 0,
            valid: 1,
            accuracy,
            uncertainty,
        }
    }

    #[test]
    fn tiling() {
        let (h, w) = (5, 5);
        let pred = one_hot(h, w, 2, &[0; 25]);
        let labels = LabelMap::new(h, w, vec![0; 25], 255).unwrap();
        let grid = patchify(&pred, &umap(h, w, vec![0.0; 25]), &labels, 4).unwrap();
        let counts: Vec<usize> = grid.patches.iter().map(|p| p.valid).collect();
        assert_eq!(counts, vec![16, 4, 4, 1]);

        let pred = one_hot(8, 8, 2, &[0; 64]);
        let labels = LabelMap::new(8, 8, vec![0; 64], 255).unwrap();
        let grid = patchify(&pred, &umap(8, 8, vec![0.0; 64]), &labels, 4).unwrap();
        assert_eq!(grid.len(), 4);

        let grid = patchify(&pred, &umap(8, 8, vec![0.0; 64]), &labels, 1).unwrap();
        assert_eq!(grid.len(), 64);
        assert!(grid.patches.iter().all(|p| p.accuracy == 1.0));
    }

    #[test]
    fn ignored_pixels_and_empty_patches() {
        // 2x4, patch 2: right patch fully ignored
        let pred = one_hot(2, 4, 2, &[0, 1, 0, 0, 0, 0, 0, 0]);
        let labels = LabelMap::new(2, 4, vec![0, 0, 255, 255, 255, 0, 255, 255], 255).unwrap();
        let unc = umap(2, 4, vec![0.2, 0.4, 1.0, 1.0, 1.0, 0.6, 1.0, 1.0]);
        let grid = patchify(&pred, &unc, &labels, 2).unwrap();
        assert_eq!(grid.len(), 1);
        let p = grid.patches[0];
        assert_eq!(p.valid, 3);
        assert!((p.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.uncertainty - 0.4).abs() < 1e-15);
    }

    #[test]
    fn patchify_errors() {
        let pred = one_hot(2, 2, 2, &[0; 4]);
        let labels = LabelMap::new(2, 2, vec![0; 4], 255).unwrap();
        assert!(matches!(
            patchify(&pred, &umap(1, 4, vec![0.0; 4]), &labels, 2),
            Err(Error::ShapeMismatch(_))
        ));
        let empty = ProbTensor::new(Shape::new(0, 3, 2), vec![]).unwrap();
        let no_labels = LabelMap::new(0, 3, vec![], 255).unwrap();
        assert_eq!(
            patchify(&empty, &umap(0, 3, vec![]), &no_labels, 2),
            Err(Error::EmptyImage)
        );
    }

    #[test]
    fn conditional_examples() {
        let grid = PatchGrid {
            patch_size: 4,
            patches: vec![patch(1.0, 0.1), patch(1.0, 0.2)],
        };
        let r = conditional_metrics(&grid, 0.5, 0.5);
        assert_eq!(r.p_accurate_given_certain, Some(1.0));
        assert_eq!(r.pavpu, Some(1.0));
        assert_eq!(r.p_uncertain_given_inaccurate, None);

        let grid = PatchGrid {
            patch_size: 4,
            patches: vec![patch(1.0, 0.1), patch(0.9, 0.2), patch(0.8, 0.7), patch(0.2, 0.9)],
        };
        let r = conditional_metrics(&grid, 0.5, 0.5);
        assert_eq!(
            r.counts,
            ConditionalCounts {
                n_ac: 2,
                n_au: 1,
                n_ic: 0,
                n_iu: 1
            }
        );
        assert_eq!(r.pavpu, Some(0.75));
        assert_eq!(r.p_accurate_given_certain, Some(1.0));
        assert_eq!(r.p_uncertain_given_inaccurate, Some(1.0));

        let grid = PatchGrid {
            patch_size: 4,
            patches: vec![patch(0.0, 0.0), patch(0.25, 0.1)],
        };
        let r = conditional_metrics(&grid, 0.5, 0.5);
        assert_eq!(r.pavpu, Some(0.0));
        assert_eq!(r.p_uncertain_given_inaccurate, Some(0.0));
    }

    #[test]
    fn thresholds_are_strict() {
        let grid = PatchGrid {
            patch_size: 1,
            patches: vec![patch(0.5, 0.5)],
        };
        let r = conditional_metrics(&grid, 0.5, 0.5);
        assert_eq!(r.counts.n_ic, 1);
    }

    #[test]
    fn sweep_area() {
        let grid = PatchGrid {
            patch_size: 4,
            patches: vec![patch(1.0, 0.0), patch(0.0, 0.0)],
        };
        let flat = sweep_pavpu(&grid, 0.5, &ThresholdGrid::default());
        assert!((flat.pavpu.au - 0.5).abs() < 1e-12);
        let single = sweep_pavpu(&grid, 0.5, &ThresholdGrid::new(vec![0.3]).unwrap());
        assert_eq!(single.pavpu.au, 0.0);

        let curve = SweepCurve::from_points(vec![
            SweepPoint {
                threshold: 0.0,
                value: Some(0.5),
            },
            SweepPoint {
                threshold: 1.0,
                value: Some(1.0),
            },
        ]);
        assert!((curve.au - 0.75).abs() < 1e-15);

        let gap = SweepCurve::from_points(vec![
            SweepPoint {
                threshold: 0.0,
                value: Some(1.0),
            },
            SweepPoint {
                threshold: 0.5,
                value: None,
            },
            SweepPoint {
                threshold: 1.0,
                value: Some(1.0),
            },
        ]);
        assert_eq!(gap.au, 0.0);
        assert_eq!(gap.excluded_width, 1.0);
    }

    #[test]
    fn threshold_grid_validation() {
        assert!(ThresholdGrid::new(vec![]).is_err());
        assert!(ThresholdGrid::new(vec![0.2, 0.2]).is_err());
        assert!(ThresholdGrid::new(vec![0.0, 1.5]).is_err());
        let g = ThresholdGrid::default();
        assert_eq!(g.as_slice().len(), 21);
        assert_eq!(g.as_slice()[1], 0.05);
        assert_eq!(*g.as_slice().last().unwrap(), 1.0);
    }

    #[test]
    fn miou_examples() {
        let labels = LabelMap::new(2, 2, vec![0, 0, 1, 1], 255).unwrap();
        let r = miou(&one_hot(2, 2, 2, &[0, 0, 1, 1]), &labels).unwrap();
        assert_eq!(r.miou, 1.0);
        let r = miou(&one_hot(2, 2, 2, &[1, 1, 0, 0]), &labels).unwrap();
        assert_eq!(r.miou, 0.0);
        let r = miou(&one_hot(2, 2, 2, &[0, 1, 1, 1]), &labels).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn miou_skips_absent_classes_and_ignored_pixels() {
        let labels = LabelMap::new(1, 3, vec![0, 255, 0], 255).unwrap();
        let r = miou(&one_hot(1, 3, 3, &[0, 2, 0]), &labels).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(1.0), None, None]);
        assert_eq!(r.miou, 1.0);
        let all_ignored = LabelMap::new(1, 3, vec![255; 3], 255).unwrap();
        assert_eq!(miou(&one_hot(1, 3, 3, &[0, 2, 0]), &all_ignored), Err(Error::NoValidPixels));
    }
}

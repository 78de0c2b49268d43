//! Shared data model: per-pixel class distributions, expert stacks, gate
//! weights, label maps and uncertainty maps.
//!
//! Tensors are stored row-major as `(row, col, class)` in `f64`. Files hold
//! `f32`; values are promoted on load so every reduction runs in double
//! precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel tolerance on `|sum_c p_c - 1|`.
pub const PROB_TOLERANCE: f64 = 1e-5;
/// Tolerance on gate weights summing to one over experts.
pub const GATE_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// What to do with a pixel whose distribution does not sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    #[default]
    Reject,
    /// Divide each pixel by its sum. Non-finite, negative or zero-mass pixels
    /// are still rejected.
    Renormalize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, num_classes: usize) -> Self {
        Shape {
            height,
            width,
            num_classes,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.num_pixels() * self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.num_classes)
    }
}

/// Class-probability field for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl ProbTensor {
    /// Wraps `data` without checking the per-pixel distributions; only the
    /// buffer length and `C >= 2` are enforced. Use [`ProbTensor::validate`]
    /// or [`ProbTensor::checked`] when the source is untrusted.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.num_classes < 2 {
            return Err(Error::ShapeMismatch(format!(
                "need at least 2 classes, got {}",
                shape.num_classes
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "buffer holds {} values but shape {shape} needs {}",
                data.len(),
                shape.len()
            )));
        }
        Ok(ProbTensor { shape, data })
    }

    /// Builds a tensor and enforces the distribution invariants according to
    /// `strictness`.
    pub fn checked(shape: Shape, mut data: Vec<f64>, strictness: Strictness) -> Result<Self> {
        if strictness == Strictness::Renormalize {
            let c = shape.num_classes.max(1);
            for (idx, px) in data.chunks_exact_mut(c).enumerate() {
                let sum: f64 = px.iter().sum();
                if sum.is_finite() && sum > 0.0 && px.iter().all(|&v| v >= 0.0) {
                    px.iter_mut().for_each(|v| *v /= sum);
                } else if let Some(row) = idx.checked_div(shape.width) {
                    return Err(Error::NotNormalized {
                        row,
                        col: idx % shape.width,
                        sum,
                        tolerance: PROB_TOLERANCE,
                    });
                }
            }
        }
        let tensor = ProbTensor::new(shape, data)?;
        tensor.validate()?;
        Ok(tensor)
    }

    pub fn from_f32(shape: Shape, data: &[f32], strictness: Strictness) -> Result<Self> {
        Self::checked(shape, data.iter().map(|&v| f64::from(v)).collect(), strictness)
    }

    /// Checks that every value is a finite probability and every pixel sums
    /// to one within [`PROB_TOLERANCE`]. Reports the first offending pixel.
    pub fn validate(&self) -> Result<()> {
        let c = self.shape.num_classes;
        let w = self.shape.width;
        for (idx, px) in self.data.chunks_exact(c).enumerate() {
            let (row, col) = (idx / w, idx % w);
            for (class, &value) in px.iter().enumerate() {
                if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                    return Err(Error::InvalidProbability {
                        row,
                        col,
                        class,
                        value,
                    });
                }
            }
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > PROB_TOLERANCE {
                return Err(Error::NotNormalized {
                    row,
                    col,
                    sum,
                    tolerance: PROB_TOLERANCE,
                });
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.shape.num_pixels()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let c = self.shape.num_classes;
        let start = (row * self.shape.width + col) * c;
        &self.data[start..start + c]
    }

    /// Pixel distributions in row-major order.
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.shape.num_classes)
    }

    /// Per-pixel predicted class; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        self.pixels().map(argmax).collect()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Outputs of `N` experts for the same image.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertStack {
    experts: Vec<ProbTensor>,
    ids: Vec<String>,
}

impl ExpertStack {
    /// Requires at least one expert, identical shapes and unique ids.
    pub fn new(experts: Vec<ProbTensor>, ids: Vec<String>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::ShapeMismatch("an expert stack needs at least one expert".into()));
        }
        if ids.len() != experts.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} expert ids for {} experts",
                ids.len(),
                experts.len()
            )));
        }
        check_shapes(&experts)?;
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(Error::DuplicateExpertId(id.clone()));
            }
        }
        Ok(ExpertStack { experts, ids })
    }

    /// Stack with ids `expert0`, `expert1`, ...
    pub fn from_experts(experts: Vec<ProbTensor>) -> Result<Self> {
        let ids = (0..experts.len()).map(|i| format!("expert{i}")).collect();
        Self::new(experts, ids)
    }

    pub fn experts(&self) -> &[ProbTensor] {
        &self.experts
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.experts[0].shape()
    }
}

fn check_shapes(experts: &[ProbTensor]) -> Result<()> {
    if let Some(first) = experts.first() {
        for (i, e) in experts.iter().enumerate().skip(1) {
            if e.shape() != first.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "expert 0 is {} but expert {i} is {}",
                    first.shape(),
                    e.shape()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Simple,
    Classwise,
}

impl GateKind {
    pub fn name(self) -> &'static str {
        match self {
            GateKind::Simple => "simple",
            GateKind::Classwise => "classwise",
        }
    }
}

/// Per-image routing weights.
#[derive(Debug, Clone, PartialEq)]
pub enum GateWeights {
    /// One weight per expert.
    Simple(Vec<f64>),
    /// Expert-major `N x C` matrix; each class column sums to one over experts.
    Classwise {
        num_experts: usize,
        num_classes: usize,
        values: Vec<f64>,
    },
}

impl GateWeights {
    pub fn simple(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidGate("no experts".into()));
        }
        check_weights(weights.iter().copied(), "")?;
        Ok(GateWeights::Simple(weights))
    }

    pub fn uniform(num_experts: usize) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::InvalidGate("no experts".into()));
        }
        Ok(GateWeights::Simple(vec![1.0 / num_experts as f64; num_experts]))
    }

    /// `values[e * num_classes + c]` is the weight of expert `e` for class `c`.
    pub fn classwise(num_experts: usize, num_classes: usize, values: Vec<f64>) -> Result<Self> {
        if num_experts == 0 || num_classes == 0 {
            return Err(Error::InvalidGate("empty classwise gate".into()));
        }
        if values.len() != num_experts * num_classes {
            return Err(Error::InvalidGate(format!(
                "{} values for a {num_experts}x{num_classes} classwise gate",
                values.len()
            )));
        }
        for c in 0..num_classes {
            let column = (0..num_experts).map(|e| values[e * num_classes + c]);
            check_weights(column, &format!(" for class {c}"))?;
        }
        Ok(GateWeights::Classwise {
            num_experts,
            num_classes,
            values,
        })
    }

    /// Classwise gate that gives every class the same simple weights.
    pub fn broadcast(weights: &[f64], num_classes: usize) -> Result<Self> {
        let values = weights
            .iter()
            .flat_map(|&w| std::iter::repeat_n(w, num_classes))
            .collect();
        Self::classwise(weights.len(), num_classes, values)
    }

    pub fn kind(&self) -> GateKind {
        match self {
            GateWeights::Simple(_) => GateKind::Simple,
            GateWeights::Classwise { .. } => GateKind::Classwise,
        }
    }

    pub fn num_experts(&self) -> usize {
        match self {
            GateWeights::Simple(w) => w.len(),
            GateWeights::Classwise { num_experts, .. } => *num_experts,
        }
    }

    /// Weight of expert `e` for class `c`; simple gates ignore the class.
    pub fn weight(&self, expert: usize, class: usize) -> f64 {
        match self {
            GateWeights::Simple(w) => w[expert],
            GateWeights::Classwise {
                num_classes,
                values,
                ..
            } => values[expert * num_classes + class],
        }
    }

    pub fn as_simple(&self) -> Option<&[f64]> {
        match self {
            GateWeights::Simple(w) => Some(w),
            GateWeights::Classwise { .. } => None,
        }
    }

    /// Weights with experts reordered so that new expert `i` is old expert
    /// `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        match self {
            GateWeights::Simple(w) => Self::simple(order.iter().map(|&i| w[i]).collect()),
            GateWeights::Classwise {
                num_experts,
                num_classes,
                values,
            } => {
                let c = *num_classes;
                let values = order
                    .iter()
                    .flat_map(|&e| values[e * c..(e + 1) * c].iter().copied())
                    .collect();
                Self::classwise(*num_experts, c, values)
            }
        }
    }

    /// Flat storage in expert-major order.
    pub fn values(&self) -> &[f64] {
        match self {
            GateWeights::Simple(w) => w,
            GateWeights::Classwise { values, .. } => values,
        }
    }
}

fn check_weights(weights: impl Iterator<Item = f64>, context: &str) -> Result<()> {
    let mut sum = 0.0;
    for w in weights {
        if !w.is_finite() || !(0.0..=1.0 + GATE_TOLERANCE).contains(&w) {
            return Err(Error::InvalidGate(format!("weight {w} out of [0, 1]{context}")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > GATE_TOLERANCE {
        return Err(Error::InvalidGate(format!("weights sum to {sum}{context}")));
    }
    Ok(())
}

/// Ground-truth class index per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    ignore_index: u32,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>, ignore_index: u32) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
            ignore_index,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ignore_index(&self) -> u32 {
        self.ignore_index
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Label at flat index `idx`, or `None` for ignored pixels.
    pub fn label(&self, idx: usize) -> Option<usize> {
        let l = self.labels[idx];
        (l != self.ignore_index).then_some(l as usize)
    }

    pub fn num_valid(&self) -> usize {
        self.labels.iter().filter(|&&l| l != self.ignore_index).count()
    }

    /// Every non-ignored label must be below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (idx, &label) in self.labels.iter().enumerate() {
            if label != self.ignore_index && label as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    row: idx / self.width,
                    col: idx % self.width,
                    label,
                    num_classes,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::ShapeMismatch(format!(
                "labels are {}x{} but predictions are {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Measure {
    #[serde(rename = "pe")]
    PredictiveEntropy,
    #[serde(rename = "mi")]
    MutualInformation,
    #[serde(rename = "ev")]
    ExpertVariance,
    #[serde(rename = "gate_entropy")]
    GateEntropy,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Measure::PredictiveEntropy => "pe",
            Measure::MutualInformation => "mi",
            Measure::ExpertVariance => "ev",
            Measure::GateEntropy => "gate_entropy",
        }
    }
}

/// Scalar uncertainty per pixel, with the theoretical maximum used to scale
/// it into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub measure: Measure,
    pub normalizer: f64,
}

impl UncertaintyMap {
    pub fn normalized(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(|&v| (v / self.normalizer).clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Outcome of [`validate_stack`]: the first violated invariant, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub num_experts: usize,
    pub shape: Option<Shape>,
    pub violation: Option<Error>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }

    pub fn into_result(self) -> Result<()> {
        match self.violation {
            None => Ok(()),
            Some(e) => Err(e),
        }
    }
}

/// Checks expert outputs, gate and optional labels against each other.
///
/// Order of checks: expert shapes, per-pixel distributions (expert order,
/// then row-major), gate arity and class count, labels.
pub fn validate_stack(
    experts: &[ProbTensor],
    gate: &GateWeights,
    labels: Option<&LabelMap>,
) -> ValidationReport {
    let shape = experts.first().map(ProbTensor::shape);
    let violation = validate_inner(experts, gate, labels).err();
    ValidationReport {
        num_experts: experts.len(),
        shape,
        violation,
    }
}

fn validate_inner(experts: &[ProbTensor], gate: &GateWeights, labels: Option<&LabelMap>) -> Result<()> {
    if experts.is_empty() {
        return Err(Error::ShapeMismatch("an expert stack needs at least one expert".into()));
    }
    check_shapes(experts)?;
    for e in experts {
        e.validate()?;
    }
    if gate.num_experts() != experts.len() {
        return Err(Error::GateArity {
            gate: gate.num_experts(),
            stack: experts.len(),
        });
    }
    let shape = experts[0].shape();
    if let GateWeights::Classwise { num_classes, .. } = gate {
        if *num_classes != shape.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "classwise gate has {num_classes} classes but predictions have {}",
                shape.num_classes
            )));
        }
    }
    if let Some(labels) = labels {
        labels.check_shape(shape.height, shape.width)?;
        labels.validate(shape.num_classes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_tensor(h: usize, w: usize, c: usize) -> ProbTensor {
        ProbTensor::new(Shape::new(h, w, c), vec![1.0 / c as f64; h * w * c]).unwrap()
    }

    #[test]
    fn two_valid_experts_pass() {
        let experts = vec![uniform_tensor(4, 4, 3), uniform_tensor(4, 4, 3)];
        let gate = GateWeights::simple(vec![0.5, 0.5]).unwrap();
        let report = validate_stack(&experts, &gate, None);
        assert!(report.passed());
        assert_eq!(report, validate_stack(&experts, &gate, None));
    }

    #[test]
    fn differing_class_counts_are_a_shape_mismatch() {
        let experts = vec![uniform_tensor(4, 4, 3), uniform_tensor(4, 4, 4)];
        let gate = GateWeights::uniform(2).unwrap();
        let report = validate_stack(&experts, &gate, None);
        assert_eq!(report.violation.unwrap().kind(), "ShapeMismatch");
        assert!(ExpertStack::from_experts(experts).is_err());
    }

    #[test]
    fn unnormalized_pixel_is_located() {
        let mut data = vec![0.5; 2 * 3 * 2];
        // pixel (1, 2) -> (0.6, 0.6)
        data[10] = 0.6;
        data[11] = 0.6;
        let t = ProbTensor::new(Shape::new(2, 3, 2), data).unwrap();
        let report = validate_stack(&[t], &GateWeights::uniform(1).unwrap(), None);
        match report.violation {
            Some(Error::NotNormalized { row, col, sum, .. }) => {
                assert_eq!((row, col), (1, 2));
                assert!((sum - 1.2).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn renormalize_repairs_instead_of_rejecting() {
        let data = vec![0.6, 0.6, 0.25, 0.75];
        let shape = Shape::new(1, 2, 2);
        assert!(ProbTensor::checked(shape, data.clone(), Strictness::Reject).is_err());
        let t = ProbTensor::checked(shape, data, Strictness::Renormalize).unwrap();
        assert_eq!(t.pixel(0, 0), &[0.5, 0.5]);
        assert_eq!(t.pixel(0, 1), &[0.25, 0.75]);
        let zero = ProbTensor::checked(shape, vec![0.0, 0.0, 0.5, 0.5], Strictness::Renormalize);
        assert!(matches!(zero, Err(Error::NotNormalized { row: 0, col: 0, .. })));
    }

    #[test]
    fn gate_arity_and_label_range() {
        let experts = vec![uniform_tensor(2, 2, 3), uniform_tensor(2, 2, 3)];
        let gate = GateWeights::uniform(3).unwrap();
        let report = validate_stack(&experts, &gate, None);
        assert_eq!(report.violation, Some(Error::GateArity { gate: 3, stack: 2 }));

        let gate = GateWeights::uniform(2).unwrap();
        let labels = LabelMap::new(2, 2, vec![0, 1, 255, 3], 255).unwrap();
        let report = validate_stack(&experts, &gate, Some(&labels));
        assert_eq!(
            report.violation,
            Some(Error::LabelOutOfRange {
                row: 1,
                col: 1,
                label: 3,
                num_classes: 3
            })
        );
    }

    #[test]
    fn classwise_gate_class_count_must_match() {
        let experts = vec![uniform_tensor(2, 2, 3), uniform_tensor(2, 2, 3)];
        let gate = GateWeights::broadcast(&[0.5, 0.5], 4).unwrap();
        let report = validate_stack(&experts, &gate, None);
        assert_eq!(report.violation.unwrap().kind(), "ShapeMismatch");
    }

    #[test]
    fn gate_constructors_enforce_normalization() {
        assert!(GateWeights::simple(vec![0.5, 0.4]).is_err());
        assert!(GateWeights::simple(vec![1.5, -0.5]).is_err());
        assert!(GateWeights::simple(vec![0.5, 0.5 + 5e-7]).is_ok());
        // class 1 column sums to 1.5
        assert!(GateWeights::classwise(2, 2, vec![0.5, 1.0, 0.5, 0.5]).is_err());
        let g = GateWeights::classwise(2, 2, vec![0.5, 1.0, 0.5, 0.0]).unwrap();
        assert_eq!(g.weight(0, 1), 1.0);
        assert_eq!(g.weight(1, 0), 0.5);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = ExpertStack::new(
            vec![uniform_tensor(1, 1, 2), uniform_tensor(1, 1, 2)],
            vec!["a".into(), "a".into()],
        )
        .unwrap_err();
        assert_eq!(err, Error::DuplicateExpertId("a".into()));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }
}

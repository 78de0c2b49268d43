//! Per-pixel uncertainty maps extracted from a mixture of experts.
//!
//! All entropies are in nats. Each map carries the theoretical maximum of its
//! measure as `normalizer`, so `value / normalizer` lies in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::combine::{combine, combine_simple};
use crate::error::{Error, Result};
use crate::types::{ExpertStack, GateKind, GateWeights, Measure, ProbTensor, UncertaintyMap, PROB_TOLERANCE};

/// How the aggregated predictive distribution is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Average of the `N` experts plus the mixture output as an extra member.
    Stacked,
    /// The mixture output itself; needs a simple gate.
    Weighted,
}

impl AggregationMode {
    pub fn name(self) -> &'static str {
        match self {
            AggregationMode::Stacked => "stacked",
            AggregationMode::Weighted => "weighted",
        }
    }
}

/// Class reduction applied to the per-class expert variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceReduction {
    #[default]
    Mean,
    Sum,
}

/// `-sum_c p_c ln p_c` with `0 ln 0 = 0`, checked against the
/// distribution invariants.
pub fn shannon_entropy(dist: &[f64]) -> Result<f64> {
    if dist.is_empty() {
        return Err(Error::InvalidDistribution("empty distribution".into()));
    }
    if let Some(v) = dist.iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidDistribution(format!("entry {v} is not a probability")));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(entropy(dist).clamp(0.0, (dist.len() as f64).ln()))
}

/// Unchecked entropy of a probability vector.
#[inline]
pub(crate) fn entropy(p: &[f64]) -> f64 {
    0.0 - p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Mixture output computed once and shared by every measure.
#[derive(Debug, Clone)]
pub struct MoeOutputs<'a> {
    stack: &'a ExpertStack,
    gate: &'a GateWeights,
    moe: ProbTensor,
}

impl<'a> MoeOutputs<'a> {
    pub fn new(stack: &'a ExpertStack, gate: &'a GateWeights) -> Result<Self> {
        let moe = combine(stack, gate)?;
        Ok(MoeOutputs { stack, gate, moe })
    }

    /// Reuses a mixture prediction computed elsewhere (e.g. loaded from disk).
    pub fn with_prediction(stack: &'a ExpertStack, gate: &'a GateWeights, moe: ProbTensor) -> Result<Self> {
        if moe.shape() != stack.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mixture prediction is {} but experts are {}",
                moe.shape(),
                stack.shape()
            )));
        }
        if gate.num_experts() != stack.len() {
            return Err(Error::GateArity {
                gate: gate.num_experts(),
                stack: stack.len(),
            });
        }
        Ok(MoeOutputs { stack, gate, moe })
    }

    pub fn prediction(&self) -> &ProbTensor {
        &self.moe
    }

    pub fn stack(&self) -> &ExpertStack {
        self.stack
    }

    pub fn gate(&self) -> &GateWeights {
        self.gate
    }

    fn require_simple(&self, mode: AggregationMode) -> Result<Option<&'a [f64]>> {
        match (mode, self.gate.as_simple()) {
            (AggregationMode::Weighted, None) => Err(Error::WeightedNeedsSimpleGate),
            (AggregationMode::Weighted, Some(w)) => Ok(Some(w)),
            (AggregationMode::Stacked, _) => Ok(None),
        }
    }

    pub fn aggregate(&self, mode: AggregationMode) -> Result<ProbTensor> {
        match self.require_simple(mode)? {
            Some(_) => Ok(self.moe.clone()),
            None => {
                let members = (self.stack.len() + 1) as f64;
                let mut out = self.moe.as_slice().to_vec();
                for e in self.stack.experts() {
                    for (o, &p) in out.iter_mut().zip(e.as_slice()) {
                        *o += p;
                    }
                }
                out.iter_mut().for_each(|v| *v /= members);
                ProbTensor::new(self.moe.shape(), out)
            }
        }
    }

    pub fn predictive_entropy(&self, mode: AggregationMode) -> Result<UncertaintyMap> {
        let agg = self.aggregate(mode)?;
        let max = (agg.num_classes() as f64).ln();
        let values = agg.pixels().map(|p| entropy(p).clamp(0.0, max)).collect();
        Ok(self.map(Measure::PredictiveEntropy, values, max))
    }

    pub fn mutual_information(&self, mode: AggregationMode) -> Result<UncertaintyMap> {
        let weights = self.require_simple(mode)?;
        let agg = self.aggregate(mode)?;
        let n = self.stack.len();
        let normalizer = mi_normalizer(n, mode);
        let max = normalizer.min((agg.num_classes() as f64).ln());
        let c = agg.num_classes();

        let mut values = Vec::with_capacity(agg.num_pixels());
        for (idx, bar) in agg.pixels().enumerate() {
            let range = idx * c..(idx + 1) * c;
            let mean_member = match weights {
                Some(w) => self
                    .stack
                    .experts()
                    .iter()
                    .zip(w)
                    .map(|(e, &w)| w * entropy(&e.as_slice()[range.clone()]))
                    .sum::<f64>(),
                None => {
                    let members: f64 = self
                        .stack
                        .experts()
                        .iter()
                        .map(|e| entropy(&e.as_slice()[range.clone()]))
                        .sum();
                    (members + entropy(&self.moe.as_slice()[range])) / (n + 1) as f64
                }
            };
            let gap = entropy(bar) - mean_member;
            // clamp round-off
            values.push(gap.clamp(0.0, max));
        }
        Ok(self.map(Measure::MutualInformation, values, normalizer))
    }

    pub fn expert_variance(&self, reduction: VarianceReduction) -> UncertaintyMap {
        let n = self.stack.len() as f64;
        let c = self.moe.num_classes();
        let mut values = vec![0.0; self.moe.num_pixels()];
        for e in self.stack.experts() {
            for ((v, p), m) in values.iter_mut().zip(e.pixels()).zip(self.moe.pixels()) {
                *v += p.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        let scale = match reduction {
            VarianceReduction::Mean => n * c as f64,
            VarianceReduction::Sum => n,
        };
        values.iter_mut().for_each(|v| *v /= scale);
        let normalizer = ev_normalizer(self.stack.len(), c, self.gate.kind(), reduction);
        self.map(Measure::ExpertVariance, values, normalizer)
    }

    fn map(&self, measure: Measure, values: Vec<f64>, normalizer: f64) -> UncertaintyMap {
        UncertaintyMap {
            height: self.moe.height(),
            width: self.moe.width(),
            values,
            measure,
            normalizer,
        }
    }
}

/// Maximum mutual information: `ln(N+1)` stacked, `ln N` weighted, and 1 for
/// a single expert where the measure is identically zero.
pub fn mi_normalizer(num_experts: usize, mode: AggregationMode) -> f64 {
    match (mode, num_experts) {
        (_, 0 | 1) => 1.0,
        (AggregationMode::Stacked, n) => ((n + 1) as f64).ln(),
        (AggregationMode::Weighted, n) => (n as f64).ln(),
    }
}

/// Upper bound of the expert variance.
///
/// A uniform gate keeps the class-mean variance at or below 0.25. A skewed
/// simple gate can place the mixture on one expert, where the class-mean
/// squared deviation of the others reaches `2(N-1)/(N C)`. A classwise
/// mixture is renormalized, so only `2/C` holds.
pub fn ev_normalizer(num_experts: usize, num_classes: usize, kind: GateKind, reduction: VarianceReduction) -> f64 {
    let (n, c) = (num_experts as f64, num_classes as f64);
    let mean_bound = match (kind, num_experts) {
        (_, 0 | 1) => 0.25,
        (GateKind::Simple, _) => f64::max(0.25, 2.0 * (n - 1.0) / (n * c)),
        (GateKind::Classwise, _) => f64::max(0.25, 2.0 / c),
    };
    match reduction {
        VarianceReduction::Mean => mean_bound,
        VarianceReduction::Sum => mean_bound * c,
    }
}

pub fn aggregate_distribution(stack: &ExpertStack, gate: &GateWeights, mode: AggregationMode) -> Result<ProbTensor> {
    if mode == AggregationMode::Weighted {
        if gate.kind() != GateKind::Simple {
            return Err(Error::WeightedNeedsSimpleGate);
        }
        return combine_simple(stack, gate);
    }
    MoeOutputs::new(stack, gate)?.aggregate(mode)
}

pub fn predictive_entropy(stack: &ExpertStack, gate: &GateWeights, mode: AggregationMode) -> Result<UncertaintyMap> {
    if mode == AggregationMode::Weighted && gate.kind() != GateKind::Simple {
        return Err(Error::WeightedNeedsSimpleGate);
    }
    MoeOutputs::new(stack, gate)?.predictive_entropy(mode)
}

pub fn mutual_information(stack: &ExpertStack, gate: &GateWeights, mode: AggregationMode) -> Result<UncertaintyMap> {
    if mode == AggregationMode::Weighted && gate.kind() != GateKind::Simple {
        return Err(Error::WeightedNeedsSimpleGate);
    }
    MoeOutputs::new(stack, gate)?.mutual_information(mode)
}

/// Class-mean expert variance around the mixture output.
pub fn expert_variance(stack: &ExpertStack, gate: &GateWeights) -> Result<UncertaintyMap> {
    Ok(MoeOutputs::new(stack, gate)?.expert_variance(VarianceReduction::Mean))
}

/// Entropy of the routing distribution. Classwise gates average the
/// per-class entropy over experts across classes.
pub fn gate_entropy(gate: &GateWeights) -> Result<f64> {
    let n = gate.num_experts();
    if n == 0 {
        return Err(Error::InvalidGate("no experts".into()));
    }
    let max = (n as f64).ln();
    let h = match gate {
        GateWeights::Simple(w) => entropy(w),
        GateWeights::Classwise {
            num_experts,
            num_classes,
            values,
        } => {
            let mut column = vec![0.0; *num_experts];
            let mut total = 0.0;
            for c in 0..*num_classes {
                for (e, slot) in column.iter_mut().enumerate() {
                    *slot = values[e * num_classes + c];
                }
                total += entropy(&column);
            }
            total / *num_classes as f64
        }
    };
    Ok(h.clamp(0.0, max))
}

/// Gate entropy broadcast to every pixel.
pub fn gate_entropy_map(gate: &GateWeights, height: usize, width: usize) -> Result<UncertaintyMap> {
    let h = gate_entropy(gate)?;
    let n = gate.num_experts();
    Ok(UncertaintyMap {
        height,
        width,
        values: vec![h; height * width],
        measure: Measure::GateEntropy,
        normalizer: if n > 1 { (n as f64).ln() } else { 1.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Shape;
    use std::f64::consts::LN_2;

    fn stack(pixels: &[&[f64]]) -> ExpertStack {
        let c = pixels[0].len();
        let experts = pixels
            .iter()
            .map(|p| ProbTensor::new(Shape::new(1, 1, c), p.to_vec()).unwrap())
            .collect();
        ExpertStack::from_experts(experts).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((shannon_entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((shannon_entropy(&[0.75, 0.25]).unwrap() - h).abs() < 1e-15);
        assert!((h - 0.562335).abs() < 1e-6);
        assert!(shannon_entropy(&[0.6, 0.6]).is_err());
        assert!(shannon_entropy(&[]).is_err());
    }

    #[test]
    fn disagreeing_one_hots() {
        let s = stack(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let g = GateWeights::uniform(2).unwrap();
        let out = MoeOutputs::new(&s, &g).unwrap();

        let stacked = out.aggregate(AggregationMode::Stacked).unwrap();
        assert_eq!(stacked.as_slice(), &[0.5, 0.5]);

        for mode in [AggregationMode::Stacked, AggregationMode::Weighted] {
            let pe = out.predictive_entropy(mode).unwrap();
            assert!((pe.values[0] - LN_2).abs() < 1e-12);
        }
        let mi = out.mutual_information(AggregationMode::Stacked).unwrap();
        assert!((mi.values[0] - 2.0 / 3.0 * LN_2).abs() < 1e-12);
        assert!((mi.normalizer - 3f64.ln()).abs() < 1e-15);
        let mi = out.mutual_information(AggregationMode::Weighted).unwrap();
        assert!((mi.values[0] - LN_2).abs() < 1e-12);

        let ev = out.expert_variance(VarianceReduction::Mean);
        assert!((ev.values[0] - 0.25).abs() < 1e-15);
        let ev = out.expert_variance(VarianceReduction::Sum);
        assert!((ev.values[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_expert_has_no_disagreement() {
        let s = stack(&[&[0.3, 0.7]]);
        let g = GateWeights::uniform(1).unwrap();
        let out = MoeOutputs::new(&s, &g).unwrap();
        assert_eq!(out.expert_variance(VarianceReduction::Mean).values, vec![0.0]);
        let mi = out.mutual_information(AggregationMode::Weighted).unwrap();
        assert_eq!(mi.values, vec![0.0]);
        assert_eq!(mi.normalizer, 1.0);
    }

    #[test]
    fn weighted_mode_rejects_classwise_gate() {
        let s = stack(&[&[0.5, 0.5], &[0.2, 0.8]]);
        let g = GateWeights::broadcast(&[0.5, 0.5], 2).unwrap();
        for result in [
            aggregate_distribution(&s, &g, AggregationMode::Weighted).err(),
            predictive_entropy(&s, &g, AggregationMode::Weighted).err(),
            mutual_information(&s, &g, AggregationMode::Weighted).err(),
        ] {
            assert_eq!(result, Some(Error::WeightedNeedsSimpleGate));
        }
        assert!(predictive_entropy(&s, &g, AggregationMode::Stacked).is_ok());
    }

    #[test]
    fn gate_entropy_examples() {
        assert_eq!(gate_entropy(&GateWeights::simple(vec![1.0, 0.0]).unwrap()).unwrap(), 0.0);
        let h = gate_entropy(&GateWeights::uniform(2).unwrap()).unwrap();
        assert!((h - LN_2).abs() < 1e-15);
        // class 0 column (0.5, 0.5), class 1 column (1, 0)
        let g = GateWeights::classwise(2, 2, vec![0.5, 1.0, 0.5, 0.0]).unwrap();
        let h = gate_entropy(&g).unwrap();
        assert!((h - LN_2 / 2.0).abs() < 1e-15);
        assert!((h - 0.346574).abs() < 1e-6);
    }

    #[test]
    fn skewed_gate_can_exceed_quarter_variance() {
        let s = stack(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let g = GateWeights::simple(vec![1.0, 0.0]).unwrap();
        let ev = expert_variance(&s, &g).unwrap();
        assert!((ev.values[0] - 0.5).abs() < 1e-15);
        assert!(ev.values[0] <= ev.normalizer);
    }
}

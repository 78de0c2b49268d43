//! End-to-end evaluation of a dataset and the serialized metrics report.
//!
//! Images are fed one at a time to an [`Evaluator`], which keeps only
//! mergeable accumulators. The finished [`MetricsReport`] echoes every
//! setting that influenced a number and serializes deterministically.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    confidence_from_uncertainty, max_prob_confidence, CalibrationAccumulator, CalibrationReport, ConfidenceSource,
    DEFAULT_NUM_BINS, NLL_EPSILON,
};
use crate::combine::combine_uniform;
use crate::conditional::{
    patchify_normalized, sweep_counts, ConditionalCounts, ConditionalReport, ConfusionMatrix, MiouReport,
    SweepCurve, SweepPoint, SweepResult, ThresholdGrid, DEFAULT_ACC_THRESHOLD, DEFAULT_PATCH_SIZE,
};
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::rng::derive_seed;
use crate::shift::{
    perturb_stack, ShiftFamily, ShiftSpec, CONFUSION_PER_SEVERITY, LOGIT_SIGMA_PER_SEVERITY, TEMPERATURE_PER_SEVERITY,
};
use crate::types::{ExpertStack, GateKind, GateWeights, LabelMap, ProbTensor, Strictness, UncertaintyMap};
use crate::uncertainty::{gate_entropy, AggregationMode, MoeOutputs, VarianceReduction};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_UNC_THRESHOLD: f64 = 0.5;
pub const SWEEP_CSV_HEADER: &str = "family,severity,strength,metric,value";

/// An uncertainty estimate evaluated by the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PeStacked,
    PeWeighted,
    MiStacked,
    MiWeighted,
    Ev,
    /// `1 - max_c p_c` of the mixture prediction.
    MaxProb,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::PeStacked,
        Method::PeWeighted,
        Method::MiStacked,
        Method::MiWeighted,
        Method::Ev,
        Method::MaxProb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::PeStacked => "pe_stacked",
            Method::PeWeighted => "pe_weighted",
            Method::MiStacked => "mi_stacked",
            Method::MiWeighted => "mi_weighted",
            Method::Ev => "ev",
            Method::MaxProb => "max_prob",
        }
    }

    pub fn aggregation(self) -> Option<AggregationMode> {
        match self {
            Method::PeStacked | Method::MiStacked => Some(AggregationMode::Stacked),
            Method::PeWeighted | Method::MiWeighted => Some(AggregationMode::Weighted),
            Method::Ev | Method::MaxProb => None,
        }
    }

    pub fn confidence_source(self) -> ConfidenceSource {
        match self {
            Method::MaxProb => ConfidenceSource::MaxProb,
            _ => ConfidenceSource::OneMinusNormalizedUncertainty,
        }
    }

    /// Every method that works with `kind`.
    pub fn defaults_for(kind: GateKind) -> Vec<Method> {
        Method::ALL
            .into_iter()
            .filter(|m| kind == GateKind::Simple || m.aggregation() != Some(AggregationMode::Weighted))
            .collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown method {s:?}")))
    }
}

/// How per-image conditional metrics are combined into dataset values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Patch counts are summed over images before taking ratios.
    #[default]
    Pooled,
    /// Ratios are computed per image and averaged over images where defined.
    PerImageMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub num_bins: usize,
    pub patch_size: usize,
    pub acc_threshold: f64,
    pub unc_threshold: f64,
    pub thresholds: ThresholdGrid,
    /// Empty means every method compatible with the gate kind.
    pub methods: Vec<Method>,
    pub ev_reduction: VarianceReduction,
    pub pooling: Pooling,
    pub strictness: Strictness,
    /// Distribution shift applied to every expert before evaluation.
    pub shift: Option<ShiftSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_bins: DEFAULT_NUM_BINS,
            patch_size: DEFAULT_PATCH_SIZE,
            acc_threshold: DEFAULT_ACC_THRESHOLD,
            unc_threshold: DEFAULT_UNC_THRESHOLD,
            thresholds: ThresholdGrid::default(),
            methods: Vec::new(),
            ev_reduction: VarianceReduction::Mean,
            pooling: Pooling::Pooled,
            strictness: Strictness::Reject,
            shift: None,
        }
    }
}

impl EvalConfig {
    fn check(&self) -> Result<()> {
        if self.num_bins == 0 {
            return Err(Error::InvalidSpec("at least one calibration bin is required".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::InvalidSpec("patch size must be positive".into()));
        }
        for (name, t) in [("accuracy", self.acc_threshold), ("uncertainty", self.unc_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidSpec(format!("{name} threshold {t} is outside [0, 1]")));
            }
        }
        ThresholdGrid::new(self.thresholds.as_slice().to_vec())?;
        if let Some(shift) = &self.shift {
            if shift.severity > crate::shift::MAX_SEVERITY {
                return Err(Error::InvalidSpec(format!("severity {} is above 5", shift.severity)));
            }
        }
        Ok(())
    }
}

/// Dataset-level facts the evaluator checks every image against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub num_classes: usize,
    pub ignore_index: u32,
    pub gate_kind: GateKind,
    pub expert_ids: Vec<String>,
}

impl DatasetInfo {
    pub fn from_manifest(manifest: &Manifest) -> Self {
        DatasetInfo {
            num_classes: manifest.num_classes,
            ignore_index: manifest.ignore_index,
            gate_kind: manifest.gate_kind.gate_kind(),
            expert_ids: manifest.expert_ids(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftScales {
    pub temperature_per_severity: f64,
    pub logit_sigma_per_severity: f64,
    pub confusion_per_severity: f64,
}

impl Default for ShiftScales {
    fn default() -> Self {
        ShiftScales {
            temperature_per_severity: TEMPERATURE_PER_SEVERITY,
            logit_sigma_per_severity: LOGIT_SIGMA_PER_SEVERITY,
            confusion_per_severity: CONFUSION_PER_SEVERITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    #[serde(flatten)]
    pub eval: EvalConfig,
    #[serde(flatten)]
    pub dataset: DatasetInfo,
    pub nll_epsilon: f64,
    /// Both patch comparisons use `>`.
    pub threshold_comparison: String,
    pub shift_scales: ShiftScales,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMiou {
    pub id: String,
    #[serde(flatten)]
    pub report: MiouReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationBlock {
    pub moe: MiouReport,
    pub uniform_ensemble: MiouReport,
    pub experts: Vec<ExpertMiou>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEntropyBlock {
    pub normalizer: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodBlock {
    pub method: Method,
    pub aggregation: Option<AggregationMode>,
    pub confidence_source: ConfidenceSource,
    pub normalizer: f64,
    /// Pixel-weighted mean of the raw uncertainty over all pixels.
    pub mean_uncertainty: f64,
    pub calibration: CalibrationReport,
    pub conditional: ConditionalReport,
    pub sweep: SweepResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub id: String,
    pub gate_entropy: f64,
    pub moe_miou: Option<f64>,
    pub moe_pixel_accuracy: Option<f64>,
    pub mean_uncertainty: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub config: ConfigEcho,
    pub num_images: usize,
    pub segmentation: SegmentationBlock,
    pub gate_entropy: GateEntropyBlock,
    pub methods: Vec<MethodBlock>,
    pub images: Vec<ImageSummary>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string(self).map_err(|e| Error::InvalidSpec(format!("report serialization: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn method(&self, method: Method) -> Option<&MethodBlock> {
        self.methods.iter().find(|b| b.method == method)
    }

    /// Named scalars in a fixed order, for curves over shift severity.
    pub fn scalar_metrics(&self) -> Vec<(String, Option<f64>)> {
        let mut out = vec![
            ("miou_moe".to_string(), Some(self.segmentation.moe.miou)),
            ("miou_uniform".to_string(), Some(self.segmentation.uniform_ensemble.miou)),
            ("gate_entropy_mean".to_string(), Some(self.gate_entropy.mean)),
        ];
        if let Some(first) = self.methods.first() {
            out.push(("brier".to_string(), Some(first.calibration.brier)));
            out.push(("nll".to_string(), Some(first.calibration.nll)));
        }
        for b in &self.methods {
            let m = b.method.name();
            out.push((format!("{m}_mean_uncertainty"), Some(b.mean_uncertainty)));
            out.push((format!("{m}_ece"), Some(b.calibration.ece)));
            out.push((format!("{m}_mce"), Some(b.calibration.mce)));
            out.push((format!("{m}_pavpu"), b.conditional.pavpu));
            out.push((format!("{m}_au_pavpu"), Some(b.sweep.pavpu.au)));
        }
        out
    }
}

/// Running sums of the three conditional ratios where they are defined.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct RatioMeans {
    sum: [f64; 3],
    count: [u64; 3],
}

impl RatioMeans {
    fn ratios(c: &ConditionalCounts) -> [Option<f64>; 3] {
        [c.p_accurate_given_certain(), c.p_uncertain_given_inaccurate(), c.pavpu()]
    }

    fn push(&mut self, c: &ConditionalCounts) {
        for (i, r) in Self::ratios(c).into_iter().enumerate() {
            if let Some(r) = r {
                self.sum[i] += r;
                self.count[i] += 1;
            }
        }
    }

    fn mean(&self, i: usize) -> Option<f64> {
        (self.count[i] > 0).then(|| self.sum[i] / self.count[i] as f64)
    }
}

#[derive(Debug, Clone)]
struct MethodState {
    method: Method,
    normalizer: f64,
    calibration: CalibrationAccumulator,
    counts: ConditionalCounts,
    sweep: Vec<ConditionalCounts>,
    means: RatioMeans,
    sweep_means: Vec<RatioMeans>,
    unc_sum: f64,
    unc_count: u64,
}

/// Streaming evaluator: one image at a time, in dataset order.
#[derive(Debug, Clone)]
pub struct Evaluator {
    config: EvalConfig,
    dataset: DatasetInfo,
    methods: Vec<MethodState>,
    moe_cm: ConfusionMatrix,
    uniform_cm: ConfusionMatrix,
    expert_cms: Vec<ConfusionMatrix>,
    gate_entropies: Vec<f64>,
    images: Vec<ImageSummary>,
}

struct MethodMap {
    raw: Vec<f64>,
    normalized: Vec<f64>,
    confidence: Vec<f64>,
    normalizer: f64,
}

fn from_uncertainty(map: UncertaintyMap) -> Result<MethodMap> {
    let confidence = confidence_from_uncertainty(&map)?;
    let normalized = map.normalized().collect();
    Ok(MethodMap {
        normalizer: map.normalizer,
        raw: map.values,
        normalized,
        confidence,
    })
}

fn method_map(outputs: &MoeOutputs<'_>, method: Method, reduction: VarianceReduction) -> Result<MethodMap> {
    match method {
        Method::PeStacked | Method::PeWeighted => {
            from_uncertainty(outputs.predictive_entropy(method.aggregation().expect("entropy method"))?)
        }
        Method::MiStacked | Method::MiWeighted => {
            from_uncertainty(outputs.mutual_information(method.aggregation().expect("entropy method"))?)
        }
        Method::Ev => from_uncertainty(outputs.expert_variance(reduction)),
        Method::MaxProb => {
            let pred = outputs.prediction();
            let normalizer = 1.0 - 1.0 / pred.num_classes() as f64;
            let confidence = max_prob_confidence(pred);
            let raw: Vec<f64> = confidence.iter().map(|&c| (1.0 - c).max(0.0)).collect();
            let normalized = raw.iter().map(|&u| (u / normalizer).clamp(0.0, 1.0)).collect();
            Ok(MethodMap {
                raw,
                normalized,
                confidence,
                normalizer,
            })
        }
    }
}

impl Evaluator {
    pub fn new(mut config: EvalConfig, dataset: DatasetInfo) -> Result<Self> {
        config.check()?;
        if config.methods.is_empty() {
            config.methods = Method::defaults_for(dataset.gate_kind);
        }
        let mut seen = config.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != config.methods.len() {
            return Err(Error::InvalidSpec("methods listed more than once".into()));
        }
        if dataset.gate_kind == GateKind::Classwise
            && config.methods.iter().any(|m| m.aggregation() == Some(AggregationMode::Weighted))
        {
            return Err(Error::WeightedNeedsSimpleGate);
        }
        if dataset.expert_ids.is_empty() {
            return Err(Error::InvalidSpec("no experts".into()));
        }
        let c = dataset.num_classes;
        let n_thresholds = config.thresholds.as_slice().len();
        let methods = config
            .methods
            .iter()
            .map(|&method| {
                Ok(MethodState {
                    method,
                    normalizer: f64::NAN,
                    calibration: CalibrationAccumulator::new(config.num_bins)?,
                    counts: ConditionalCounts::default(),
                    sweep: vec![ConditionalCounts::default(); n_thresholds],
                    means: RatioMeans::default(),
                    sweep_means: vec![RatioMeans::default(); n_thresholds],
                    unc_sum: 0.0,
                    unc_count: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Evaluator {
            methods,
            moe_cm: ConfusionMatrix::new(c),
            uniform_cm: ConfusionMatrix::new(c),
            expert_cms: vec![ConfusionMatrix::new(c); dataset.expert_ids.len()],
            gate_entropies: Vec::new(),
            images: Vec::new(),
            config,
            dataset,
        })
    }

    /// Settings after defaults were resolved.
    pub fn config(&self) -> &EvalConfig {
        &self.config
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    /// Evaluates one image. `fused` replaces the mixture prediction that
    /// would otherwise be computed from `stack` and `gate`.
    pub fn add_image(
        &mut self,
        id: &str,
        stack: &ExpertStack,
        gate: &GateWeights,
        labels: &LabelMap,
        fused: Option<ProbTensor>,
    ) -> Result<&ImageSummary> {
        let shape = stack.shape();
        if shape.num_classes != self.dataset.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "image {id} has {} classes, dataset has {}",
                shape.num_classes, self.dataset.num_classes
            )));
        }
        if stack.len() != self.dataset.expert_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "image {id} has {} experts, dataset has {}",
                stack.len(),
                self.dataset.expert_ids.len()
            )));
        }
        if gate.kind() != self.dataset.gate_kind {
            return Err(Error::GateKindMismatch {
                expected: self.dataset.gate_kind.name(),
                actual: gate.kind().name(),
            });
        }
        labels.check_shape(shape.height, shape.width)?;
        labels.validate(shape.num_classes)?;

        let shifted;
        let stack = match &self.config.shift {
            Some(shift) if shift.severity > 0 => {
                if fused.is_some() {
                    return Err(Error::InvalidSpec("a precomputed prediction cannot be combined with a shift".into()));
                }
                let spec = ShiftSpec {
                    seed: derive_seed(shift.seed, self.images.len() as u64),
                    ..*shift
                };
                shifted = perturb_stack(stack, &spec)?;
                &shifted
            }
            _ => stack,
        };
        let outputs = match fused {
            Some(pred) => MoeOutputs::with_prediction(stack, gate, pred)?,
            None => MoeOutputs::new(stack, gate)?,
        };
        let pred = outputs.prediction();

        let mut image_cm = ConfusionMatrix::new(shape.num_classes);
        image_cm.add_image(pred, labels)?;
        self.moe_cm.merge(&image_cm);
        self.uniform_cm.add_image(&combine_uniform(stack)?, labels)?;
        for (cm, expert) in self.expert_cms.iter_mut().zip(stack.experts()) {
            cm.add_image(expert, labels)?;
        }
        let image_miou = match image_cm.finish() {
            Ok(r) => Some(r.miou),
            Err(Error::NoValidPixels) => None,
            Err(e) => return Err(e),
        };
        let correct: u64 = (0..shape.num_classes).map(|k| image_cm.get(k, k)).sum();
        let valid = labels.num_valid() as u64;
        let pixel_accuracy = (valid > 0).then(|| correct as f64 / valid as f64);

        let h_gate = gate_entropy(gate)?;
        let mut mean_uncertainty = BTreeMap::new();
        let thresholds = self.config.thresholds.clone();
        for state in &mut self.methods {
            let map = method_map(&outputs, state.method, self.config.ev_reduction)?;
            state.normalizer = map.normalizer;
            state.calibration.add_image(pred, &map.confidence, labels)?;
            let grid = patchify_normalized(pred, &map.normalized, labels, self.config.patch_size)?;
            let counts = ConditionalCounts::from_grid(&grid, self.config.acc_threshold, self.config.unc_threshold);
            state.counts.merge(&counts);
            state.means.push(&counts);
            let per_threshold = sweep_counts(&grid, self.config.acc_threshold, &thresholds);
            for ((pooled, means), c) in state.sweep.iter_mut().zip(&mut state.sweep_means).zip(&per_threshold) {
                pooled.merge(c);
                means.push(c);
            }
            let sum: f64 = map.raw.iter().sum();
            state.unc_sum += sum;
            state.unc_count += map.raw.len() as u64;
            mean_uncertainty.insert(state.method.name().to_string(), sum / map.raw.len() as f64);
        }
        self.gate_entropies.push(h_gate);
        self.images.push(ImageSummary {
            id: id.to_string(),
            gate_entropy: h_gate,
            moe_miou: image_miou,
            moe_pixel_accuracy: pixel_accuracy,
            mean_uncertainty,
        });
        Ok(self.images.last().expect("just pushed"))
    }

    fn method_block(&self, state: &MethodState) -> Result<MethodBlock> {
        let cfg = &self.config;
        let (conditional, sweep) = match cfg.pooling {
            Pooling::Pooled => (
                ConditionalReport::from_counts(state.counts, cfg.acc_threshold, cfg.unc_threshold),
                SweepResult::from_counts(cfg.acc_threshold, &cfg.thresholds, &state.sweep),
            ),
            Pooling::PerImageMean => {
                let mut report = ConditionalReport::from_counts(state.counts, cfg.acc_threshold, cfg.unc_threshold);
                report.p_accurate_given_certain = state.means.mean(0);
                report.p_uncertain_given_inaccurate = state.means.mean(1);
                report.pavpu = state.means.mean(2);
                let curve = |i: usize| {
                    SweepCurve::from_points(
                        cfg.thresholds
                            .as_slice()
                            .iter()
                            .zip(&state.sweep_means)
                            .map(|(&threshold, m)| SweepPoint {
                                threshold,
                                value: m.mean(i),
                            })
                            .collect(),
                    )
                };
                let sweep = SweepResult {
                    acc_threshold: cfg.acc_threshold,
                    p_accurate_given_certain: curve(0),
                    p_uncertain_given_inaccurate: curve(1),
                    pavpu: curve(2),
                };
                (report, sweep)
            }
        };
        Ok(MethodBlock {
            method: state.method,
            aggregation: state.method.aggregation(),
            confidence_source: state.method.confidence_source(),
            normalizer: state.normalizer,
            mean_uncertainty: state.unc_sum / state.unc_count as f64,
            calibration: state.calibration.finish()?,
            conditional,
            sweep,
        })
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.images.is_empty() {
            return Err(Error::InvalidSpec("no images were evaluated".into()));
        }
        let experts = self
            .dataset
            .expert_ids
            .iter()
            .zip(&self.expert_cms)
            .map(|(id, cm)| {
                Ok(ExpertMiou {
                    id: id.clone(),
                    report: cm.finish()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = self.dataset.expert_ids.len();
        let g = &self.gate_entropies;
        let gate_entropy = GateEntropyBlock {
            normalizer: if n > 1 { (n as f64).ln() } else { 1.0 },
            mean: g.iter().sum::<f64>() / g.len() as f64,
            min: g.iter().copied().fold(f64::INFINITY, f64::min),
            max: g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        Ok(MetricsReport {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: crate::VERSION.to_string(),
            schema_version: REPORT_SCHEMA_VERSION,
            config: ConfigEcho {
                eval: self.config.clone(),
                dataset: self.dataset.clone(),
                nll_epsilon: NLL_EPSILON,
                threshold_comparison: "strict_greater".to_string(),
                shift_scales: ShiftScales::default(),
            },
            num_images: self.images.len(),
            segmentation: SegmentationBlock {
                moe: self.moe_cm.finish()?,
                uniform_ensemble: self.uniform_cm.finish()?,
                experts,
            },
            gate_entropy,
            methods: self.methods.iter().map(|s| self.method_block(s)).collect::<Result<_>>()?,
            images: self.images.clone(),
        })
    }
}

/// Evaluates every image of `manifest` in order.
pub fn evaluate_manifest(manifest: &Manifest, config: &EvalConfig) -> Result<MetricsReport> {
    let mut evaluator = Evaluator::new(config.clone(), DatasetInfo::from_manifest(manifest))?;
    for index in 0..manifest.images.len() {
        let image = manifest.load_image(index, config.strictness)?;
        let labels = image
            .labels
            .ok_or_else(|| Error::Manifest(format!("image {} has no labels", image.id)))?;
        evaluator.add_image(&image.id, &image.stack, &image.gate, &labels, None)?;
    }
    evaluator.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: ShiftFamily,
    pub severity: u8,
    pub strength: f64,
    pub metric: String,
    pub value: Option<f64>,
}

/// Full evaluation at each severity of `family`.
pub fn severity_sweep(
    manifest: &Manifest,
    config: &EvalConfig,
    family: ShiftFamily,
    severities: &[u8],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &severity in severities {
        let cfg = EvalConfig {
            shift: Some(ShiftSpec { family, severity, seed }),
            ..config.clone()
        };
        let report = evaluate_manifest(manifest, &cfg)?;
        rows.extend(report.scalar_metrics().into_iter().map(|(metric, value)| SweepRow {
            family,
            severity,
            strength: family.strength(severity),
            metric,
            value,
        }));
    }
    Ok(rows)
}

/// CSV with a header row; undefined values are empty fields.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let value = r.value.map(|v| format!("{v:.16e}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.16e},{},{}\n",
            r.family.name(),
            r.severity,
            r.strength,
            r.metric,
            value
        ));
    }
    out
}

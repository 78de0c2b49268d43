//! Synthetic scenes, domain experts, oracle gates and severity-graded
//! distribution shifts.
//!
//! Scenes are Voronoi partitions of the image into regions, each with a class
//! and a domain tag. An expert is sharp in the domains it knows and close to
//! uniform elsewhere. Shifts act directly on probability tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng, STREAM_CONFUSION, STREAM_EXPERT, STREAM_PERTURB, STREAM_SCENE};
use crate::types::{ExpertStack, GateWeights, LabelMap, ProbTensor, Shape, DEFAULT_IGNORE_INDEX};

pub const MAX_SEVERITY: u8 = 5;
pub const TEMPERATURE_PER_SEVERITY: f64 = 0.4;
pub const LOGIT_SIGMA_PER_SEVERITY: f64 = 0.3;
pub const CONFUSION_PER_SEVERITY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_regions: usize,
    pub num_domains: usize,
    /// Relative frequency of each domain among regions; empty means uniform.
    #[serde(default)]
    pub domain_weights: Vec<f64>,
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("scenes need at least 2 classes".into()));
        }
        if self.num_classes > DEFAULT_IGNORE_INDEX as usize {
            return Err(Error::InvalidSpec("class ids would collide with the ignore index".into()));
        }
        if self.num_regions == 0 || self.num_domains == 0 {
            return Err(Error::InvalidSpec("scenes need at least one region and one domain".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec("empty scene".into()));
        }
        if !self.domain_weights.is_empty() {
            if self.domain_weights.len() != self.num_domains {
                return Err(Error::InvalidSpec(format!(
                    "{} domain weights for {} domains",
                    self.domain_weights.len(),
                    self.num_domains
                )));
            }
            let ok = self.domain_weights.iter().all(|w| w.is_finite() && *w >= 0.0)
                && self.domain_weights.iter().sum::<f64>() > 0.0;
            if !ok {
                return Err(Error::InvalidSpec("domain weights must be nonnegative with a positive sum".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub labels: LabelMap,
    /// Domain tag per pixel, row-major.
    pub domains: Vec<usize>,
    pub num_domains: usize,
    pub num_classes: usize,
    pub region_classes: Vec<usize>,
    pub region_domains: Vec<usize>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    /// Fraction of pixels whose domain is in `known`.
    pub fn domain_fraction(&self, known: &[usize]) -> f64 {
        let hits = self.domains.iter().filter(|d| known.contains(d)).count();
        hits as f64 / self.domains.len() as f64
    }
}

/// Generates a scene: random sites, nearest-site regions (ties to the lower
/// region index), classes dealt so that every class appears once there are
/// at least as many regions as classes.
pub fn synth_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed, STREAM_SCENE);
    let (h, w) = (spec.height, spec.width);

    let sites: Vec<(f64, f64)> = (0..spec.num_regions)
        .map(|_| (rng.uniform() * h as f64, rng.uniform() * w as f64))
        .collect();
    let mut region_classes: Vec<usize> = (0..spec.num_regions).map(|r| r % spec.num_classes).collect();
    rng.shuffle(&mut region_classes);
    let uniform_domains = vec![1.0; spec.num_domains];
    let weights = if spec.domain_weights.is_empty() {
        &uniform_domains
    } else {
        &spec.domain_weights
    };
    let region_domains: Vec<usize> = (0..spec.num_regions).map(|_| rng.weighted(weights)).collect();

    let mut labels = Vec::with_capacity(h * w);
    let mut domains = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, &(sy, sx)) in sites.iter().enumerate() {
                let d = (y - sy).powi(2) + (x - sx).powi(2);
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            labels.push(region_classes[best] as u32);
            domains.push(region_domains[best]);
        }
    }

    Ok(Scene {
        labels: LabelMap::new(h, w, labels, DEFAULT_IGNORE_INDEX)?,
        domains,
        num_domains: spec.num_domains,
        num_classes: spec.num_classes,
        region_classes,
        region_domains,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub known_domains: Vec<usize>,
    /// Concentration on the target class inside known domains; may be
    /// infinite for an exact one-hot.
    pub alpha_in: f64,
    /// Concentration outside known domains; 1 is uniform.
    pub alpha_out: f64,
    /// Probability that an in-domain pixel targets a wrong class.
    pub noise_rate: f64,
    pub seed: u64,
}

impl ExpertSpec {
    fn validate(&self) -> Result<()> {
        if !(self.alpha_out >= 1.0 && self.alpha_in > self.alpha_out) {
            return Err(Error::InvalidSpec(format!(
                "need alpha_in > alpha_out >= 1, got {} and {}",
                self.alpha_in, self.alpha_out
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidSpec(format!("noise rate {} not in [0, 1)", self.noise_rate)));
        }
        Ok(())
    }
}

/// Writes the distribution with weight `alpha` on `target` and 1 elsewhere.
fn concentrated(out: &mut [f64], target: usize, alpha: f64) {
    if alpha.is_infinite() {
        out.fill(0.0);
        out[target] = 1.0;
        return;
    }
    let z = alpha + (out.len() - 1) as f64;
    out.fill(1.0 / z);
    out[target] = alpha / z;
}

/// Per pixel: in a known domain the target is the true label, swapped for a
/// random wrong class with probability `noise_rate`, at concentration
/// `alpha_in`. Outside, the target is a random class at `alpha_out`.
pub fn synth_expert(scene: &Scene, spec: &ExpertSpec) -> Result<ProbTensor> {
    spec.validate()?;
    let c = scene.num_classes;
    let mut rng = SeededRng::new(spec.seed, STREAM_EXPERT);
    let mut data = vec![0.0; scene.domains.len() * c];
    for (idx, px) in data.chunks_exact_mut(c).enumerate() {
        // fixed number of draws per pixel keeps the stream aligned
        let flip = rng.uniform() < spec.noise_rate;
        let wrong = rng.below(c - 1);
        let guess = rng.below(c);
        let label = scene.labels.as_slice()[idx] as usize;
        if spec.known_domains.contains(&scene.domains[idx]) {
            let target = if flip { wrong + usize::from(wrong >= label) } else { label };
            concentrated(px, target, spec.alpha_in);
        } else {
            concentrated(px, guess, spec.alpha_out);
        }
    }
    ProbTensor::new(Shape::new(scene.height(), scene.width(), c), data)
}

/// Simple gate mixing oracle domain coverage with a uniform prior:
/// `w_e = beta * f_e + (1 - beta) / N`, renormalized, where `f_e` is the
/// fraction of pixels in expert `e`'s known domains.
pub fn synth_gate(scene: &Scene, experts: &[ExpertSpec], beta: f64) -> Result<GateWeights> {
    let fractions: Vec<f64> = experts.iter().map(|e| scene.domain_fraction(&e.known_domains)).collect();
    gate_from_fractions(&fractions, beta)
}

pub fn gate_from_fractions(fractions: &[f64], beta: f64) -> Result<GateWeights> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidSpec(format!("gate strength {beta} not in [0, 1]")));
    }
    if fractions.is_empty() {
        return Err(Error::InvalidSpec("no experts".into()));
    }
    let n = fractions.len() as f64;
    let raw: Vec<f64> = fractions.iter().map(|f| beta * f + (1.0 - beta) / n).collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return GateWeights::uniform(fractions.len());
    }
    GateWeights::simple(raw.iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftFamily {
    /// `p ∝ p^(1/T)`, `T = 1 + 0.4 s`.
    Temperature,
    /// Gaussian noise with `sigma = 0.3 s` on `ln p`, then softmax.
    LogitNoise,
    /// `p ← (1 - λ) p + λ p M`, `λ = 0.1 s`, `M` a random row-stochastic
    /// confusion matrix with zero diagonal.
    ClassConfusion,
}

impl ShiftFamily {
    pub fn name(self) -> &'static str {
        match self {
            ShiftFamily::Temperature => "temperature",
            ShiftFamily::LogitNoise => "logit_noise",
            ShiftFamily::ClassConfusion => "class_confusion",
        }
    }

    /// Family parameter at `severity`.
    pub fn strength(self, severity: u8) -> f64 {
        let s = f64::from(severity);
        match self {
            ShiftFamily::Temperature => 1.0 + TEMPERATURE_PER_SEVERITY * s,
            ShiftFamily::LogitNoise => LOGIT_SIGMA_PER_SEVERITY * s,
            ShiftFamily::ClassConfusion => CONFUSION_PER_SEVERITY * s,
        }
    }
}

impl std::str::FromStr for ShiftFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" => Ok(ShiftFamily::Temperature),
            "logit_noise" | "logit-noise" => Ok(ShiftFamily::LogitNoise),
            "class_confusion" | "class-confusion" => Ok(ShiftFamily::ClassConfusion),
            other => Err(Error::InvalidSpec(format!("unknown shift family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub family: ShiftFamily,
    pub severity: u8,
    pub seed: u64,
}

pub fn perturb(pred: &ProbTensor, shift: &ShiftSpec) -> Result<ProbTensor> {
    if shift.severity > MAX_SEVERITY {
        return Err(Error::InvalidSpec(format!(
            "severity {} above {MAX_SEVERITY}",
            shift.severity
        )));
    }
    if shift.severity == 0 {
        return Ok(pred.clone());
    }
    let c = pred.num_classes();
    let strength = shift.family.strength(shift.severity);
    let mut data = pred.as_slice().to_vec();
    match shift.family {
        ShiftFamily::Temperature => {
            for px in data.chunks_exact_mut(c) {
                let logits: Vec<f64> = px.iter().map(|p| p.ln() / strength).collect();
                softmax_into(&logits, px);
            }
        }
        ShiftFamily::LogitNoise => {
            let mut rng = SeededRng::new(shift.seed, STREAM_PERTURB);
            for px in data.chunks_exact_mut(c) {
                let logits: Vec<f64> = px.iter().map(|p| p.ln() + strength * rng.normal()).collect();
                softmax_into(&logits, px);
            }
        }
        ShiftFamily::ClassConfusion => {
            let m = confusion_matrix(c, shift.seed);
            let mut moved = vec![0.0; c];
            for px in data.chunks_exact_mut(c) {
                moved.fill(0.0);
                for (i, &p) in px.iter().enumerate() {
                    for (j, slot) in moved.iter_mut().enumerate() {
                        *slot += p * m[i * c + j];
                    }
                }
                for (p, &q) in px.iter_mut().zip(&moved) {
                    *p = (1.0 - strength) * *p + strength * q;
                }
            }
        }
    }
    ProbTensor::new(pred.shape(), data)
}

/// Row-stochastic `C x C` matrix with zero diagonal and uniform-random
/// off-diagonal weights.
pub fn confusion_matrix(num_classes: usize, seed: u64) -> Vec<f64> {
    let c = num_classes;
    let mut rng = SeededRng::new(seed, STREAM_CONFUSION);
    let mut m = vec![0.0; c * c];
    for i in 0..c {
        let row = &mut m[i * c..(i + 1) * c];
        for (j, v) in row.iter_mut().enumerate() {
            // weights bounded away from zero
            *v = if i == j { 0.0 } else { 0.05 + rng.uniform() };
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    m
}

/// Softmax with `-inf` logits mapping to exactly zero.
fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Recipe for a set of synthetic images with `N` domain experts.
///
/// Expert `e` knows domain `e mod num_domains`; with the default
/// `num_domains = N` the experts are complementary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub num_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_regions: usize,
    pub num_experts: usize,
    pub num_domains: usize,
    #[serde(default)]
    pub domain_weights: Vec<f64>,
    pub alpha_in: f64,
    pub alpha_out: f64,
    pub noise_rate: f64,
    /// Oracle strength of the gate.
    pub beta: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            num_scenes: 20,
            height: 32,
            width: 32,
            num_classes: 5,
            num_regions: 8,
            num_experts: 2,
            num_domains: 2,
            domain_weights: Vec::new(),
            alpha_in: 20.0,
            alpha_out: 2.0,
            noise_rate: 0.1,
            beta: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureImage {
    pub id: String,
    pub scene: Scene,
    pub experts: Vec<ExpertSpec>,
    pub stack: ExpertStack,
    pub gate: GateWeights,
}

impl FixtureSpec {
    pub fn expert_specs(&self, scene_seed: u64) -> Vec<ExpertSpec> {
        (0..self.num_experts)
            .map(|e| ExpertSpec {
                known_domains: vec![e % self.num_domains.max(1)],
                alpha_in: self.alpha_in,
                alpha_out: self.alpha_out,
                noise_rate: self.noise_rate,
                seed: derive_seed(scene_seed, e as u64),
            })
            .collect()
    }

    /// Image `index`; depends only on `(seed, index)` so images can be
    /// generated in any order.
    pub fn image(&self, index: usize) -> Result<FixtureImage> {
        if self.num_experts == 0 {
            return Err(Error::InvalidSpec("fixtures need at least one expert".into()));
        }
        let scene_seed = derive_seed(self.seed, index as u64);
        let scene = synth_scene(&SceneSpec {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            num_regions: self.num_regions,
            num_domains: self.num_domains,
            domain_weights: self.domain_weights.clone(),
            seed: scene_seed,
        })?;
        let experts = self.expert_specs(scene_seed);
        let tensors = experts
            .iter()
            .map(|e| synth_expert(&scene, e))
            .collect::<Result<Vec<_>>>()?;
        let ids = (0..self.num_experts).map(|e| format!("expert{e}")).collect();
        let stack = ExpertStack::new(tensors, ids)?;
        let gate = synth_gate(&scene, &experts, self.beta)?;
        Ok(FixtureImage {
            id: format!("scene{index:04}"),
            scene,
            experts,
            stack,
            gate,
        })
    }

    pub fn generate(&self) -> Result<Vec<FixtureImage>> {
        (0..self.num_scenes).map(|i| self.image(i)).collect()
    }
}

/// Applies `shift` to every expert of a stack, each expert with its own
/// derived seed.
pub fn perturb_stack(stack: &ExpertStack, shift: &ShiftSpec) -> Result<ExpertStack> {
    let experts = stack
        .experts()
        .iter()
        .enumerate()
        .map(|(e, t)| {
            perturb(
                t,
                &ShiftSpec {
                    seed: derive_seed(shift.seed, e as u64),
                    ..*shift
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    ExpertStack::new(experts, stack.ids().to_vec())
}

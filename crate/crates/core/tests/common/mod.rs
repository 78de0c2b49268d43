#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moe_uq::rng::SeededRng;
use moe_uq::{ExpertStack, GateWeights, LabelMap, ProbTensor, Shape};

pub const BIN: &str = env!("CARGO_BIN_EXE_moe-uq");

/// Softmax of Gaussian logits with a random scale, from near uniform to
/// near one-hot.
pub fn random_dist(rng: &mut SeededRng, c: usize) -> Vec<f64> {
    let scale = 12.0 * rng.uniform().powi(2);
    let logits: Vec<f64> = (0..c).map(|_| scale * rng.normal()).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|e| e / sum).collect()
}

pub fn random_tensor(rng: &mut SeededRng, h: usize, w: usize, c: usize) -> ProbTensor {
    let data = (0..h * w).flat_map(|_| random_dist(rng, c)).collect();
    ProbTensor::new(Shape::new(h, w, c), data).unwrap()
}

pub fn random_stack(rng: &mut SeededRng, n: usize, h: usize, w: usize, c: usize) -> ExpertStack {
    ExpertStack::from_experts((0..n).map(|_| random_tensor(rng, h, w, c)).collect()).unwrap()
}

pub fn random_simple_gate(rng: &mut SeededRng, n: usize) -> GateWeights {
    GateWeights::simple(random_dist(rng, n)).unwrap()
}

pub fn random_classwise_gate(rng: &mut SeededRng, n: usize, c: usize) -> GateWeights {
    let columns: Vec<Vec<f64>> = (0..c).map(|_| random_dist(rng, n)).collect();
    let values = (0..n).flat_map(|e| columns.iter().map(move |col| col[e])).collect::<Vec<_>>();
    GateWeights::classwise(n, c, values).unwrap()
}

/// Labels drawn uniformly, each pixel ignored with probability `ignore`.
pub fn random_labels(rng: &mut SeededRng, h: usize, w: usize, c: usize, ignore: f64) -> LabelMap {
    let labels = (0..h * w)
        .map(|_| if rng.uniform() < ignore { 255 } else { rng.below(c) as u32 })
        .collect();
    LabelMap::new(h, w, labels, 255).unwrap()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Writes a synthetic dataset with `synth` and returns the manifest path.
pub fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", path_str(dir)];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "synth failed: {}", String::from_utf8_lossy(&out.stderr));
    dir.join("manifest.json")
}

pub struct OracleCalibration {
    pub ece: f64,
    pub mce: f64,
    pub brier: f64,
    pub nll: f64,
}

/// Per-pixel reference for the calibration scores: bins found by scanning
/// the edges, scores from explicit per-bin pixel lists.
pub fn oracle_calibration(pred: &ProbTensor, conf: &[f64], labels: &LabelMap, num_bins: usize) -> OracleCalibration {
    let mut members: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_bins];
    let (mut brier, mut nll, mut n) = (0.0, 0.0, 0usize);
    for (i, p) in pred.pixels().enumerate() {
        let Some(y) = labels.label(i) else { continue };
        let mut best = 0;
        for c in 1..p.len() {
            if p[c] > p[best] {
                best = c;
            }
        }
        let bin = (0..num_bins)
            .find(|&m| {
                let lo = m as f64 / num_bins as f64;
                let hi = (m + 1) as f64 / num_bins as f64;
                conf[i] >= lo && (conf[i] < hi || m == num_bins - 1)
            })
            .expect("confidence in [0, 1]");
        members[bin].push((conf[i], best == y));
        brier += p.iter().enumerate().map(|(c, &v)| (v - if c == y { 1.0 } else { 0.0 }).powi(2)).sum::<f64>();
        nll -= p[y].max(1e-12).ln();
        n += 1;
    }
    let (mut ece, mut mce) = (0.0f64, 0.0f64);
    for bin in members.iter().filter(|b| !b.is_empty()) {
        let k = bin.len() as f64;
        let acc = bin.iter().filter(|(_, ok)| *ok).count() as f64 / k;
        let mean_conf = bin.iter().map(|(c, _)| c).sum::<f64>() / k;
        let gap = (acc - mean_conf).abs();
        ece += k / n as f64 * gap;
        mce = mce.max(gap);
    }
    OracleCalibration {
        ece,
        mce,
        brier: brier / n as f64,
        nll: nll / n as f64,
    }
}

/// Intersection over union per class from explicit pixel scans.
pub fn oracle_miou(pred: &ProbTensor, labels: &LabelMap) -> f64 {
    let c = pred.num_classes();
    let argmax = pred.argmax();
    let mut ious = Vec::new();
    for k in 0..c {
        let (mut inter, mut union) = (0, 0);
        for (i, &a) in argmax.iter().enumerate() {
            let Some(y) = labels.label(i) else { continue };
            if a == k && y == k {
                inter += 1;
            }
            if a == k || y == k {
                union += 1;
            }
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

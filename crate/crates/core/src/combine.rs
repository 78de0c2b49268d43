//! Gate-weighted fusion of expert outputs into the mixture prediction.

use crate::error::{Error, Result};
use crate::types::{ExpertStack, GateKind, GateWeights, ProbTensor};

/// `out = sum_e w_e * p_e` for a simple gate.
///
/// The result is a convex combination of valid distributions and is not
/// renormalized.
pub fn combine_simple(stack: &ExpertStack, gate: &GateWeights) -> Result<ProbTensor> {
    let weights = match gate {
        GateWeights::Simple(w) => w,
        GateWeights::Classwise { .. } => {
            return Err(Error::GateKindMismatch {
                expected: GateKind::Simple.name(),
                actual: GateKind::Classwise.name(),
            })
        }
    };
    check_arity(stack, gate)?;
    let mut out = vec![0.0; stack.shape().len()];
    for (expert, &w) in stack.experts().iter().zip(weights) {
        for (o, &p) in out.iter_mut().zip(expert.as_slice()) {
            *o += w * p;
        }
    }
    ProbTensor::new(stack.shape(), out)
}

/// Classwise fusion together with the per-pixel mass before renormalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ClasswiseFusion {
    pub output: ProbTensor,
    /// `sum_c q(c)` per pixel, row-major.
    pub mass: Vec<f64>,
}

/// `q(c) = sum_e w_{e,c} * p_e(c)`, renormalized per pixel over classes.
pub fn combine_classwise(stack: &ExpertStack, gate: &GateWeights) -> Result<ProbTensor> {
    combine_classwise_detailed(stack, gate).map(|f| f.output)
}

pub fn combine_classwise_detailed(stack: &ExpertStack, gate: &GateWeights) -> Result<ClasswiseFusion> {
    let (num_classes, values) = match gate {
        GateWeights::Classwise {
            num_classes,
            values,
            ..
        } => (*num_classes, values),
        GateWeights::Simple(_) => {
            return Err(Error::GateKindMismatch {
                expected: GateKind::Classwise.name(),
                actual: GateKind::Simple.name(),
            })
        }
    };
    check_arity(stack, gate)?;
    let shape = stack.shape();
    if num_classes != shape.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "classwise gate has {num_classes} classes but predictions have {}",
            shape.num_classes
        )));
    }

    let c = num_classes;
    let mut out = vec![0.0; shape.len()];
    for (e, expert) in stack.experts().iter().enumerate() {
        let row = &values[e * c..(e + 1) * c];
        for (o_px, p_px) in out.chunks_exact_mut(c).zip(expert.pixels()) {
            for ((o, &p), &w) in o_px.iter_mut().zip(p_px).zip(row) {
                *o += w * p;
            }
        }
    }

    let mut mass = Vec::with_capacity(shape.num_pixels());
    for (idx, px) in out.chunks_exact_mut(c).enumerate() {
        let total: f64 = px.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegeneratePixel {
                row: idx / shape.width,
                col: idx % shape.width,
            });
        }
        px.iter_mut().for_each(|v| *v /= total);
        mass.push(total);
    }

    Ok(ClasswiseFusion {
        output: ProbTensor::new(shape, out)?,
        mass,
    })
}

/// Plain average of the experts: the uniform-gate ensemble.
pub fn combine_uniform(stack: &ExpertStack) -> Result<ProbTensor> {
    combine_simple(stack, &GateWeights::uniform(stack.len())?)
}

/// Mixture output for either gate kind.
pub fn combine(stack: &ExpertStack, gate: &GateWeights) -> Result<ProbTensor> {
    match gate.kind() {
        GateKind::Simple => combine_simple(stack, gate),
        GateKind::Classwise => combine_classwise(stack, gate),
    }
}

fn check_arity(stack: &ExpertStack, gate: &GateWeights) -> Result<()> {
    if gate.num_experts() != stack.len() {
        return Err(Error::GateArity {
            gate: gate.num_experts(),
            stack: stack.len(),
        });
    }
    Ok(())
}

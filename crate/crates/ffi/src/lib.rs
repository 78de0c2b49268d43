//! C ABI over `moe-uq`.
//!
//! Every fallible function returns a [`MoeUqStatus`]. On failure the message
//! is available from [`moe_uq_last_error`] on the same thread. Arrays are
//! row-major: expert stacks are `[N, H, W, C]`, classwise gates `[N, C]`,
//! label maps `[H, W]`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use moe_uq::calibration::calibration;
use moe_uq::combine::combine;
use moe_uq::conditional::miou;
use moe_uq::uncertainty::{gate_entropy, gate_entropy_map, AggregationMode, MoeOutputs, VarianceReduction};
use moe_uq::{Error, ExpertStack, GateWeights, LabelMap, ProbTensor, Shape, Strictness};

/// Outcome classes, numbered like the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoeUqStatus {
    Ok = 0,
    /// Null pointer, wrong buffer length or missing gate.
    Usage = 2,
    Validation = 3,
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoeUqMeasure {
    PredictiveEntropy = 0,
    MutualInformation = 1,
    ExpertVariance = 2,
    GateEntropy = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoeUqMode {
    Stacked = 0,
    Weighted = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MoeUqCalibration {
    pub ece: f64,
    pub mce: f64,
    pub brier: f64,
    pub nll: f64,
    pub n_pixels: u64,
}

/// Opaque expert stack with an optional gate.
pub struct MoeUqStack {
    stack: ExpertStack,
    gate: Option<GateWeights>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(MoeUqStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = if e.exit_code() == 4 { MoeUqStatus::Io } else { MoeUqStatus::Validation };
        Failure(status, format!("{}: {e}", e.kind()))
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure(MoeUqStatus::Usage, msg.into())
}

fn set_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = text);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MoeUqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MoeUqStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("Internal: panic in moe-uq");
            MoeUqStatus::Internal
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(usage(format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, expected: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(usage(format!("{what} is null")));
    }
    if len != expected {
        return Err(usage(format!("{what} holds {len} values, expected {expected}")));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a>(stack: *const MoeUqStack) -> Result<&'a MoeUqStack, Failure> {
    stack.as_ref().ok_or_else(|| usage("stack handle is null"))
}

fn strictness(renormalize: bool) -> Strictness {
    if renormalize {
        Strictness::Renormalize
    } else {
        Strictness::Reject
    }
}

impl MoeUqStack {
    fn gate(&self) -> Result<&GateWeights, Failure> {
        self.gate.as_ref().ok_or_else(|| usage("no gate set on the stack"))
    }

    fn set_gate(&mut self, gate: GateWeights) -> Result<(), Failure> {
        if gate.num_experts() != self.stack.len() {
            return Err(Error::GateArity {
                gate: gate.num_experts(),
                stack: self.stack.len(),
            }
            .into());
        }
        self.gate = Some(gate);
        Ok(())
    }

    fn map_len(&self) -> usize {
        self.stack.shape().num_pixels()
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn moe_uq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, `"Kind: detail"`, or an
/// empty string after a successful call. Valid until the next call.
#[no_mangle]
pub extern "C" fn moe_uq_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Builds a stack from `num_experts * height * width * num_classes` values.
/// With `renormalize` set, pixels that do not sum to one are rescaled
/// instead of rejected.
///
/// # Safety
/// `data` must point to that many readable doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_uq_stack_new(
    data: *const f64,
    num_experts: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    renormalize: bool,
    out: *mut *mut MoeUqStack,
) -> MoeUqStatus {
    guard(|| {
        if out.is_null() {
            return Err(usage("out is null"));
        }
        let shape = Shape::new(height, width, num_classes);
        let total = num_experts
            .checked_mul(shape.len())
            .ok_or_else(|| usage("stack size overflows"))?;
        let data = input(data, total, "data")?;
        let experts = data
            .chunks_exact(shape.len().max(1))
            .take(num_experts)
            .map(|chunk| ProbTensor::checked(shape, chunk.to_vec(), strictness(renormalize)))
            .collect::<Result<Vec<_>, _>>()?;
        let stack = ExpertStack::from_experts(experts)?;
        *out = Box::into_raw(Box::new(MoeUqStack { stack, gate: None }));
        Ok(())
    })
}

/// # Safety
/// `stack` must come from [`moe_uq_stack_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn moe_uq_stack_free(stack: *mut MoeUqStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// One weight per expert, summing to one.
///
/// # Safety
/// `weights` must point to `num_experts` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn moe_uq_stack_set_simple_gate(
    stack: *mut MoeUqStack,
    weights: *const f64,
    num_experts: usize,
) -> MoeUqStatus {
    guard(|| {
        let stack = stack.as_mut().ok_or_else(|| usage("stack handle is null"))?;
        stack.set_gate(GateWeights::simple(input(weights, num_experts, "weights")?.to_vec())?)
    })
}

/// `[num_experts, num_classes]` weights, each class column summing to one.
///
/// # Safety
/// `weights` must point to `num_experts * num_classes` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn moe_uq_stack_set_classwise_gate(
    stack: *mut MoeUqStack,
    weights: *const f64,
    num_experts: usize,
    num_classes: usize,
) -> MoeUqStatus {
    guard(|| {
        let stack = stack.as_mut().ok_or_else(|| usage("stack handle is null"))?;
        let len = num_experts.saturating_mul(num_classes);
        let gate = GateWeights::classwise(num_experts, num_classes, input(weights, len, "weights")?.to_vec())?;
        if num_classes != stack.stack.shape().num_classes {
            return Err(Error::ShapeMismatch(format!(
                "gate has {num_classes} classes, stack has {}",
                stack.stack.shape().num_classes
            ))
            .into());
        }
        stack.set_gate(gate)
    })
}

/// Writes the fused `[H, W, C]` prediction.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn moe_uq_combine(stack: *const MoeUqStack, out: *mut f64, len: usize) -> MoeUqStatus {
    guard(|| {
        let stack = handle(stack)?;
        let fused = combine(&stack.stack, stack.gate()?)?;
        output(out, len, fused.as_slice().len(), "out")?.copy_from_slice(fused.as_slice());
        Ok(())
    })
}

/// Writes an `[H, W]` uncertainty map and, when `normalizer` is non-null, its
/// theoretical maximum. `mode` only affects entropy and mutual information;
/// expert variance uses the class mean.
///
/// # Safety
/// `out` must point to `len` writable doubles; `normalizer` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn moe_uq_uncertainty(
    stack: *const MoeUqStack,
    measure: MoeUqMeasure,
    mode: MoeUqMode,
    out: *mut f64,
    len: usize,
    normalizer: *mut f64,
) -> MoeUqStatus {
    guard(|| {
        let stack = handle(stack)?;
        let gate = stack.gate()?;
        let mode = match mode {
            MoeUqMode::Stacked => AggregationMode::Stacked,
            MoeUqMode::Weighted => AggregationMode::Weighted,
        };
        let shape = stack.stack.shape();
        let map = match measure {
            MoeUqMeasure::GateEntropy => gate_entropy_map(gate, shape.height, shape.width)?,
            other => {
                let outputs = MoeOutputs::new(&stack.stack, gate)?;
                match other {
                    MoeUqMeasure::PredictiveEntropy => outputs.predictive_entropy(mode)?,
                    MoeUqMeasure::MutualInformation => outputs.mutual_information(mode)?,
                    _ => outputs.expert_variance(VarianceReduction::Mean),
                }
            }
        };
        output(out, len, stack.map_len(), "out")?.copy_from_slice(&map.values);
        if let Some(slot) = normalizer.as_mut() {
            *slot = map.normalizer;
        }
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_uq_gate_entropy(stack: *const MoeUqStack, out: *mut f64) -> MoeUqStatus {
    guard(|| {
        let stack = handle(stack)?;
        let value = gate_entropy(stack.gate()?)?;
        *out.as_mut().ok_or_else(|| usage("out is null"))? = value;
        Ok(())
    })
}

unsafe fn prediction_and_labels(
    pred: *const f64,
    labels: *const u32,
    height: usize,
    width: usize,
    num_classes: usize,
    ignore_index: u32,
) -> Result<(ProbTensor, LabelMap), Failure> {
    let shape = Shape::new(height, width, num_classes);
    let pred = ProbTensor::new(shape, input(pred, shape.len(), "pred")?.to_vec())?;
    let labels = LabelMap::new(
        height,
        width,
        input(labels, shape.num_pixels(), "labels")?.to_vec(),
        ignore_index,
    )?;
    labels.validate(num_classes)?;
    Ok((pred, labels))
}

/// ECE, MCE, Brier and NLL of an `[H, W, C]` prediction with per-pixel
/// confidence in `[0, 1]`.
///
/// # Safety
/// `pred`, `confidence` and `labels` must hold `H*W*C`, `H*W` and `H*W`
/// values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_uq_calibration(
    pred: *const f64,
    confidence: *const f64,
    labels: *const u32,
    height: usize,
    width: usize,
    num_classes: usize,
    ignore_index: u32,
    num_bins: usize,
    out: *mut MoeUqCalibration,
) -> MoeUqStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| usage("out is null"))?;
        let (pred, labels) = prediction_and_labels(pred, labels, height, width, num_classes, ignore_index)?;
        let confidence = input(confidence, pred.num_pixels(), "confidence")?;
        let r = calibration(&pred, confidence, &labels, num_bins)?;
        *out = MoeUqCalibration {
            ece: r.ece,
            mce: r.mce,
            brier: r.brier,
            nll: r.nll,
            n_pixels: r.n_pixels,
        };
        Ok(())
    })
}

/// Mean IoU of the argmax of an `[H, W, C]` prediction.
///
/// # Safety
/// `pred` and `labels` must hold `H*W*C` and `H*W` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_uq_miou(
    pred: *const f64,
    labels: *const u32,
    height: usize,
    width: usize,
    num_classes: usize,
    ignore_index: u32,
    out: *mut f64,
) -> MoeUqStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| usage("out is null"))?;
        let (pred, labels) = prediction_and_labels(pred, labels, height, width, num_classes, ignore_index)?;
        *out = miou(&pred, &labels)?.miou;
        Ok(())
    })
}

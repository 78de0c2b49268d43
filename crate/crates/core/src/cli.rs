//! Command-line interface.
//!
//! Every failure ends with one line on stderr of the form
//! `error: kind=<Kind> exit=<code> message=<text>`. Exit codes: 2 usage,
//! 3 validation, 4 I/O.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::calibration::{CalibrationReport, ConfidenceSource, DEFAULT_NUM_BINS, NLL_EPSILON};
use crate::combine::{combine, combine_classwise_detailed};
use crate::conditional::{ConditionalReport, SweepResult, ThresholdGrid, DEFAULT_ACC_THRESHOLD, DEFAULT_PATCH_SIZE};
use crate::error::{Error, Result};
use crate::manifest::{write_fixture, Manifest, ManifestGateKind};
use crate::npy::{self, FloatPrecision};
use crate::render::render_map;
use crate::report::{
    evaluate_manifest, severity_sweep, sweep_csv, ConfigEcho, EvalConfig, GateEntropyBlock, Method, MetricsReport,
    Pooling, SegmentationBlock, DEFAULT_UNC_THRESHOLD,
};
use crate::shift::{FixtureSpec, ShiftFamily, MAX_SEVERITY};
use crate::types::{GateKind, Measure, Strictness};
use crate::uncertainty::{gate_entropy_map, AggregationMode, MoeOutputs, VarianceReduction};

pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "moe-uq", version, about = "Uncertainty estimation and evaluation for mixtures of experts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fixture dataset with a manifest.
    Synth(SynthArgs),
    /// Check every image of a manifest against the input invariants.
    Validate(ManifestArgs),
    /// Write the fused mixture prediction of every image.
    Combine(CombineArgs),
    /// Write per-pixel uncertainty maps.
    Uq(UqArgs),
    /// Calibration scores per uncertainty method (JSON).
    Calib(EvalArgs),
    /// Conditional patch metrics and threshold sweeps (JSON).
    Cond(EvalArgs),
    /// Metrics over shift severities (CSV).
    Sweep(SweepArgs),
    /// mIoU of the mixture, the uniform ensemble and each expert (JSON).
    Miou(EvalArgs),
    /// Full evaluation (JSON).
    Report(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrictnessArg {
    /// Fail on any pixel that does not sum to one.
    Reject,
    /// Renormalize such pixels before checking.
    Renormalize,
}

impl From<StrictnessArg> for Strictness {
    fn from(s: StrictnessArg) -> Self {
        match s {
            StrictnessArg::Reject => Strictness::Reject,
            StrictnessArg::Renormalize => Strictness::Renormalize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for FloatPrecision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => FloatPrecision::F32,
            PrecisionArg::F64 => FloatPrecision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GateArg {
    Simple,
    Classwise,
    Uniform,
}

impl From<GateArg> for ManifestGateKind {
    fn from(g: GateArg) -> Self {
        match g {
            GateArg::Simple => ManifestGateKind::Simple,
            GateArg::Classwise => ManifestGateKind::Classwise,
            GateArg::Uniform => ManifestGateKind::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Stacked,
    Weighted,
}

impl From<ModeArg> for AggregationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Stacked => AggregationMode::Stacked,
            ModeArg::Weighted => AggregationMode::Weighted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReductionArg {
    Mean,
    Sum,
}

impl From<ReductionArg> for VarianceReduction {
    fn from(r: ReductionArg) -> Self {
        match r {
            ReductionArg::Mean => VarianceReduction::Mean,
            ReductionArg::Sum => VarianceReduction::Sum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    /// Sum patch counts over images, then take ratios.
    Pooled,
    /// Average per-image ratios over images where they are defined.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MeasureArg {
    Pe,
    Mi,
    Ev,
    GateEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Temperature,
    LogitNoise,
    ClassConfusion,
}

impl From<FamilyArg> for ShiftFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Temperature => ShiftFamily::Temperature,
            FamilyArg::LogitNoise => ShiftFamily::LogitNoise,
            FamilyArg::ClassConfusion => ShiftFamily::ClassConfusion,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; receives manifest.json and one folder per scene.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub scenes: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Regions per scene.
    #[arg(long, default_value_t = 8)]
    pub regions: usize,
    #[arg(long, default_value_t = 2)]
    pub experts: usize,
    /// Number of domains; defaults to the number of experts.
    #[arg(long)]
    pub domains: Option<usize>,
    /// Comma-separated domain sampling weights.
    #[arg(long, value_delimiter = ',')]
    pub domain_weights: Vec<f64>,
    /// Dirichlet concentration of an expert inside its domain.
    #[arg(long, default_value_t = 20.0)]
    pub alpha_in: f64,
    /// Dirichlet concentration of an expert outside its domain.
    #[arg(long, default_value_t = 2.0)]
    pub alpha_out: f64,
    /// Probability that an in-domain expert targets a wrong class.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Gate sharpness; 0 gives a uniform gate.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = GateArg::Simple)]
    pub gate: GateArg,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Handling of pixels whose probabilities do not sum to one.
    #[arg(long, value_enum, default_value_t = StrictnessArg::Reject)]
    pub strictness: StrictnessArg,
}

#[derive(Debug, Args)]
pub struct CombineArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    /// Output directory; receives `<id>.npy` per image.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
}

#[derive(Debug, Args)]
pub struct UqArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    /// Output directory; receives `<id>_<measure>.npy` per image and measure.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Stacked)]
    pub mode: ModeArg,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MeasureArg::Pe, MeasureArg::Mi, MeasureArg::Ev, MeasureArg::GateEntropy])]
    pub measures: Vec<MeasureArg>,
    #[arg(long, value_enum, default_value_t = ReductionArg::Mean)]
    pub ev_reduction: ReductionArg,
    /// Also write each map as an 8-bit PGM image.
    #[arg(long)]
    pub render: bool,
    /// Directory of fused predictions written by `combine`.
    #[arg(long)]
    pub fused: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Uncertainty methods to evaluate; all that fit the gate kind by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Vec<Method>,
    /// Equal-width confidence bins.
    #[arg(long, default_value_t = DEFAULT_NUM_BINS)]
    pub bins: usize,
    /// Patch edge in pixels.
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    pub patch_size: usize,
    /// A patch is accurate when its accuracy is above this value.
    #[arg(long, default_value_t = DEFAULT_ACC_THRESHOLD)]
    pub acc_threshold: f64,
    /// A patch is uncertain when its mean normalized uncertainty is above this value.
    #[arg(long, default_value_t = DEFAULT_UNC_THRESHOLD)]
    pub unc_threshold: f64,
    /// Sweep thresholds as `start:stop:step` or a comma-separated list.
    #[arg(long, default_value = "0:1:0.05", value_parser = parse_thresholds)]
    pub thresholds: ThresholdGrid,
    #[arg(long, value_enum, default_value_t = ReductionArg::Mean)]
    pub ev_reduction: ReductionArg,
    #[arg(long, value_enum, default_value_t = PoolingArg::Pooled)]
    pub pooling: PoolingArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, value_enum)]
    pub family: FamilyArg,
    /// Severities as `a..b` (inclusive) or a comma-separated list, each in 0..=5.
    #[arg(long, default_value = "0..5", value_parser = parse_severities)]
    pub severities: Severities,
    /// Seed of the perturbation noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Severities(pub Vec<u8>);

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim().parse().map_err(|_| format!("{s:?} is not a number"))
}

pub fn parse_thresholds(s: &str) -> std::result::Result<ThresholdGrid, String> {
    let values = if let [start, stop, step] = s.split(':').collect::<Vec<_>>()[..] {
        let (start, stop, step) = (parse_f64(start)?, parse_f64(stop)?, parse_f64(step)?);
        if step.is_nan() || step <= 0.0 {
            return Err("step must be positive".into());
        }
        let n = ((stop - start) / step + 1e-9).floor();
        if !(0.0..=1e6).contains(&n) {
            return Err(format!("bad range {s:?}"));
        }
        (0..=n as usize)
            .map(|i| (((start + i as f64 * step) * 1e12).round() / 1e12).min(stop))
            .collect()
    } else {
        s.split(',').map(parse_f64).collect::<std::result::Result<Vec<_>, _>>()?
    };
    ThresholdGrid::new(values).map_err(|e| e.to_string())
}

pub fn parse_severities(s: &str) -> std::result::Result<Severities, String> {
    let parse = |v: &str| {
        v.trim()
            .parse::<u8>()
            .ok()
            .filter(|&x| x <= MAX_SEVERITY)
            .ok_or_else(|| format!("{v:?} is not a severity in 0..={MAX_SEVERITY}"))
    };
    let values = match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (parse(a)?, parse(b.trim_start_matches('='))?);
            if a > b {
                return Err(format!("empty severity range {s:?}"));
            }
            (a..=b).collect()
        }
        None => s.split(',').map(parse).collect::<std::result::Result<Vec<_>, _>>()?,
    };
    Ok(Severities(values))
}

impl EvalArgs {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            num_bins: self.bins,
            patch_size: self.patch_size,
            acc_threshold: self.acc_threshold,
            unc_threshold: self.unc_threshold,
            thresholds: self.thresholds.clone(),
            methods: self.methods.clone(),
            ev_reduction: self.ev_reduction.into(),
            pooling: match self.pooling {
                PoolingArg::Pooled => Pooling::Pooled,
                PoolingArg::PerImage => Pooling::PerImageMean,
            },
            strictness: self.input.strictness.into(),
            shift: None,
        }
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    crate::json::to_string(value).map_err(|e| Error::InvalidSpec(format!("serialization: {e}")))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = FixtureSpec {
        num_scenes: args.scenes,
        height: args.height,
        width: args.width,
        num_classes: args.classes,
        num_regions: args.regions,
        num_experts: args.experts,
        num_domains: args.domains.unwrap_or(args.experts),
        domain_weights: args.domain_weights.clone(),
        alpha_in: args.alpha_in,
        alpha_out: args.alpha_out,
        noise_rate: args.noise,
        beta: args.beta,
        seed: args.seed,
    };
    create_dir(&args.out)?;
    let images = spec.generate()?;
    let spec_path = args.out.join("fixture.json");
    std::fs::write(&spec_path, to_json(&spec)?).map_err(|e| Error::io(&spec_path, e))?;
    write_fixture(&images, &args.out, args.gate.into(), args.precision.into())?;
    println!("{}", args.out.join("manifest.json").display());
    Ok(())
}

fn validate(args: &ManifestArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    for index in 0..manifest.images.len() {
        let image = manifest.load_image(index, args.strictness.into())?;
        println!("ok {}", image.id);
    }
    Ok(())
}

#[derive(Serialize)]
struct CombineRecord {
    id: String,
    path: PathBuf,
    /// Smallest pre-normalization mass of a classwise fusion.
    min_mass: Option<f64>,
}

fn combine_cmd(args: &CombineArgs) -> Result<()> {
    let manifest = Manifest::load(&args.input.manifest)?;
    create_dir(&args.out)?;
    let mut records = Vec::new();
    for index in 0..manifest.images.len() {
        let image = manifest.load_image(index, args.input.strictness.into())?;
        let (fused, min_mass) = match image.gate.kind() {
            GateKind::Simple => (combine(&image.stack, &image.gate)?, None),
            GateKind::Classwise => {
                let d = combine_classwise_detailed(&image.stack, &image.gate)?;
                let m = d.mass.iter().copied().fold(f64::INFINITY, f64::min);
                (d.output, Some(m))
            }
        };
        let path = args.out.join(format!("{}.npy", image.id));
        npy::save_prob_tensor(&fused, &path, args.precision.into())?;
        records.push(CombineRecord {
            id: image.id,
            path,
            min_mass,
        });
    }
    let index_path = args.out.join("combine.json");
    std::fs::write(&index_path, to_json(&records)?).map_err(|e| Error::io(&index_path, e))
}

#[derive(Serialize)]
struct UqMapRecord {
    measure: Measure,
    path: PathBuf,
    normalizer: f64,
    mean: f64,
    max: f64,
}

#[derive(Serialize)]
struct UqImageRecord {
    id: String,
    maps: Vec<UqMapRecord>,
}

#[derive(Serialize)]
struct UqSummary {
    mode: AggregationMode,
    ev_reduction: VarianceReduction,
    fused_input: bool,
    images: Vec<UqImageRecord>,
}

fn uq(args: &UqArgs) -> Result<()> {
    let manifest = Manifest::load(&args.input.manifest)?;
    let mode: AggregationMode = args.mode.into();
    if mode == AggregationMode::Weighted && manifest.gate_kind.gate_kind() != GateKind::Simple {
        return Err(Error::WeightedNeedsSimpleGate);
    }
    create_dir(&args.out)?;
    let mut images = Vec::new();
    for index in 0..manifest.images.len() {
        let image = manifest.load_image(index, args.input.strictness.into())?;
        let outputs = match &args.fused {
            Some(dir) => {
                let pred = npy::load_prob_tensor(dir.join(format!("{}.npy", image.id)), args.input.strictness.into())?;
                MoeOutputs::with_prediction(&image.stack, &image.gate, pred)?
            }
            None => MoeOutputs::new(&image.stack, &image.gate)?,
        };
        let shape = image.stack.shape();
        let mut maps = Vec::new();
        for &m in &args.measures {
            let map = match m {
                MeasureArg::Pe => outputs.predictive_entropy(mode)?,
                MeasureArg::Mi => outputs.mutual_information(mode)?,
                MeasureArg::Ev => outputs.expert_variance(args.ev_reduction.into()),
                MeasureArg::GateEntropy => gate_entropy_map(&image.gate, shape.height, shape.width)?,
            };
            let stem = format!("{}_{}", image.id, map.measure.name());
            let path = args.out.join(format!("{stem}.npy"));
            npy::save_uncertainty_map(&map, &path)?;
            if args.render {
                render_map(&map, args.out.join(format!("{stem}.pgm")))?;
            }
            maps.push(UqMapRecord {
                measure: map.measure,
                path,
                normalizer: map.normalizer,
                mean: map.mean(),
                max: map.max(),
            });
        }
        images.push(UqImageRecord { id: image.id, maps });
    }
    let summary = UqSummary {
        mode,
        ev_reduction: args.ev_reduction.into(),
        fused_input: args.fused.is_some(),
        images,
    };
    let path = args.out.join("uq.json");
    std::fs::write(&path, to_json(&summary)?).map_err(|e| Error::io(&path, e))
}

#[derive(Serialize)]
struct CalibMethod<'a> {
    method: Method,
    confidence_source: ConfidenceSource,
    #[serde(flatten)]
    calibration: &'a CalibrationReport,
}

#[derive(Serialize)]
struct CalibOutput<'a> {
    tool: &'a str,
    version: &'a str,
    config: &'a ConfigEcho,
    nll_epsilon: f64,
    methods: Vec<CalibMethod<'a>>,
}

#[derive(Serialize)]
struct CondMethod<'a> {
    method: Method,
    conditional: &'a ConditionalReport,
    sweep: &'a SweepResult,
}

#[derive(Serialize)]
struct CondOutput<'a> {
    tool: &'a str,
    version: &'a str,
    config: &'a ConfigEcho,
    methods: Vec<CondMethod<'a>>,
}

#[derive(Serialize)]
struct MiouOutput<'a> {
    tool: &'a str,
    version: &'a str,
    config: &'a ConfigEcho,
    segmentation: &'a SegmentationBlock,
    gate_entropy: &'a GateEntropyBlock,
}

fn evaluate(args: &EvalArgs) -> Result<MetricsReport> {
    let manifest = Manifest::load(&args.input.manifest)?;
    evaluate_manifest(&manifest, &args.config())
}

fn calib(args: &EvalArgs) -> Result<()> {
    let r = evaluate(args)?;
    let out = CalibOutput {
        tool: &r.tool,
        version: &r.version,
        config: &r.config,
        nll_epsilon: NLL_EPSILON,
        methods: r
            .methods
            .iter()
            .map(|b| CalibMethod {
                method: b.method,
                confidence_source: b.confidence_source,
                calibration: &b.calibration,
            })
            .collect(),
    };
    write_output(args.out.as_deref(), &to_json(&out)?)
}

fn cond(args: &EvalArgs) -> Result<()> {
    let r = evaluate(args)?;
    let out = CondOutput {
        tool: &r.tool,
        version: &r.version,
        config: &r.config,
        methods: r
            .methods
            .iter()
            .map(|b| CondMethod {
                method: b.method,
                conditional: &b.conditional,
                sweep: &b.sweep,
            })
            .collect(),
    };
    write_output(args.out.as_deref(), &to_json(&out)?)
}

fn miou_cmd(args: &EvalArgs) -> Result<()> {
    let r = evaluate(args)?;
    let out = MiouOutput {
        tool: &r.tool,
        version: &r.version,
        config: &r.config,
        segmentation: &r.segmentation,
        gate_entropy: &r.gate_entropy,
    };
    write_output(args.out.as_deref(), &to_json(&out)?)
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let manifest = Manifest::load(&args.eval.input.manifest)?;
    let rows = severity_sweep(
        &manifest,
        &args.eval.config(),
        args.family.into(),
        &args.severities.0,
        args.seed,
    )?;
    write_output(args.eval.out.as_deref(), &sweep_csv(&rows))
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Validate(a) => validate(a),
        Command::Combine(a) => combine_cmd(a),
        Command::Uq(a) => uq(a),
        Command::Calib(a) => calib(a),
        Command::Cond(a) => cond(a),
        Command::Sweep(a) => sweep(a),
        Command::Miou(a) => miou_cmd(a),
        Command::Report(a) => {
            let report = evaluate(a)?;
            write_output(a.out.as_deref(), &report.to_json()?)
        }
    }
}

/// The machine-parsable failure line.
pub fn error_line(kind: &str, code: i32, message: &str) -> String {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error: kind={kind} exit={code} message={message}")
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("Usage", EXIT_USAGE, first));
            return EXIT_USAGE;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", error_line(e.kind(), code, &e.to_string()));
            code
        }
    }
}

//! JSON dataset manifests pointing at per-image NPY files.
//!
//! ```json
//! {
//!   "version": 1,
//!   "num_classes": 5,
//!   "ignore_index": 255,
//!   "gate_kind": "simple",
//!   "expert_ids": ["urban", "highway"],
//!   "images": [
//!     {"id": "scene0000",
//!      "experts": ["scene0000/expert0.npy", "scene0000/expert1.npy"],
//!      "gate": "scene0000/gate.npy",
//!      "labels": "scene0000/labels.npy"}
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. `gate_kind` is
//! `simple`, `classwise` or `uniform`; uniform manifests carry no gate files
//! and evaluate the plain expert average.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy::{self, FloatPrecision};
use crate::shift::FixtureImage;
use crate::types::{validate_stack, ExpertStack, GateKind, GateWeights, LabelMap, Strictness, DEFAULT_IGNORE_INDEX};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestGateKind {
    Simple,
    Classwise,
    Uniform,
}

impl ManifestGateKind {
    pub fn name(self) -> &'static str {
        match self {
            ManifestGateKind::Simple => "simple",
            ManifestGateKind::Classwise => "classwise",
            ManifestGateKind::Uniform => "uniform",
        }
    }

    /// Kind of the stored gate weights; a uniform manifest stores simple ones.
    pub fn gate_kind(self) -> GateKind {
        match self {
            ManifestGateKind::Simple | ManifestGateKind::Uniform => GateKind::Simple,
            ManifestGateKind::Classwise => GateKind::Classwise,
        }
    }

    fn matches(self, kind: GateKind) -> bool {
        matches!(
            (self, kind),
            (ManifestGateKind::Simple | ManifestGateKind::Uniform, GateKind::Simple)
                | (ManifestGateKind::Classwise, GateKind::Classwise)
        )
    }
}

fn default_ignore_index() -> u32 {
    DEFAULT_IGNORE_INDEX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub experts: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub num_classes: usize,
    #[serde(default = "default_ignore_index")]
    pub ignore_index: u32,
    pub gate_kind: ManifestGateKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expert_ids: Vec<String>,
    pub images: Vec<ImageRecord>,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// One image with everything needed for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedImage {
    pub id: String,
    pub stack: ExpertStack,
    pub gate: GateWeights,
    pub labels: Option<LabelMap>,
}

impl Manifest {
    pub fn new(num_classes: usize, gate_kind: ManifestGateKind, expert_ids: Vec<String>, images: Vec<ImageRecord>) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            num_classes,
            ignore_index: DEFAULT_IGNORE_INDEX,
            gate_kind,
            expert_ids,
            images,
            base_dir: PathBuf::new(),
        }
    }

    /// Parses and checks a manifest. Every referenced file must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.check()?;
        for record in &manifest.images {
            let files = record.experts.iter().chain(&record.gate).chain(&record.labels);
            for file in files {
                let resolved = manifest.resolve(file);
                if !resolved.is_file() {
                    return Err(Error::io(resolved, "referenced file does not exist"));
                }
            }
        }
        Ok(manifest)
    }

    fn check(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported version {}", self.version)));
        }
        if self.num_classes < 2 {
            return Err(Error::Manifest("num_classes must be at least 2".into()));
        }
        let first = self.images.first().ok_or_else(|| Error::Manifest("no images".into()))?;
        let n = first.experts.len();
        if n == 0 {
            return Err(Error::Manifest(format!("image {:?} lists no experts", first.id)));
        }
        if !self.expert_ids.is_empty() && self.expert_ids.len() != n {
            return Err(Error::Manifest(format!("{} expert ids for {n} experts", self.expert_ids.len())));
        }
        for (i, record) in self.images.iter().enumerate() {
            if record.experts.len() != n {
                return Err(Error::Manifest(format!(
                    "image {:?} lists {} experts, expected {n}",
                    record.id,
                    record.experts.len()
                )));
            }
            match (self.gate_kind, &record.gate) {
                (ManifestGateKind::Uniform, _) | (_, Some(_)) => {}
                (_, None) => return Err(Error::Manifest(format!("image {:?} has no gate file", record.id))),
            }
            if self.images[..i].iter().any(|r| r.id == record.id) {
                return Err(Error::Manifest(format!("duplicate image id {:?}", record.id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn num_experts(&self) -> usize {
        self.images.first().map_or(0, |r| r.experts.len())
    }

    pub fn expert_ids(&self) -> Vec<String> {
        if self.expert_ids.is_empty() {
            (0..self.num_experts()).map(|e| format!("expert{e}")).collect()
        } else {
            self.expert_ids.clone()
        }
    }

    /// Loads image `index` and validates experts, gate and labels together.
    pub fn load_image(&self, index: usize, strictness: Strictness) -> Result<LoadedImage> {
        let record = &self.images[index];
        let experts = record
            .experts
            .iter()
            .map(|p| npy::load_prob_tensor(self.resolve(p), strictness))
            .collect::<Result<Vec<_>>>()?;
        let gate = match (&record.gate, self.gate_kind) {
            (Some(p), ManifestGateKind::Simple | ManifestGateKind::Classwise) => npy::load_gate(self.resolve(p))?,
            _ => GateWeights::uniform(experts.len())?,
        };
        if !self.gate_kind.matches(gate.kind()) {
            return Err(Error::GateKindMismatch {
                expected: self.gate_kind.name(),
                actual: gate.kind().name(),
            });
        }
        let labels = record
            .labels
            .as_ref()
            .map(|p| npy::load_labels(self.resolve(p), self.ignore_index))
            .transpose()?;

        validate_stack(&experts, &gate, labels.as_ref()).into_result()?;
        if experts[0].num_classes() != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} has {} classes, manifest declares {}",
                record.id,
                experts[0].num_classes(),
                self.num_classes
            )));
        }
        let stack = ExpertStack::new(experts, self.expert_ids())?;
        Ok(LoadedImage {
            id: record.id.clone(),
            stack,
            gate,
            labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::io(path, e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Writes fixture images as NPY files plus `manifest.json` (written last)
/// into `dir`.
pub fn write_fixture(
    images: &[FixtureImage],
    dir: impl AsRef<Path>,
    gate_kind: ManifestGateKind,
    precision: FloatPrecision,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    let first = images.first().ok_or_else(|| Error::InvalidSpec("no fixture images".into()))?;
    let num_classes = first.scene.num_classes;
    let mut records = Vec::with_capacity(images.len());
    for img in images {
        let img_dir = dir.join(&img.id);
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut experts = Vec::new();
        for (e, tensor) in img.stack.experts().iter().enumerate() {
            let rel = PathBuf::from(&img.id).join(format!("expert{e}.npy"));
            npy::save_prob_tensor(tensor, dir.join(&rel), precision)?;
            experts.push(rel);
        }
        let gate = match gate_kind {
            ManifestGateKind::Uniform => None,
            ManifestGateKind::Simple | ManifestGateKind::Classwise => {
                let rel = PathBuf::from(&img.id).join("gate.npy");
                let gate = match gate_kind {
                    ManifestGateKind::Classwise => {
                        let simple = img.gate.as_simple().ok_or(Error::GateKindMismatch {
                            expected: "simple",
                            actual: "classwise",
                        })?;
                        GateWeights::broadcast(simple, num_classes)?
                    }
                    _ => img.gate.clone(),
                };
                npy::save_gate(&gate, dir.join(&rel))?;
                Some(rel)
            }
        };
        let labels = PathBuf::from(&img.id).join("labels.npy");
        npy::save_labels(&img.scene.labels, dir.join(&labels))?;
        records.push(ImageRecord {
            id: img.id.clone(),
            experts,
            gate,
            labels: Some(labels),
        });
    }
    let mut manifest = Manifest::new(num_classes, gate_kind, first.stack.ids().to_vec(), records);
    manifest.base_dir = dir.to_path_buf();
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

//! Declarative run configuration.
//!
//! Sections: `model`, `projector`, `loss`, `augment`, `descriptors` (array of
//! tables), `data`, `train`, `eval`. Every key has a default and unknown keys
//! are rejected. Overrides given as `section.key=value` are applied to the
//! parsed file and the result is validated again, so an override wins over the
//! file and the file wins over the defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentParams;
use crate::data::SyntheticSpec;
use crate::descriptors::DescriptorSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{EncoderConfig, ProjectorConfig};
use crate::real::DType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Stl10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Stl10Paths {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Optional unlabeled split used for pretraining instead of the train split.
    pub unlabeled_images: String,
    /// Cap on images read per file; 0 reads everything.
    pub limit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training resolution; images are resized to `size×size` at load.
    pub image_size: usize,
    pub drop_last: bool,
    pub synthetic: SyntheticSpec,
    pub stl10: Stl10Paths,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            image_size: 32,
            drop_last: true,
            synthetic: SyntheticSpec::default(),
            stl10: Stl10Paths::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Ssl,
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Matrix file whose row `i` is the teacher embedding of training sample `i`.
    pub path: String,
    /// Keep the hand-crafted descriptors next to the teacher target.
    pub mix_descriptors: bool,
    pub weight: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            path: String::new(),
            mix_descriptors: false,
            weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub dtype: DType,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Serial data preparation and zeroed wall-clock fields in the metrics.
    pub deterministic: bool,
    /// Depth of the background batch-preparation queue (0: prepare inline).
    pub prefetch: usize,
    pub teacher: TeacherConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Ssl,
            epochs: 30,
            batch_size: 64,
            accumulation: 4,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            dtype: DType::F32,
            checkpoint_every: 0,
            deterministic: false,
            prefetch: 2,
            teacher: TeacherConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbeFeatures {
    #[default]
    Encoder,
    Projector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Standardize probe features with training-split statistics.
    pub standardize: bool,
    pub features: ProbeFeatures,
    /// Pretraining epochs per ablation cell.
    pub ablation_epochs: usize,
    /// Ablation grids to run: any of `loss`, `descriptors`, `projector`, `augment`.
    pub grids: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            epochs: 20,
            lr: 1e-4,
            batch_size: 64,
            standardize: true,
            features: ProbeFeatures::Encoder,
            ablation_epochs: 30,
            grids: vec!["loss".into(), "descriptors".into(), "projector".into(), "augment".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: EncoderConfig,
    pub projector: ProjectorConfig,
    pub loss: LossWeights,
    pub augment: AugmentParams,
    pub descriptors: Vec<DescriptorSpec>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: EncoderConfig::default(),
            projector: ProjectorConfig::default(),
            loss: LossWeights::default(),
            augment: AugmentParams::default(),
            descriptors: DescriptorSpec::default_bank(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const GRIDS: [&str; 4] = ["loss", "descriptors", "projector", "augment"];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical serialization; the digest is computed over this text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Applies `path=value` overrides (dotted keys, array elements by index,
    /// e.g. `descriptors.1.weight=0.5`) and validates the result.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut root, key.trim(), parse_value(raw.trim()))?;
        }
        let c: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.loss.validate()?;
        self.augment.validate()?;
        self.data.synthetic.validate()?;
        for d in &self.descriptors {
            d.validate()?;
        }
        let t = &self.train;
        if t.epochs < 1 || t.batch_size < 2 || t.accumulation < 1 {
            return bad(format!(
                "train needs epochs >= 1, batch_size >= 2, accumulation >= 1 (got {}, {}, {})",
                t.epochs, t.batch_size, t.accumulation
            ));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr = {} must be positive", t.lr));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) {
            return bad("train.beta1/beta2 must be in [0, 1) and adam_eps > 0".into());
        }
        if t.seed > i64::MAX as u64 {
            return bad(format!("train.seed = {} exceeds {}", t.seed, i64::MAX));
        }
        if !(t.teacher.weight >= 0.0) {
            return bad("train.teacher.weight must be >= 0".into());
        }
        let e = &self.eval;
        if e.epochs < 1 || e.batch_size < 1 || !(e.lr > 0.0) || e.ablation_epochs < 1 {
            return bad("eval needs epochs >= 1, batch_size >= 1, lr > 0, ablation_epochs >= 1".into());
        }
        if let Some(g) = e.grids.iter().find(|g| !GRIDS.contains(&g.as_str())) {
            return bad(format!("unknown ablation grid `{g}`; expected one of {GRIDS:?}"));
        }
        let size = self.data.image_size;
        if size < 4 {
            return bad(format!("data.image_size = {size} is too small"));
        }
        let out = if self.augment.out_size == 0 { size } else { self.augment.out_size };
        if out != size {
            return bad(format!(
                "augment.out_size = {out} must be 0 or equal data.image_size = {size} (both views share the encoder)"
            ));
        }
        for d in &self.descriptors {
            if let DescriptorSpec::Scattering { j, .. } = d {
                let step = 1usize << j;
                if size % step != 0 {
                    return bad(format!("data.image_size = {size} is not divisible by 2^J = {step} for scattering"));
                }
            }
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown configuration key `{key}`"));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    if !t.contains_key(*part) && !optional_key(&parts) {
                        return Err(unknown());
                    }
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.get_mut(*part).ok_or_else(unknown)?
            }
            toml::Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| unknown())?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("`{key}`: index {idx} out of range ({len} entries)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(unknown()),
        };
    }
    Err(unknown())
}

/// Keys that are omitted from the serialized form when unset or defaulted
/// per-variant; they may still be overridden.
fn optional_key(parts: &[&str]) -> bool {
    matches!(parts, ["data", "synthetic", "seed"]) || parts.first() == Some(&"descriptors")
}

//! Experiment configuration: strict TOML with dotted sections, or a
//! previously written `run.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::bench::Protocol;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, TaskLevel, TuningMode};
use crate::prompts::{PromptConfig, TextEncoderConfig, VrmConfig};
use crate::synthetic::SynthSpec;
use crate::trainer::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ModeName {
    #[serde(rename = "LP", alias = "lp")]
    LinearProbe,
    #[serde(rename = "FT", alias = "ft")]
    FullFinetune,
    #[default]
    #[serde(rename = "pathotune", alias = "PathoTune")]
    PathoTune,
}

impl std::str::FromStr for ModeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LP" | "lp" => Ok(ModeName::LinearProbe),
            "FT" | "ft" => Ok(ModeName::FullFinetune),
            "pathotune" | "PathoTune" => Ok(ModeName::PathoTune),
            other => Err(Error::Config(format!("unknown mode `{other}`; expected LP, FT or pathotune"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Root seed for every random stream of a run.
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub mode: ModeName,
    /// Prompt switches; only read when `mode = "pathotune"`.
    pub tvp: bool,
    pub ttp: bool,
    pub ivp: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            optimizer: t.optimizer,
            mode: ModeName::PathoTune,
            tvp: true,
            ttp: true,
            ivp: true,
        }
    }
}

impl TrainSection {
    pub fn tuning_mode(&self) -> TuningMode {
        match self.mode {
            ModeName::LinearProbe => TuningMode::LinearProbe,
            ModeName::FullFinetune => TuningMode::FullFinetune,
            ModeName::PathoTune => TuningMode::PathoTune {
                tvp: self.tvp,
                ttp: self.ttp,
                ivp: self.ivp,
            },
        }
    }

    pub fn set_mode(&mut self, mode: TuningMode) {
        match mode {
            TuningMode::LinearProbe => self.mode = ModeName::LinearProbe,
            TuningMode::FullFinetune => self.mode = ModeName::FullFinetune,
            TuningMode::PathoTune { tvp, ttp, ivp } => {
                self.mode = ModeName::PathoTune;
                self.tvp = tvp;
                self.ttp = ttp;
                self.ivp = ivp;
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            optimizer: self.optimizer,
            mode: self.tuning_mode(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory with `manifest.csv`; takes precedence over `synth`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    pub level: TaskLevel,
    /// Inclusive patch-count range of generated slide bags.
    pub bag_size_range: [usize; 2],
    pub num_bags: usize,
    pub split: [usize; 3],
    pub protocol: Protocol,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            synth: None,
            level: TaskLevel::Patch,
            bag_size_range: [4, 12],
            num_bags: 40,
            split: [7, 2, 1],
            protocol: Protocol::Holdout,
        }
    }
}

impl DataSection {
    /// Generator settings used when no `path` is given.
    pub fn synth_spec(&self) -> SynthSpec {
        self.synth.clone().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WsiSection {
    pub max_patches_per_bag: usize,
    pub attention_dim: usize,
}

impl Default for WsiSection {
    fn default() -> Self {
        let s = ModelSpec::default();
        Self {
            max_patches_per_bag: s.max_patches_per_bag,
            attention_dim: s.wsi_attention_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Runs per ablation cell; seeds are `train.seed + i`.
    pub repeats: usize,
    pub include_ft: bool,
    pub sweep_n: Vec<usize>,
    pub sweep_t: Vec<usize>,
    pub sweep_m: Vec<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            repeats: 3,
            include_ft: false,
            sweep_n: vec![0, 5, 10],
            sweep_t: vec![2],
            sweep_m: vec![0, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Checkpoint read by `evaluate`; defaults to `<dir>/checkpoint.json`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub prompts: PromptConfig,
    pub text: TextEncoderConfig,
    pub vrm: VrmConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub wsi: WsiSection,
    pub bench: BenchSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            model: self.model.clone(),
            prompts: self.prompts.clone(),
            text: self.text.clone(),
            vrm: self.vrm.clone(),
            level: self.data.level,
            wsi_attention_dim: self.wsi.attention_dim,
            max_patches_per_bag: self.wsi.max_patches_per_bag,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.train_config()
    }

    pub fn bench_seeds(&self) -> Vec<u64> {
        (0..self.bench.repeats as u64).map(|i| self.train.seed.wrapping_add(i)).collect()
    }

    /// Checks value ranges and cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        if self.data.path.is_none() {
            let synth = self.data.synth_spec();
            synth.validate()?;
            if synth.num_classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "data.synth.num_classes = {} but model.num_classes = {}",
                    synth.num_classes, self.model.num_classes
                )));
            }
            if synth.image_size != self.model.image_size {
                return Err(Error::Config(format!(
                    "data.synth.image_size = {} but model.image_size = {}",
                    synth.image_size, self.model.image_size
                )));
            }
        } else if self.data.synth.is_some() {
            return Err(Error::Config("data.path and data.synth are mutually exclusive".into()));
        }
        let [lo, hi] = self.data.bag_size_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("data.bag_size_range [{lo}, {hi}] is not a valid range")));
        }
        if let Protocol::KFold { k } = self.data.protocol {
            if k < 2 {
                return Err(Error::Config(format!("data.protocol k must be at least 2, got {k}")));
            }
        }
        if self.bench.repeats == 0 {
            return Err(Error::Config("bench.repeats must be at least 1".into()));
        }
        Ok(())
    }

    /// Errors with the dataset path when it is set but absent.
    pub fn validate_paths(&self) -> Result<()> {
        if let Some(p) = &self.data.path {
            let manifest = p.join("manifest.csv");
            if !manifest.is_file() {
                return Err(Error::MissingDataset(manifest.display().to_string()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Every key the schema accepts, as a TOML tree with all optional fields present.
fn schema() -> toml::Table {
    let mut full = ExperimentConfig::default();
    full.data.path = Some(PathBuf::from("."));
    full.data.synth = Some(SynthSpec::default());
    full.data.protocol = Protocol::KFold { k: 2 };
    full.output.checkpoint = Some(PathBuf::from("."));
    toml::Table::try_from(&full).expect("default config serializes")
}

fn find_unknown(value: &toml::Table, schema: &toml::Table, prefix: &str) -> Option<String> {
    for (key, v) in value {
        let dotted = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match schema.get(key) {
            None => return Some(dotted),
            Some(toml::Value::Table(inner)) => {
                if let toml::Value::Table(vt) = v {
                    if let Some(bad) = find_unknown(vt, inner, &dotted) {
                        return Some(bad);
                    }
                }
            }
            Some(_) => {}
        }
    }
    None
}

/// Parses TOML text. `base` resolves a relative `data.path`.
pub fn parse_config_str(text: &str, base: Option<&Path>) -> Result<ExperimentConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    if let Some(bad) = find_unknown(&table, &schema(), "") {
        return Err(Error::UnknownKey(bad));
    }
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e: toml::de::Error| {
        let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
        match line {
            Some(l) => Error::Config(format!("line {l}: {}", e.message())),
            None => Error::Config(e.message().to_string()),
        }
    })?;
    if let (Some(base), Some(p)) = (base, cfg.data.path.as_mut()) {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// What `run.json` stores besides the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub code_hash: String,
    pub version: String,
}

/// Reads a TOML config, or the configuration embedded in a `run.json`.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let record: RunRecord = serde_json::from_str(&text)?;
        record.config.validate()?;
        return Ok(record.config);
    }
    parse_config_str(&text, path.parent())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = parse_config_str("[data]\npath = \"/tmp/set\"\n", None).unwrap();
        assert_eq!(cfg.data.path.as_deref(), Some(Path::new("/tmp/set")));
        assert_eq!((cfg.prompts.tvp_tokens, cfg.prompts.ttp_tokens, cfg.prompts.ivp_tokens), (10, 2, 2));
        assert_eq!(cfg.train.learning_rate, 0.0002);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Radam);
        assert_eq!(cfg.train.tuning_mode(), TuningMode::ALL_PROMPTS);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config_str("[train]\nbatchsize = 8\n", None).unwrap_err();
        assert!(matches!(err, Error::UnknownKey(ref k) if k == "train.batchsize"), "{err}");
        assert!(err.to_string().contains("unknown key `train.batchsize`"));
        let err = parse_config_str("[data.synth]\nsigma = 0.1\n", None).unwrap_err();
        assert!(matches!(err, Error::UnknownKey(ref k) if k == "data.synth.sigma"));
        let err = parse_config_str("verbose = true\n", None).unwrap_err();
        assert!(matches!(err, Error::UnknownKey(ref k) if k == "verbose"));
    }

    #[test]
    fn type_mismatch_states_expected_type() {
        let err = parse_config_str("[train]\nbatch_size = \"big\"\n", None).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("expected usize") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn round_trip_is_idempotent() {
        let text = "[train]\nmode = \"pathotune\"\nivp = false\nepochs = 3\n[data]\nlevel = \"wsi\"\nprotocol = { kind = \"k_fold\", k = 4 }\n[data.synth]\ninstance_gap_strength = 0.3\n";
        let first = parse_config_str(text, None).unwrap();
        let again = parse_config_str(&first.to_toml().unwrap(), None).unwrap();
        assert_eq!(first, again);
        assert_eq!(first.data.protocol, Protocol::KFold { k: 4 });
        assert_eq!(first.to_toml().unwrap(), again.to_toml().unwrap());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let cfg = parse_config_str("[data]\npath = \"set\"\n", Some(Path::new("/work/exp"))).unwrap();
        assert_eq!(cfg.data.path.unwrap(), Path::new("/work/exp/set"));
    }

    #[test]
    fn cross_section_checks() {
        assert!(parse_config_str("[model]\nnum_classes = 3\n", None).is_err());
        assert!(parse_config_str("[train]\nlearning_rate = 0.0\n", None).is_err());
        assert!(parse_config_str("[train]\nmode = \"XX\"\n", None).is_err());
        let missing = ExperimentConfig {
            data: DataSection {
                path: Some("/nonexistent/set".into()),
                ..Default::default()
            },
            ..Default::default()
        };
        let err = missing.validate_paths().unwrap_err();
        assert!(err.to_string().contains("/nonexistent/set"));
    }
}

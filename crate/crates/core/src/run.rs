//! Config-driven training and evaluation runs.
//!
//! A run writes three artifacts into `output_dir`: `checkpoint.cfst`
//! (parameters plus the model config under [`CONFIG_ENTRY`]),
//! `train_log.jsonl` (one object per epoch) and `report.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::format::{tensor_to_text, text_to_tensor};
use crate::data::{load_dataset, read_tensor_file, synth_generate, write_tensor_file, MultiModalSample, SynthConfig, TensorMap};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::model::{CfsumModel, ModelConfig};
use crate::training::{train, EpochRecord, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.cfst";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
/// Checkpoint entry holding the model config as UTF-8 bytes.
pub const CONFIG_ENTRY: &str = "__config__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
    /// Generate the data in memory instead of reading manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Clips with label `>= threshold` count as positives.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

/// Strict JSON parsing whose errors name the offending key path, e.g.
/// `model.d_modle: unknown field ...`.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })
}

impl RunConfig {
    /// Parses, then validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_config(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !self.eval.threshold.is_finite() {
            return Err(Error::Config("eval.threshold must be finite".into()));
        }
        let d = &self.data;
        if d.synth.is_some() && (d.train_manifest.is_some() || d.val_manifest.is_some()) {
            return Err(Error::Config("data: give either `synth` or manifests, not both".into()));
        }
        match (&d.synth, &d.train_manifest) {
            (None, None) => Err(Error::Config("data: need `train_manifest` or `synth`".into())),
            (Some(s), None) => {
                s.validate()?;
                let dims = (s.d_video, s.d_audio, s.d_text);
                let model = (self.model.d_video, self.model.d_audio, self.model.d_text);
                if dims != model {
                    return Err(Error::Config(format!(
                        "data.synth dims {dims:?} differ from model input dims {model:?}"
                    )));
                }
                Ok(())
            }
            (_, Some(_)) => Ok(()),
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    /// `output_dir` is left out, so the same run in another directory logs
    /// the same hash.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Train and (optional) validation samples.
pub fn load_data(data: &DataConfig) -> Result<(Vec<MultiModalSample>, Option<Vec<MultiModalSample>>)> {
    if let Some(s) = &data.synth {
        let ds = synth_generate(s)?;
        let val = (!ds.val.is_empty()).then_some(ds.val);
        return Ok((ds.train, val));
    }
    let train_path = data
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data: need `train_manifest` or `synth`".into()))?;
    let train = load_dataset(train_path)?;
    let val = data.val_manifest.as_ref().map(load_dataset).transpose()?;
    Ok((train, val))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &CfsumModel) -> Result<()> {
    let mut map = TensorMap::new();
    for (name, t) in model.params().iter() {
        map.insert(name.to_owned(), t.clone());
    }
    let config = serde_json::to_string(model.config()).expect("config serializes");
    map.insert(CONFIG_ENTRY.into(), text_to_tensor(&config)?);
    write_tensor_file(path, &map)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CfsumModel> {
    let path = path.as_ref();
    let mut map = read_tensor_file(path)?;
    let config = map
        .remove(CONFIG_ENTRY)
        .ok_or_else(|| Error::Data(format!("{}: no `{CONFIG_ENTRY}` entry", path.display())))?;
    let text = tensor_to_text(&config)?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: format!("{}: {CONFIG_ENTRY}", path.display()),
        source,
    })?;
    CfsumModel::from_params(config, map)
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    record: &'a EpochRecord,
    seed: u64,
    config_hash: &'a str,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CfsumModel,
    pub history: Vec<EpochRecord>,
    pub report: Option<MetricsReport>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains, writes checkpoint and log, and evaluates on the validation set
/// when there is one.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, val_set) = load_data(&cfg.data)?;
    ensure_dir(&cfg.output_dir)?;
    let hash = cfg.config_hash();

    let mut model = CfsumModel::init(cfg.model.clone())?;
    let mut log = String::new();
    let history = train(
        &mut model,
        &train_set,
        val_set.as_deref().map(|v| (v, cfg.eval.threshold)),
        &cfg.train,
        |record| {
            let line = LogLine {
                record,
                seed: cfg.train.seed,
                config_hash: &hash,
            };
            log.push_str(&serde_json::to_string(&line).expect("log line serializes"));
            log.push('\n');
        },
    )?;
    write_file(&cfg.output_dir.join(LOG_FILE), &log)?;
    save_checkpoint(cfg.output_dir.join(CHECKPOINT_FILE), &model)?;

    let report = match &val_set {
        Some(v) => {
            let report = evaluate(&model, v, cfg.eval.threshold)?;
            write_file(&cfg.output_dir.join(REPORT_FILE), report.to_json())?;
            Some(report)
        }
        None => None,
    };
    Ok(TrainOutcome { model, history, report })
}

/// Evaluates a checkpoint on the validation set (the training set when no
/// validation data is configured) and writes `report.json`.
pub fn run_eval(cfg: &RunConfig, checkpoint: impl AsRef<Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    let model = load_checkpoint(checkpoint)?;
    let (train_set, val_set) = load_data(&cfg.data)?;
    let data = val_set.unwrap_or(train_set);
    let report = evaluate(&model, &data, cfg.eval.threshold)?;
    ensure_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join(REPORT_FILE), report.to_json())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra: &str) -> String {
        format!(r#"{{"data": {{"synth": {{"n_train": 4, "n_val": 2}}}}, "output_dir": "out"{extra}}}"#)
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_json(&minimal("")).unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.eval.threshold, 0.5);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let err = RunConfig::from_json(&minimal(r#", "model": {"d_modle": 8}"#)).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.starts_with("model.d_modle"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let err = RunConfig::from_json(r#"{"data": {"synth": {"sigma": 1}}, "output_dir": "o"}"#).unwrap_err();
        assert!(matches!(err, Error::Config(msg) if msg.starts_with("data.synth.sigma")));
    }

    #[test]
    fn data_sources_are_exclusive() {
        let both = r#"{"data": {"synth": {}, "train_manifest": "t.jsonl"}, "output_dir": "o"}"#;
        assert!(matches!(RunConfig::from_json(both), Err(Error::Config(_))));
        let none = r#"{"data": {}, "output_dir": "o"}"#;
        assert!(matches!(RunConfig::from_json(none), Err(Error::Config(_))));
        let dims = r#"{"data": {"synth": {"d_video": 8}}, "output_dir": "o"}"#;
        assert!(matches!(RunConfig::from_json(dims), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_json(&minimal("")).unwrap();
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 16);
        let mut c = a.clone();
        c.output_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = CfsumModel::init(crate::gradcheck::small_config(3)).unwrap();
        let path = dir.path().join("c.cfst");
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert!(back.params().bit_eq(model.params()));
    }
}

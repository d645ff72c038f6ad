//! Experiment configuration: a JSON file with a fixed schema, plus
//! dotted-key command-line overrides (`train.epochs=5`). Unknown keys are
//! rejected at both levels and configs round-trip losslessly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, StageSpec, Variant};
use crate::snr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Dg,
    Uda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub stages: Vec<StageSpec>,
    pub snr_after_stage: Vec<bool>,
    pub reduction: usize,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = ModelSpec::default_toy(Variant::Snr, 4);
        ModelConfig {
            variant: spec.variant,
            num_classes: spec.num_classes,
            stages: spec.stages,
            snr_after_stage: spec.snr_after_stage,
            reduction: spec.reduction,
            eps: spec.eps,
        }
    }
}

impl ModelConfig {
    pub fn to_spec(&self, variant: Variant) -> ModelSpec {
        // normalization flags follow the variant: baseline runs bare, and
        // in_only drops a final-stage flag because bare IN directly before
        // the global pool collapses the pooled features to beta
        let snr_after_stage = match variant {
            Variant::Baseline => vec![false; self.stages.len()],
            Variant::InOnly => {
                let mut flags = self.snr_after_stage.clone();
                if let Some(last) = flags.last_mut() {
                    *last = false;
                }
                flags
            }
            _ => self.snr_after_stage.clone(),
        };
        ModelSpec {
            stages: self.stages.clone(),
            snr_after_stage,
            variant,
            num_classes: self.num_classes,
            reduction: self.reduction,
            eps: self.eps,
            input_channels: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub lambda: f64,
    /// Cap on training images used per source domain (None = all).
    pub train_per_domain: Option<usize>,
    /// Cap on evaluation images per domain (None = all).
    pub eval_per_domain: Option<usize>,
    pub precision: Precision,
    /// Save a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Unlabeled target images consumed per step in UDA mode.
    pub target_batch: Option<usize>,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 14,
            batch_size: 48,
            lr0: 0.05,
            momentum: 0.9,
            lambda: 1.0,
            train_per_domain: Some(768),
            eval_per_domain: None,
            precision: Precision::F32,
            checkpoint_every: 0,
            target_batch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub dataset_root: PathBuf,
    /// Participating domains; leave-one-domain-out iterates over these.
    pub domains: Vec<String>,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            protocol: Protocol::Dg,
            dataset_root: PathBuf::from("data"),
            domains: crate::data::preset_domains().into_iter().map(|(n, _)| n).collect(),
            model: ModelConfig::default(),
            train: TrainParams::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Config("need at least 2 domains".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.train.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.train.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.train.momentum
            )));
        }
        self.model.to_spec(self.model.variant).validate().map_err(|e| match e {
            Error::Construction(m) => Error::Config(m),
            other => other,
        })?;
        Ok(())
    }
}

/// Parse `key.path=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(Error::Config(format!(
            "override {s:?} is not of the form key.path=value"
        ))),
    }
}

/// Apply one dotted-key override onto a JSON tree. Every path segment must
/// already exist, which rejects unknown keys with the offending name.
fn apply_override(tree: &mut serde_json::Value, key: &str, value: &str) -> Result<()> {
    let mut cursor = &mut *tree;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override key {key:?}: {:?} is not an object",
                segments[..i].join(".")
            ))
        })?;
        cursor = obj.get_mut(*seg).ok_or_else(|| {
            Error::Config(format!("unknown config key {:?}", segments[..=i].join(".")))
        })?;
    }
    // numbers, booleans, arrays, objects parse as JSON; anything else is a string
    *cursor = serde_json::from_str(value).unwrap_or(serde_json::Value::String(value.to_string()));
    Ok(())
}

/// Load a config file and apply overrides with CLI > file > default
/// precedence.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let parsed: serde_json::Value = serde_json::from_str(&raw).map_err(|e| {
                Error::Config(format!("{}: invalid JSON: {e}", p.display()))
            })?;
            // deserialize once to reject unknown keys / type errors early
            let cfg: RunConfig = serde_json::from_value(parsed).map_err(|e| {
                Error::Config(format!("{}: {e}", p.display()))
            })?;
            cfg
        }
        None => RunConfig::default(),
    };
    let mut tree = serde_json::to_value(&base)
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    for ov in overrides {
        let (k, v) = parse_override(ov)?;
        apply_override(&mut tree, &k, &v)?;
        // re-check after each override so a type error names its key
        if let Err(e) = serde_json::from_value::<RunConfig>(tree.clone()) {
            return Err(Error::Config(format!("override {k:?}: {e}")));
        }
    }
    let cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Overhead bookkeeping used by reports: parameter count added by the
/// normalization modules of this config's variant.
pub fn snr_overhead(spec: &ModelSpec) -> usize {
    let mut cin = spec.input_channels;
    let mut total = 0;
    for (st, &enabled) in spec.stages.iter().zip(&spec.snr_after_stage) {
        let c = st.out_channels;
        if enabled {
            total += match spec.variant {
                Variant::InOnly => 2 * c,
                Variant::Snr | Variant::SnrNoDualLoss => {
                    snr::param_count(c, spec.reduction, spec.num_classes)
                }
                Variant::Baseline => 0,
            };
        }
        cin = c;
    }
    let _ = cin;
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"train": {"epochs": 3, "eppochs": 4}}"#).unwrap();
        let err = load_config(Some(&p), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("eppochs"), "{msg}");
    }

    #[test]
    fn override_precedence_cli_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"train": {"epochs": 3}}"#).unwrap();
        // default epochs != 3; file sets 3; CLI sets 9
        let file_only = load_config(Some(&p), &[]).unwrap();
        assert_eq!(file_only.train.epochs, 3);
        let cli = load_config(Some(&p), &["train.epochs=9".to_string()]).unwrap();
        assert_eq!(cli.train.epochs, 9);
        assert_eq!(cli.train.batch_size, TrainParams::default().batch_size);
    }

    #[test]
    fn unknown_override_key_names_the_key() {
        let err = load_config(None, &["train.warmup=1".to_string()]).unwrap_err();
        assert!(err.to_string().contains("train.warmup"), "{err}");
    }

    #[test]
    fn type_error_names_key_and_expected_type() {
        let err = load_config(None, &["train.epochs=fast".to_string()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.epochs"), "{msg}");
        assert!(msg.contains("usize") || msg.contains("integer"), "{msg}");
    }

    #[test]
    fn protocol_override_parses() {
        let cfg = load_config(None, &["protocol=uda".to_string()]).unwrap();
        assert_eq!(cfg.protocol, Protocol::Uda);
        let cfg2 = load_config(None, &["model.variant=in_only".to_string()]).unwrap();
        assert_eq!(cfg2.model.variant, Variant::InOnly);
    }
}

//! One JSON config file for every run, with dotted-key overrides
//! (`--set pretrain.max_lr=3e-4`). Unknown keys, in the file or in an
//! override, are config errors, so typos fail loudly instead of silently
//! training with defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{JitterConfig, SyntheticConfig};
use crate::decode::DecodeConfig;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::AssignmentConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub assignment: AssignmentConfig,
    pub decode: DecodeConfig,
    pub jitter: JitterConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            assignment: AssignmentConfig::default(),
            decode: DecodeConfig::default(),
            jitter: JitterConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with the config file (if any), overlaid with
    /// `key=value` overrides. Every key must already exist.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file_value: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge_into(&mut value, &file_value, "")?;
        }
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{item}' must look like key=value"))
            })?;
            let parsed: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("config does not typecheck: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.assignment.validate()?;
        self.decode.validate()?;
        self.jitter.validate()?;
        self.synthetic.validate()?;
        if self.assignment.n_levels() != self.model.n_levels() {
            return Err(Error::Config(format!(
                "assignment has {} regression ranges but the pyramid has {} levels",
                self.assignment.n_levels(),
                self.model.n_levels()
            )));
        }
        Ok(())
    }

    /// Serialize the fully resolved config next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Recursively overlay `src` onto `dst`; every key in `src` must already
/// exist in `dst`.
fn merge_into(dst: &mut Value, src: &Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let sub_path = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match d.get_mut(k) {
                    Some(slot) => merge_into(slot, v, &sub_path)?,
                    None => {
                        return Err(Error::Config(format!("unknown config key '{sub_path}'")))
                    }
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s.clone();
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override key '{key}' goes through a non-object"))
        })?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        if i + 1 == parts.len() {
            *slot = new;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::Config(format!("empty override key '{key}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.model.d_model, 256);
        assert_eq!(cfg.pretrain.total_epochs, 10);
        assert_eq!(cfg.pretrain.warmup_epochs, 4);
        assert!((cfg.pretrain.max_lr - 2e-4).abs() < 1e-12);
        assert!((cfg.finetune.max_lr - 1e-4).abs() < 1e-12);
        assert!(cfg.finetune.reinit_heads);
    }

    #[test]
    fn overrides_change_existing_keys() {
        let cfg = RunConfig::load(
            None,
            &[
                "model.d_model=64".into(),
                "pretrain.max_lr=0.001".into(),
                "synthetic.t_range=[32,48]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert!((cfg.pretrain.max_lr - 1e-3).abs() < 1e-12);
        assert_eq!(cfg.synthetic.t_range, (32, 48));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["model.depth=3".into()]).is_err());
        assert!(RunConfig::load(None, &["nonsense=1".into()]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"model": {"d_modell": 32}}"#).unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
    }

    #[test]
    fn file_values_overlay_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"model": {"d_model": 128, "n_heads": 8}, "decode": {"keep_topk": 10}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.model.d_model, 128);
        assert_eq!(cfg.model.n_heads, 8);
        assert_eq!(cfg.decode.keep_topk, 10);
        assert_eq!(cfg.model.window, 9); // untouched default
    }

    #[test]
    fn cross_field_validation() {
        // 6 ranges vs 7 pyramid levels
        let err = RunConfig::load(
            None,
            &["assignment.regression_ranges=[[0.0,4.0],[4.0,8.0],[8.0,16.0],[16.0,32.0],[32.0,64.0],[64.0,null]]".into()],
        );
        assert!(err.is_err());
    }
}

//! Run configuration as flat `section.key = value` lines.
//!
//! Values are JSON scalars (`96`, `1e-4`, `true`) or bare strings
//! (`prediction`); `#` starts a comment. Every key is optional and
//! defaults to the desk-scale setup; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{config_err, Result, VisError};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;

/// Environment variable that replaces every seed in a loaded config.
pub const SEED_ENV: &str = "VISTR_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOrder {
    InOrder,
    /// Frames of each clip are shuffled, together with their annotations,
    /// before every forward pass.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    /// Both learning rates drop 10x from this epoch on.
    pub lr_drop_epoch: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub frame_order: FrameOrder,
    /// Evaluate on the training clips after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr_transformer: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            epochs: 18,
            lr_drop_epoch: 12,
            max_steps: 0,
            seed: 42,
            deterministic: true,
            frame_order: FrameOrder::InOrder,
            eval_each_epoch: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Directory holding `annotations.json`.
    pub dir: String,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings { dir: "data".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub train: TrainSettings,
    pub data: DataSettings,
    pub synth: SynthConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.validate()?;
        self.synth.validate()?;
        let t = &self.train;
        if !(t.lr_transformer > 0.0 && t.lr_backbone >= 0.0) {
            return config_err("learning rates must be positive");
        }
        if t.lr_backbone > t.lr_transformer {
            return config_err(format!(
                "lr_backbone {} exceeds lr_transformer {}",
                t.lr_backbone, t.lr_transformer
            ));
        }
        if t.weight_decay < 0.0 || t.grad_clip < 0.0 {
            return config_err("weight_decay and grad_clip must be nonnegative");
        }
        if self.synth.max_instances > self.model.n {
            return config_err(format!(
                "data may hold {} instances per clip but the model has {} slots",
                self.synth.max_instances, self.model.n
            ));
        }
        let (m, d) = (&self.model, &self.synth);
        if (m.t, m.height, m.width) != (d.t, d.height, d.width) {
            return config_err(format!(
                "model expects {}x{}x{} clips, data has {}x{}x{}",
                m.t, m.height, m.width, d.t, d.height, d.width
            ));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut root = Map::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return config_err(format!("line {}: expected `key = value`", lineno + 1));
            };
            let (key, value) = (key.trim(), value.trim());
            let parsed = serde_json::from_str::<Value>(value).unwrap_or_else(|_| Value::String(value.to_string()));
            insert(&mut root, key, parsed).map_err(|m| VisError::Config(format!("line {}: {m}", lineno + 1)))?;
        }
        let cfg: TrainConfig = serde_path_to_error::deserialize(Value::Object(root))
            .map_err(|e| VisError::Config(format!("`{}`: {}", e.path(), e.inner())))?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a seed from [`SEED_ENV`] to both the data and training
    /// generators.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed: u64 =
                v.trim().parse().map_err(|_| VisError::Config(format!("{SEED_ENV}={v:?} is not an integer")))?;
            self.train.seed = seed;
            self.synth.seed = seed;
        }
        Ok(())
    }
}

/// Text before the first `#` outside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn insert(root: &mut Map<String, Value>, key: &str, value: Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key {key:?}"));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        node = match entry {
            Value::Object(m) => m,
            _ => return Err(format!("{key:?} nests under a value")),
        };
    }
    let last = parts[parts.len() - 1].to_string();
    if node.contains_key(&last) {
        return Err(format!("duplicate key {key:?}"));
    }
    node.insert(last, value);
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => {
            // Bare unless it would read back as another type.
            let bare = serde_json::from_str::<Value>(s).is_err()
                && !s.contains(['#', '"'])
                && s.trim() == s
                && !s.is_empty();
            out.push((prefix.to_string(), if bare { s.clone() } else { Value::String(s.clone()).to_string() }));
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let err = TrainConfig::parse("model.depth = 3\n").unwrap_err().to_string();
        assert!(err.contains("depth"), "{err}");
    }

    #[test]
    fn comments_and_strings() {
        let cfg = TrainConfig::parse("# run\nmodel.query_mode = instance # shared\ndata.dir = \"out #1\"\n").unwrap();
        assert_eq!(cfg.model.query_mode, crate::model::QueryMode::Instance);
        assert_eq!(cfg.data.dir, "out #1");
    }
}

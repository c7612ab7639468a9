//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are listed in
//! [`KEYS`]; anything else is rejected.

use astgcrn_core::model::ModelConfig;
use astgcrn_core::train::Schedule;
use astgcrn_core::{Error, Result};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

pub const KEYS: [&str; 22] = [
    "data",
    "adjacency",
    "out",
    "seed",
    "attention",
    "graph",
    "hidden",
    "embed_dim",
    "cheb_depth",
    "layers",
    "heads",
    "ffn_dim",
    "input_steps",
    "horizon",
    "informer_factor",
    "pe_base",
    "lr",
    "weight_decay",
    "max_epochs",
    "patience",
    "batch_size",
    "clip_norm",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub schedule: Schedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            adjacency: None,
            out: PathBuf::from("run"),
            model: ModelConfig::default(),
            schedule: Schedule::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// The seed drives parameter init, shuffling, and query sampling.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.schedule.seed = seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.schedule;
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "adjacency" => self.adjacency = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.set_seed(parse(key, value)?),
            "attention" => m.attention = value.parse()?,
            "graph" => m.graph = value.parse()?,
            "hidden" => m.hidden = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "cheb_depth" => m.cheb_depth = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "ffn_dim" => m.ffn_dim = parse(key, value)?,
            "input_steps" => m.input_steps = parse(key, value)?,
            "horizon" => m.horizon = parse(key, value)?,
            "informer_factor" => m.informer_factor = parse(key, value)?,
            "pe_base" => m.pe_base = parse(key, value)?,
            "lr" => s.adam.lr = parse(key, value)?,
            "weight_decay" => s.adam.weight_decay = parse(key, value)?,
            "max_epochs" => s.max_epochs = parse(key, value)?,
            "patience" => s.patience = parse(key, value)?,
            "batch_size" => s.batch_size = parse(key, value)?,
            "clip_norm" => {
                s.clip_norm = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            other => {
                return Err(Error::Config(format!("unknown config key `{other}` (known: {})", KEYS.join(", "))));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "data": self.data.as_ref().map(|p| p.display().to_string()),
            "adjacency": self.adjacency.as_ref().map(|p| p.display().to_string()),
            "out": self.out.display().to_string(),
            "model": serde_json::to_value(&self.model).expect("model config serializes"),
            "schedule": serde_json::to_value(&self.schedule).expect("schedule serializes"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use astgcrn_core::model::{AttentionVariant, GraphMode};

    #[test]
    fn file_values_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nhidden = 16\nattention=informer\n\ngraph = static\nseed = 5\nclip_norm = 2.5\n").unwrap();
        let c = RunConfig::from_file(&path).unwrap();
        assert_eq!(c.model.hidden, 16);
        assert_eq!(c.model.attention, AttentionVariant::Informer);
        assert_eq!(c.model.graph, GraphMode::Static);
        assert_eq!((c.model.seed, c.schedule.seed), (5, 5));
        assert_eq!(c.schedule.clip_norm, Some(2.5));
    }

    #[test]
    fn unknown_key_lists_known_keys() {
        let err = RunConfig::default().set("hiden", "3").unwrap_err().to_string();
        assert!(err.contains("hiden") && err.contains("hidden"));
    }

    #[test]
    fn malformed_line_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "hidden 16\n").unwrap();
        assert!(RunConfig::from_file(&path).is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("attention", "none"),
            ("graph", "adaptive"),
            ("clip_norm", "none"),
            ("informer_factor", "2"),
            ("pe_base", "1000"),
            ("lr", "0.01"),
            ("weight_decay", "0"),
        ];
        for key in KEYS {
            let value = samples.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).unwrap_or("3");
            RunConfig::default().set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}

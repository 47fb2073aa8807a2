//! Run configuration: TOML file, then `--set key=value` overrides, then flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use plovis_core::providers::{OracleFeatureConfig, OracleNoiseModel};
use plovis_core::synthetic::SyntheticConfig;
use plovis_core::train::{FilterCase, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Names accepted by `plovis sweep --param`.
pub const SWEEPABLE: [&str; 7] = ["w", "r", "tau", "variant", "epochs", "cap_per_class", "n_cap"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Oracle,
    Replay,
    Sidecar,
}

impl std::str::FromStr for ProviderKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "replay" => Ok(Self::Replay),
            "sidecar" => Ok(Self::Sidecar),
            _ => bail!("unknown provider '{s}' (oracle, replay, sidecar)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub provider: ProviderKind,
    /// Directory of `.ply` scenes; synthetic scenes are generated when unset.
    pub scene_dir: Option<PathBuf>,
    /// Directory of `<stem>.labels` files; defaults to `scene_dir`.
    pub label_dir: Option<PathBuf>,
    /// Scenes for `eval` and `sweep`; defaults to `scene_dir`.
    pub eval_scene_dir: Option<PathBuf>,
    /// Re-draw this many sparse labels per scene from dense labels (0 keeps the files').
    pub sparse_per_scene: usize,
    pub synthetic: SyntheticConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub oracle_features: OracleFeatureConfig,
    pub oracle_noise: OracleNoiseModel,
    pub replay_dir: Option<PathBuf>,
    /// Record every provider response here while training.
    pub record_dir: Option<PathBuf>,
    pub sidecar_cmd: Option<String>,
    pub sidecar_addr: Option<String>,
    /// Dump a render every this many epochs (0 disables).
    pub render_every: usize,
    /// Write a checkpoint every this many steps (0 writes only the final one).
    pub checkpoint_every: u64,
    /// Epochs averaged for the reported label quality.
    pub metric_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            provider: ProviderKind::Oracle,
            scene_dir: None,
            label_dir: None,
            eval_scene_dir: None,
            sparse_per_scene: 0,
            synthetic: SyntheticConfig::default(),
            train_scenes: 20,
            eval_scenes: 5,
            oracle_features: OracleFeatureConfig::default(),
            oracle_noise: OracleNoiseModel::default(),
            replay_dir: None,
            record_dir: None,
            sidecar_cmd: None,
            sidecar_addr: None,
            render_every: 1,
            checkpoint_every: 0,
            metric_window: 10,
        }
    }
}

/// Keys of `user` that do not exist in `defaults`, as dotted paths.
fn unknown_keys(user: &Value, defaults: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(d)) = (user, defaults) else { return };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match d.get(k) {
            None => out.push(path),
            Some(dv) => unknown_keys(v, dv, &path, out),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k.as_str()) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses a `--set` value as a TOML scalar or array, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("'{}' is not a table", parts[..i].join(".")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| anyhow!("unknown configuration key '{key}'"))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

/// Applies one `key=value` override to a serialized configuration.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{assignment}'"))?;
    let (key, raw) = (key.trim(), raw.trim());
    if key == "variant" {
        let case: FilterCase = raw.parse()?;
        let (conf, loss) = case.settings();
        set_path(root, "confidence_filter", Value::Bool(conf))?;
        return set_path(root, "loss_filter", serde_json::to_value(loss)?);
    }
    set_path(root, key, parse_value(raw))
}

impl RunConfig {
    /// Defaults, overlaid with the TOML file and then each `--set`.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            let user = serde_json::to_value(table)?;
            let mut unknown = Vec::new();
            unknown_keys(&user, &root, "", &mut unknown);
            if !unknown.is_empty() {
                bail!("{}: unknown configuration keys: {}", path.display(), unknown.join(", "));
            }
            merge(&mut root, user);
        }
        for s in sets {
            apply_set(&mut root, s)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).context("invalid configuration")?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Checks paths and provider settings before any work starts.
    pub fn check(&self) -> Result<()> {
        for dir in [&self.scene_dir, &self.label_dir, &self.eval_scene_dir, &self.replay_dir]
            .into_iter()
            .flatten()
        {
            if !dir.is_dir() {
                bail!("directory not found: {}", dir.display());
            }
        }
        match self.provider {
            ProviderKind::Replay if self.replay_dir.is_none() => bail!("provider 'replay' needs replay_dir"),
            ProviderKind::Sidecar if self.sidecar_cmd.is_some() == self.sidecar_addr.is_some() => {
                bail!("provider 'sidecar' needs exactly one of sidecar_cmd and sidecar_addr")
            }
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.insert("config_hash".into(), Value::String(self.train.hash()));
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

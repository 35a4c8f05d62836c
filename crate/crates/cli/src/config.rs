// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vtrace_core::model::WeightGroup;
use vtrace_core::{EnvConfig, ModelConfig, ModelKind, Rule, Stage, View};

use crate::CliError;

pub const SEED_VAR: &str = "VTRACE_SEED";

fn default_episodes() -> usize {
    200
}

fn default_tasks() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub probes: Vec<Probe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Probe {
    Cka {
        name: Option<String>,
        source: CkaSource,
        #[serde(default = "all_views")]
        views: Vec<View>,
        /// Also write the activation dumps next to the outputs.
        #[serde(default)]
        save_dumps: bool,
    },
    Knockout {
        name: Option<String>,
        specs: Vec<String>,
    },
    Sweep {
        name: Option<String>,
        stage: Stage,
        /// Omit for the identity sweep.
        rule: Option<Rule>,
        widths: Vec<usize>,
    },
    Localize {
        name: Option<String>,
        layers: Option<Vec<usize>>,
    },
    Perturb {
        name: Option<String>,
        specs: Vec<String>,
    },
    Edit {
        name: Option<String>,
        edit: Vec<String>,
    },
}

fn all_views() -> Vec<View> {
    View::ALL.to_vec()
}

fn default_samples() -> usize {
    32
}

fn default_probe_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CkaSource {
    Dumps {
        anchor: Option<PathBuf>,
        target: Option<PathBuf>,
    },
    Fixture {
        scale: f64,
        group: WeightGroup,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_probe_seed")]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Command {
    Cka,
    Knockout,
    Sweep,
    Localize,
    Perturb,
    Edit,
    Report,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Cka => "cka",
            Command::Knockout => "knockout",
            Command::Sweep => "sweep",
            Command::Localize => "localize",
            Command::Perturb => "perturb",
            Command::Edit => "edit",
            Command::Report => "report",
        }
    }
}

impl Probe {
    pub fn command(&self) -> Command {
        match self {
            Probe::Cka { .. } => Command::Cka,
            Probe::Knockout { .. } => Command::Knockout,
            Probe::Sweep { .. } => Command::Sweep,
            Probe::Localize { .. } => Command::Localize,
            Probe::Perturb { .. } => Command::Perturb,
            Probe::Edit { .. } => Command::Edit,
        }
    }

    fn explicit_name(&self) -> Option<&str> {
        match self {
            Probe::Cka { name, .. }
            | Probe::Knockout { name, .. }
            | Probe::Sweep { name, .. }
            | Probe::Localize { name, .. }
            | Probe::Perturb { name, .. }
            | Probe::Edit { name, .. } => name.as_deref(),
        }
    }

    /// Output file stem.
    pub fn name(&self) -> String {
        self.explicit_name()
            .map_or_else(|| self.command().as_str().to_string(), str::to_string)
    }
}

/// A parsed config plus what the command line changed.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    /// `output_dir` resolved against the config file's directory.
    pub output_dir: PathBuf,
    pub hash: String,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.probes.is_empty() {
            return Err(CliError::config("probes: need at least one probe block"));
        }
        if self.episodes == 0 {
            return Err(CliError::config("episodes: must be at least 1"));
        }
        if self.tasks == 0 {
            return Err(CliError::config("tasks: must be at least 1"));
        }
        let grid = self.model.config.patch_grid;
        if grid != (self.env.grid, self.env.grid) {
            return Err(CliError::config(format!(
                "env.grid: {} does not match model.config.patch_grid {:?}",
                self.env.grid, grid
            )));
        }
        if self.env.colors > self.model.config.color_vocab {
            return Err(CliError::config(format!(
                "env.colors: {} exceeds model.config.color_vocab {}",
                self.env.colors, self.model.config.color_vocab
            )));
        }
        let mut names = BTreeSet::new();
        for (i, p) in self.probes.iter().enumerate() {
            let name = p.name();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(CliError::config(format!(
                    "probes[{i}].name: `{name}` is not a valid file stem"
                )));
            }
            if name == "report" || !names.insert(name.clone()) {
                return Err(CliError::config(format!("probes[{i}].name: `{name}` is already used")));
            }
            if let Probe::Cka {
                source: CkaSource::Dumps { anchor, target },
                ..
            } = p
            {
                if anchor.is_none() {
                    return Err(CliError::config(format!(
                        "probes[{i}].source.anchor: missing dump path"
                    )));
                }
                if target.is_none() {
                    return Err(CliError::config(format!(
                        "probes[{i}].source.target: missing dump path"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON, with `output_dir` left out so
    /// relocated runs hash the same.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Reads, overrides and validates a config file.
pub fn load(path: &Path, episodes: Option<usize>, seed_override: Option<&str>) -> Result<Loaded, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let mut config: RunConfig =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if let Some(n) = episodes {
        config.episodes = n;
    }
    if let Some(s) = seed_override {
        config.master_seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("{SEED_VAR}: `{s}` is not a 64-bit unsigned integer")))?;
    }
    config.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let output_dir = resolve(base, &config.output_dir);
    let hash = config.hash();
    Ok(Loaded {
        config,
        output_dir,
        hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        serde_json::from_str(r#"{"model":{"kind":"early_fusion"},"output_dir":"out","probes":[{"type":"localize"}]}"#)
            .unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let c = minimal();
        assert_eq!(c.episodes, 200);
        assert_eq!(c.tasks, 10);
        assert_eq!(c.env, EnvConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = minimal();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.master_seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = minimal();
        c.probes.push(c.probes[0].clone());
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_field_rejected() {
        let r: Result<RunConfig, _> =
            serde_json::from_str(r#"{"model":{"kind":"early_fusion"},"output_dir":"o","probes":[],"extra":1}"#);
        assert!(r.is_err());
    }

    #[test]
    fn schema_lists_every_field() {
        let schema: serde_json::Value = serde_json::from_str(include_str!("../schema/run_config.schema.json")).unwrap();
        let mut full = minimal();
        full.probes = vec![Probe::Localize {
            name: None,
            layers: None,
        }];
        let value = serde_json::to_value(&full).unwrap();
        let props = schema["properties"].as_object().unwrap();
        for key in value.as_object().unwrap().keys() {
            assert!(props.contains_key(key), "schema lacks {key}");
        }
        let env = serde_json::to_value(EnvConfig::default()).unwrap();
        for key in env.as_object().unwrap().keys() {
            assert!(
                schema["$defs"]["env_config"]["properties"].get(key).is_some(),
                "schema lacks env.{key}"
            );
        }
        let model = serde_json::to_value(ModelConfig::default()).unwrap();
        for key in model.as_object().unwrap().keys() {
            assert!(
                schema["$defs"]["model_config"]["properties"].get(key).is_some(),
                "schema lacks model.{key}"
            );
        }
    }

    #[test]
    fn bundled_demos_load() {
        for demo in ["demo_early_fusion", "demo_late_fusion", "demo_shortcut"] {
            let path = Path::new(env!("CARGO_MANIFEST_DIR"))
                .join("configs")
                .join(format!("{demo}.json"));
            load(&path, None, None).unwrap();
        }
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::CliError;

/// `git describe` of the tree this binary was built from.
pub const BUILD_ID: &str = env!("UACVAE_BUILD_ID");

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    Flag,
    Config,
    Time,
}

/// Flag first, then a seed written in the config, then the clock.
pub fn resolve_seed(flag: Option<u64>, configured: Option<u64>) -> (u64, SeedSource) {
    if let Some(s) = flag {
        return (s, SeedSource::Flag);
    }
    if let Some(s) = configured {
        return (s, SeedSource::Config);
    }
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    (now.as_secs() ^ u64::from(now.subsec_nanos()).rotate_left(32), SeedSource::Time)
}

/// Provenance record written next to every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub seed: u64,
    pub seed_source: SeedSource,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: (u64, SeedSource), config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            build: BUILD_ID.to_string(),
            seed: seed.0,
            seed_source: seed.1,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
    }
}

/// `out.jsonl` → `out.jsonl.manifest.json`.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

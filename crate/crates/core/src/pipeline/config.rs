use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::grm::{GrmHyper, TaskOptions};
use crate::quantizer::IdHyper;

/// Input files. Unset embedding/interaction paths fall back to the files
/// written by `synth` inside the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub text_embeddings: Option<PathBuf>,
    pub vision_embeddings: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            text_embeddings: None,
            vision_embeddings: None,
            interactions: None,
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub labels: u64,
    pub quantizer: u64,
    pub grm: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { labels: 0, quantizer: 0, grm: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    /// Clusters per modality.
    pub k: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig { k: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Also score a freshly initialized model with the same seed.
    pub untrained_baseline: bool,
    pub popularity_baseline: bool,
    /// Write per-user rankings next to the metrics.
    pub dump_rankings: bool,
    /// Score an evenly spaced subset of at most this many users; 0 means all.
    pub max_users: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { untrained_baseline: true, popularity_baseline: true, dump_rankings: false, max_users: 0 }
    }
}

/// Everything a run needs; defaults are the full-scale hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: String,
    pub threads: usize,
    pub paths: Paths,
    pub seeds: Seeds,
    pub synth: SynthConfig,
    pub labels: LabelConfig,
    pub quantizer: IdHyper,
    pub tasks: TaskOptions,
    pub grm: GrmHyper,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "synthetic".into(),
            threads: 1,
            paths: Paths::default(),
            seeds: Seeds::default(),
            synth: SynthConfig::default(),
            labels: LabelConfig::default(),
            quantizer: IdHyper::default(),
            tasks: TaskOptions::default(),
            grm: GrmHyper::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// Applies `section.key=value` overrides; values are parsed as TOML and
    /// fall back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<RunConfig> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut errs = Vec::new();
        for o in overrides {
            let Some((key, raw)) = o.split_once('=') else {
                errs.push(format!("override `{o}` is not key=value"));
                continue;
            };
            let parts: Vec<&str> = key.trim().split('.').collect();
            if let Err(e) = set_path(&mut root, &parts, parse_value(raw.trim())) {
                errs.push(format!("override `{key}`: {e}"));
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))
    }

    /// Every violation at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut collect = |r: Result<()>| match r {
            Err(Error::Config(e)) => errs.extend(e),
            Err(e) => errs.push(e.to_string()),
            Ok(()) => {}
        };
        collect(self.quantizer.validate(0));
        collect(self.grm.validate());
        collect(self.synth.validate());
        if self.labels.k == 0 {
            errs.push("labels.k must be positive".into());
        }
        if self.tasks.window == 0 {
            errs.push("tasks.window must be positive".into());
        }
        if self.tasks.window != self.grm.infer.window {
            errs.push(format!(
                "tasks.window ({}) and grm.infer.window ({}) must agree",
                self.tasks.window, self.grm.infer.window
            ));
        }
        if self.threads == 0 {
            errs.push("threads must be at least 1".into());
        }
        for (name, p) in [
            ("paths.text_embeddings", &self.paths.text_embeddings),
            ("paths.vision_embeddings", &self.paths.vision_embeddings),
            ("paths.interactions", &self.paths.interactions),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    errs.push(format!("{name} {} does not exist", p.display()));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

fn set_path(node: &mut toml::Value, parts: &[&str], value: toml::Value) -> std::result::Result<(), String> {
    let table = node.as_table_mut().ok_or("not a section")?;
    match parts {
        [] => Err("empty key".into()),
        [last] => {
            table.insert(last.to_string(), value);
            Ok(())
        }
        [first, rest @ ..] => {
            let child = table
                .entry(first.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
            set_path(child, rest, value)
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

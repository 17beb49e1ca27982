//! Experiment configuration files.
//!
//! Relative paths inside a config file are resolved against the directory
//! that contains it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{generate_synthetic, load_dataset, make_plan, Dataset, GeneratorParams, SessionPlan};
use crate::spaces::CompositionConfig;
use crate::trainer::{ExperimentSettings, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Dataset directory or CSV file written by `generate`.
    Path(PathBuf),
    /// Generated in memory on every run.
    Synthetic(GeneratorParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub base_classes: usize,
    pub way: usize,
    pub shot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSource,
    pub plan: PlanConfig,
    /// `train.seed` is ignored; every entry of `seeds` gives one run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub composition: CompositionConfig,
    #[serde(default)]
    pub a_sweep: Vec<f64>,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Parses and validates a config; `base_dir` anchors relative paths.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let mut cfg: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::Schema(inner.to_string())
            } else {
                Error::Schema(format!("field `{path}`: {inner}"))
            }
        })?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, dir)
    }

    fn resolve_paths(&mut self, base_dir: &Path) {
        if let DatasetSource::Path(p) = &mut self.dataset {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base_dir.join(&self.output_dir);
        }
    }

    /// Collects every problem before failing so one pass fixes the file.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            problems.push(format!(
                "`schema_version`: expected {CONFIG_SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        match &self.dataset {
            DatasetSource::Path(p) if !p.exists() => {
                problems.push(format!("`dataset.path`: {} does not exist", p.display()));
            }
            DatasetSource::Synthetic(g) => {
                if let Err(e) = g.validate() {
                    problems.push(format!("`dataset.synthetic`: {e}"));
                }
            }
            _ => {}
        }
        for (name, v) in [("plan.way", self.plan.way), ("plan.shot", self.plan.shot)] {
            if v == 0 {
                problems.push(format!("`{name}` must be positive"));
            }
        }
        if self.plan.base_classes < 2 {
            problems.push("`plan.base_classes` must be at least 2".into());
        }
        if self.seeds.is_empty() {
            problems.push("`seeds` must not be empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            problems.push(format!("`seeds` lists {s} twice"));
        }
        if let Err(e) = self.train.validate() {
            problems.push(format!("`train`: {}", strip_schema(e)));
        }
        if let Err(e) = self.composition.validate() {
            problems.push(format!("`composition`: {}", strip_schema(e)));
        }
        if self.a_sweep.iter().any(|a| !(0.0..=1.0).contains(a)) {
            problems.push("`a_sweep` values must lie in [0, 1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(problems.join("; ")))
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Path(p) => load_dataset(p),
            DatasetSource::Synthetic(g) => generate_synthetic(g),
        }
    }

    /// Session plan for one seed; the class order is shuffled per seed.
    pub fn plan_for(&self, dataset: &Dataset, seed: u64) -> Result<SessionPlan> {
        make_plan(dataset, self.plan.base_classes, self.plan.way, self.plan.shot, seed)
    }

    pub fn settings_for(&self, seed: u64) -> ExperimentSettings {
        let mut train = self.train.clone();
        train.seed = seed;
        ExperimentSettings {
            train,
            composition: self.composition.clone(),
            a_sweep: self.a_sweep.clone(),
        }
    }
}

fn strip_schema(e: Error) -> String {
    match e {
        Error::Schema(m) | Error::InvalidInput(m) => m,
        other => other.to_string(),
    }
}

//! Checkpoints, experiment configs and run directories.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::env::{Difficulty, EnvKind};
use crate::error::{invalid, Error, Result};
use crate::evaluation::DEFAULT_EPISODES;
use crate::model::{Mode, ModelBundle, TaskSpec};
use crate::nn::ParamBlock;
use crate::types::RunConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Relative output paths resolve under this directory when it is set.
pub const RUN_ROOT_ENV: &str = "CASIL_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Everything needed to rebuild a [`ModelBundle`] exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub spec: TaskSpec,
    pub mode: Mode,
    pub blocks: Vec<BlockRecord>,
    pub switch_thresholds: Vec<f64>,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn from_bundle(bundle: &ModelBundle) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: bundle.config.clone(),
            spec: bundle.spec.clone(),
            mode: bundle.mode,
            blocks: bundle
                .params
                .blocks()
                .iter()
                .map(|b| BlockRecord {
                    name: b.name.clone(),
                    shape: [b.value.rows, b.value.cols],
                    data: b.value.data.clone(),
                })
                .collect(),
            switch_thresholds: bundle.switch_thresholds.clone(),
            step: bundle.step,
            rng: bundle.rng.clone(),
        }
    }

    pub fn into_bundle(self) -> Result<ModelBundle> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut bundle = ModelBundle::new(self.spec, self.config, self.mode)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in self.blocks {
            let [rows, cols] = b.shape;
            if rows.checked_mul(cols) != Some(b.data.len()) {
                return Err(invalid(format!(
                    "block {} has {} values for shape {rows}×{cols}",
                    b.name,
                    b.data.len()
                )));
            }
            blocks.push(ParamBlock {
                name: b.name,
                value: Tensor::from_vec(rows, cols, b.data),
            });
        }
        bundle.params.load_blocks(blocks).map_err(invalid)?;
        bundle.switch_thresholds = self.switch_thresholds;
        bundle.step = self.step;
        bundle.rng = self.rng;
        Ok(bundle)
    }
}

pub fn serialize_checkpoint(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(&Checkpoint::from_bundle(bundle)).map_err(|e| invalid(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<ModelBundle> {
    let ck: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: e.column(),
        message: e.to_string(),
    })?;
    ck.into_bundle()
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle) -> Result<()> {
    std::fs::write(path, serialize_checkpoint(bundle)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    deserialize_checkpoint(&std::fs::read(path)?)
}

fn default_demos() -> usize {
    100
}

fn default_episodes() -> usize {
    DEFAULT_EPISODES
}

fn default_retained() -> Vec<usize> {
    vec![20, 50, 80]
}

fn default_demo_seed() -> u64 {
    1
}

fn default_difficulty() -> Difficulty {
    Difficulty::Easy
}

/// One experiment: where the data comes from, how to train and where to
/// write. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    #[serde(default = "default_difficulty")]
    pub difficulty: Difficulty,
    pub mode: Mode,
    /// Demonstrations to generate.
    #[serde(default = "default_demos")]
    pub demos: usize,
    #[serde(default = "default_demo_seed")]
    pub demo_seed: u64,
    /// Retained demonstration counts for the data-drop sweep.
    #[serde(default = "default_retained")]
    pub retained: Vec<usize>,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    pub out: PathBuf,
    #[serde(default)]
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.demos == 0 {
            return Err(Error::Config("demos must be positive".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be positive".into()));
        }
        if let Some(r) = self.retained.iter().find(|&&r| r == 0 || r > self.demos) {
            return Err(Error::Config(format!("cannot retain {r} of {} demonstrations", self.demos)));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::Config("out must not be empty".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        self.env.task_spec()
    }
}

/// Resolves `path` against [`RUN_ROOT_ENV`] when it is relative and the
/// variable is set.
pub fn resolve_out(path: &Path) -> PathBuf {
    resolve_out_with(path, std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
}

pub fn resolve_out_with(path: &Path, root: Option<PathBuf>) -> PathBuf {
    match root {
        Some(root) if path.is_relative() && !root.as_os_str().is_empty() => root.join(path),
        _ => path.to_path_buf(),
    }
}

/// What a run directory records so the run can be repeated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub command: String,
    pub crate_version: String,
    pub seed: u64,
    pub experiment: ExperimentConfig,
}

impl RunRecord {
    pub fn new(command: &str, experiment: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            seed: experiment.run.seed,
            experiment: experiment.clone(),
        }
    }

    /// Writes `run.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("run.toml"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentConfig {
        ExperimentConfig {
            env: EnvKind::Stage { stages: 4 },
            difficulty: Difficulty::Easy,
            mode: Mode::Casil,
            demos: 20,
            demo_seed: 1,
            retained: vec![10, 20],
            episodes: 5,
            out: "runs/x".into(),
            run: RunConfig::default(),
        }
    }

    #[test]
    fn experiment_round_trips_through_toml() {
        let c = sample();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "env = \"corridor\"\nmode = \"bc\"\nout = \"o\"\nepisodez = 3\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))));
        let text = "env = \"corridor\"\nmode = \"bc\"\nout = \"o\"\n[run]\nlearning_rate = 1.0\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))));
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::from_toml("env = \"stage-7\"\nmode = \"casil\"\nout = \"o\"\n").unwrap();
        assert_eq!(c.env, EnvKind::Stage { stages: 7 });
        assert_eq!(c.episodes, 80);
        assert_eq!(c.retained, vec![20, 50, 80]);
        assert_eq!(c.run, RunConfig::default());
    }

    #[test]
    fn run_root_applies_to_relative_paths_only() {
        let root = Some(PathBuf::from("/data/runs"));
        assert_eq!(resolve_out_with(Path::new("a/b"), root.clone()), PathBuf::from("/data/runs/a/b"));
        assert_eq!(resolve_out_with(Path::new("/abs"), root), PathBuf::from("/abs"));
        assert_eq!(resolve_out_with(Path::new("a"), None), PathBuf::from("a"));
    }
}

//! End-to-end runs (pre-train, train, evaluate) and the sweeps built on them.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{uniform_boundaries, CaptionedObservation};
use crate::dataset::Dataset;
use crate::env::{caption_pairs, generate_demos, Difficulty, EnvKind};
use crate::error::{invalid, Result};
use crate::evaluation::{evaluate, mean_std, MetricReport};
use crate::model::{Mode, ModelBundle, TaskSpec};
use crate::training::{pretrain_encoders, train_with_captions, TrainingLog};
use crate::types::{CognitivePrior, RunConfig};

/// Captions for encoder pre-training, drawn from worlds no demonstration or
/// evaluation uses.
pub fn captions_for(kind: EnvKind, difficulty: Difficulty, config: &RunConfig) -> Result<Vec<CaptionedObservation>> {
    caption_pairs(kind, difficulty, config.pretrain_pairs, config.seed)
}

/// A freshly initialized bundle, pre-trained on `captions` and then trained
/// on `dataset`.
pub fn fit(
    spec: TaskSpec,
    dataset: &Dataset,
    captions: &[CaptionedObservation],
    config: RunConfig,
    mode: Mode,
) -> Result<(ModelBundle, TrainingLog)> {
    let mut bundle = ModelBundle::new(spec, config, mode)?;
    pretrain_encoders(&mut bundle, captions)?;
    let log = train_with_captions(&mut bundle, dataset, captions)?;
    Ok((bundle, log))
}

/// Shared settings of a sweep.
#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub kind: EnvKind,
    pub difficulty: Difficulty,
    pub modes: Vec<Mode>,
    /// One full repetition per seed: demonstrations, model and evaluation
    /// worlds all derive from it.
    pub seeds: Vec<u64>,
    pub episodes: usize,
    /// Demonstrations generated per seed.
    pub demos: usize,
    pub config: RunConfig,
    /// Finished cells are stored here and reused on the next run.
    pub cache: Option<PathBuf>,
}

/// One trained-and-evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    /// Retained demonstrations, skill count or ε, depending on the sweep.
    pub setting: f64,
    pub seed: u64,
    pub mode: Mode,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub name: String,
    pub setting_name: String,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// Distinct settings in first-seen order.
    pub fn settings(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.setting) {
                out.push(c.setting);
            }
        }
        out
    }

    pub fn modes(&self) -> Vec<Mode> {
        let mut out = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.mode) {
                out.push(c.mode);
            }
        }
        out
    }

    /// Mean and std over seeds of the success rate at one setting.
    pub fn success(&self, mode: Mode, setting: f64) -> Option<(f64, f64)> {
        let xs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.mode == mode && c.setting == setting)
            .map(|c| c.report.success_mean)
            .collect();
        (!xs.is_empty()).then(|| mean_std(&xs))
    }

    /// Plain-text table: one row per setting, one column per mode.
    pub fn to_text(&self) -> String {
        let modes = self.modes();
        let mut s = format!("# {}\n{:>10}", self.name, self.setting_name);
        for m in &modes {
            s.push_str(&format!(" {:>20}", m.name()));
        }
        s.push('\n');
        for x in self.settings() {
            s.push_str(&format!("{x:>10}"));
            for &m in &modes {
                match self.success(m, x) {
                    Some((mean, std)) => s.push_str(&format!(" {:>20}", format!("{mean:.3} ± {std:.3}"))),
                    None => s.push_str(&format!(" {:>20}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }

    /// One JSON record per cell.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for c in &self.cells {
            s.push_str(&serde_json::to_string(c).expect("cell serializes"));
            s.push('\n');
        }
        s
    }
}

fn cell_path(dir: &Path, settings: &SweepSettings, sweep: &str, setting: f64, seed: u64, mode: Mode) -> PathBuf {
    dir.join(format!(
        "{sweep}-{}-{}-{setting}-seed{seed}-{}.json",
        settings.kind,
        settings.difficulty,
        mode.name()
    ))
}

/// Trains and evaluates one cell, or loads it from the cache.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    settings: &SweepSettings,
    sweep: &str,
    setting: f64,
    seed: u64,
    mode: Mode,
    spec: TaskSpec,
    dataset: &Dataset,
    captions: &[CaptionedObservation],
    config: RunConfig,
) -> Result<SweepCell> {
    let cached = settings.cache.as_ref().map(|d| cell_path(d, settings, sweep, setting, seed, mode));
    if let Some(p) = &cached {
        if let Ok(text) = std::fs::read_to_string(p) {
            if let Ok(cell) = serde_json::from_str::<SweepCell>(&text) {
                return Ok(cell);
            }
        }
    }
    let (bundle, _) = fit(spec, dataset, captions, config, mode)?;
    let report = evaluate(&bundle, settings.kind, settings.difficulty, settings.episodes, seed)?;
    let cell = SweepCell {
        setting,
        seed,
        mode,
        report,
    };
    if let Some(p) = &cached {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, serde_json::to_string_pretty(&cell).expect("cell serializes"))?;
    }
    Ok(cell)
}

/// Fixed seeded order of `n` trajectories; retained subsets are its prefixes.
pub fn drop_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    order.shuffle(&mut rng);
    order
}

/// Retained subset of `dataset`: the first `retained` entries of
/// [`drop_order`].
pub fn retained_subset(dataset: &Dataset, retained: usize, seed: u64) -> Result<Dataset> {
    let n = dataset.trajectories.len();
    if retained == 0 || retained > n {
        return Err(invalid(format!("cannot retain {retained} of {n} trajectories")));
    }
    dataset.select(&drop_order(n, seed)[..retained])
}

fn seed_config(base: &RunConfig, seed: u64) -> RunConfig {
    let mut c = base.clone();
    c.seed = seed;
    c
}

/// Success against the number of retained demonstrations.
pub fn data_drop_sweep(settings: &SweepSettings, retained: &[usize]) -> Result<SweepTable> {
    if retained.is_empty() {
        return Err(invalid("no retained counts given"));
    }
    if let Some(&r) = retained.iter().find(|&&r| r == 0 || r > settings.demos) {
        return Err(invalid(format!("cannot retain {r} of {} trajectories", settings.demos)));
    }
    let spec = settings.kind.task_spec()?;
    let mut cells = Vec::new();
    for &seed in &settings.seeds {
        let demos = generate_demos(settings.kind, settings.difficulty, settings.demos, seed)?;
        let config = seed_config(&settings.config, seed);
        let captions = captions_for(settings.kind, settings.difficulty, &config)?;
        for &r in retained {
            let subset = retained_subset(&demos.dataset, r, seed)?;
            for &mode in &settings.modes {
                cells.push(run_cell(
                    settings,
                    "data-drop",
                    r as f64,
                    seed,
                    mode,
                    spec.clone(),
                    &subset,
                    &captions,
                    config.clone(),
                )?);
            }
        }
    }
    Ok(SweepTable {
        name: format!("data drop, {} {}", settings.kind, settings.difficulty),
        setting_name: "retained".into(),
        cells,
    })
}

/// The prior regrouped into `k` descriptions: adjacent descriptions are
/// joined when `k` is smaller, repeated when it is larger. Extra members go
/// to the earliest groups.
pub fn prior_variant(prior: &CognitivePrior, k: usize) -> Result<CognitivePrior> {
    let base = prior.len();
    if k == 0 {
        return Err(invalid("a prior needs at least one description"));
    }
    let d = prior.descriptions();
    if k <= base {
        let ends = uniform_boundaries(base, k)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(k);
        for e in ends {
            out.push(d[start..e].join(" "));
            start = e;
        }
        CognitivePrior::new(out)
    } else {
        let (each, extra) = (k / base, k % base);
        let mut out = Vec::with_capacity(k);
        for (j, text) in d.iter().enumerate() {
            for _ in 0..each + usize::from(j < extra) {
                out.push(text.clone());
            }
        }
        CognitivePrior::new(out)
    }
}

/// Success against the number of skills in the prior.
pub fn option_count_sweep(settings: &SweepSettings, counts: &[usize]) -> Result<SweepTable> {
    if counts.is_empty() {
        return Err(invalid("no skill counts given"));
    }
    let base = settings.kind.task_spec()?;
    let mut cells = Vec::new();
    for &seed in &settings.seeds {
        let demos = generate_demos(settings.kind, settings.difficulty, settings.demos, seed)?;
        let shortest = demos.dataset.trajectories.iter().map(|t| t.len()).min().unwrap_or(0);
        let config = seed_config(&settings.config, seed);
        let captions = captions_for(settings.kind, settings.difficulty, &config)?;
        for &k in counts {
            if k > shortest {
                return Err(crate::error::Error::Infeasible(format!(
                    "{k} skills but the shortest trajectory has {shortest} steps"
                )));
            }
            let mut spec = base.clone();
            spec.prior = prior_variant(&base.prior, k)?;
            for &mode in &settings.modes {
                cells.push(run_cell(
                    settings,
                    "option-count",
                    k as f64,
                    seed,
                    mode,
                    spec.clone(),
                    &demos.dataset,
                    &captions,
                    config.clone(),
                )?);
            }
        }
    }
    Ok(SweepTable {
        name: format!("option count, {} {}", settings.kind, settings.difficulty),
        setting_name: "skills".into(),
        cells,
    })
}

/// Success against the weight ε of the cognition term.
pub fn epsilon_sweep(settings: &SweepSettings, epsilons: &[f64]) -> Result<SweepTable> {
    if epsilons.is_empty() {
        return Err(invalid("no epsilon values given"));
    }
    if let Some(e) = epsilons.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(invalid(format!("epsilon {e} must be finite and non-negative")));
    }
    let spec = settings.kind.task_spec()?;
    let mut cells = Vec::new();
    for &seed in &settings.seeds {
        let demos = generate_demos(settings.kind, settings.difficulty, settings.demos, seed)?;
        let base = seed_config(&settings.config, seed);
        let captions = captions_for(settings.kind, settings.difficulty, &base)?;
        for &eps in epsilons {
            let mut config = base.clone();
            config.epsilon = eps;
            for &mode in &settings.modes {
                cells.push(run_cell(
                    settings,
                    "epsilon",
                    eps,
                    seed,
                    mode,
                    spec.clone(),
                    &demos.dataset,
                    &captions,
                    config.clone(),
                )?);
            }
        }
    }
    Ok(SweepTable {
        name: format!("epsilon, {} {}", settings.kind, settings.difficulty),
        setting_name: "epsilon".into(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_merge_and_repeat() {
        let p = CognitivePrior::new(["a", "b", "c", "d", "e"]).unwrap();
        let fewer = prior_variant(&p, 3).unwrap();
        assert_eq!(fewer.descriptions(), ["a b", "c d", "e"]);
        let more = prior_variant(&p, 7).unwrap();
        assert_eq!(more.descriptions(), ["a", "a", "b", "b", "c", "d", "e"]);
        assert_eq!(prior_variant(&p, 5).unwrap(), p);
        assert_eq!(prior_variant(&p, 1).unwrap().descriptions(), ["a b c d e"]);
    }

    #[test]
    fn drop_subsets_are_nested() {
        let order = drop_order(100, 4);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_eq!(order, drop_order(100, 4));
        assert_ne!(order, drop_order(100, 5));
    }
}

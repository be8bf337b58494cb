//! Success-rate batteries, segmentation scoring and the experiment sweeps.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{eval_seed, make_env, Difficulty, EnvKind, EpisodeResult};
use crate::error::{invalid, Result};
use crate::model::{Mode, ModelBundle};
use crate::rollout::run_episode;
use crate::types::RunConfig;

/// Default number of evaluation episodes.
pub const DEFAULT_EPISODES: usize = 80;
/// Default tolerance, in steps, of [`segmentation_accuracy`].
pub const DEFAULT_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub env: String,
    pub difficulty: Difficulty,
    pub episodes: usize,
    pub success_mean: f64,
    pub success_std: f64,
    pub progress_mean: f64,
    pub progress_std: f64,
    /// Fraction of training boundaries within the tolerance window of the
    /// expert's phase changes, when known.
    pub segmentation_accuracy: Option<f64>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub results: Vec<EpisodeResult>,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Hex SHA-256 of the config's JSON form.
pub fn config_hash(config: &RunConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl MetricReport {
    /// Builds a report from per-episode results.
    pub fn from_results(
        mode: Mode,
        kind: EnvKind,
        difficulty: Difficulty,
        seeds: Vec<u64>,
        results: Vec<EpisodeResult>,
        config: &RunConfig,
    ) -> Self {
        let success: Vec<f64> = results.iter().map(|r| if r.success { 1.0 } else { 0.0 }).collect();
        let progress: Vec<f64> = results.iter().map(|r| r.progress).collect();
        let (success_mean, success_std) = mean_std(&success);
        let (progress_mean, progress_std) = mean_std(&progress);
        Self {
            mode,
            env: kind.to_string(),
            difficulty,
            episodes: results.len(),
            success_mean,
            success_std,
            progress_mean,
            progress_std,
            segmentation_accuracy: None,
            seeds,
            config_hash: config_hash(config),
            results,
        }
    }
}

/// Seeds of the evaluation worlds for `seed`.
pub fn evaluation_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n).map(|i| eval_seed(seed, i)).collect()
}

/// Greedy rollouts of `bundle` in `n_episodes` fresh worlds, spread over
/// one worker per available core. Results keep seed order.
pub fn evaluate(
    bundle: &ModelBundle,
    kind: EnvKind,
    difficulty: Difficulty,
    n_episodes: usize,
    seed: u64,
) -> Result<MetricReport> {
    if n_episodes == 0 {
        return Err(invalid("need at least one evaluation episode"));
    }
    let seeds = evaluation_seeds(seed, n_episodes);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(n_episodes);
    let per = n_episodes.div_ceil(workers);
    let parts: Vec<Result<Vec<EpisodeResult>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(per)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&s| {
                            let mut world = make_env(kind, difficulty, s)?;
                            Ok(run_episode(bundle, &mut world)?.result)
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut results = Vec::with_capacity(n_episodes);
    for part in parts {
        results.extend(part?);
    }
    Ok(MetricReport::from_results(bundle.mode, kind, difficulty, seeds, results, &bundle.config))
}

/// Fraction of boundaries whose predicted position lies within `window`
/// steps of the true one.
pub fn segmentation_accuracy(predicted: &[usize], truth: &[usize], window: usize) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(invalid(format!(
            "boundary lists differ in length: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(invalid("no boundaries to compare"));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p.abs_diff(**t) <= window).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean [`segmentation_accuracy`] over a dataset.
pub fn dataset_segmentation_accuracy(predicted: &[Vec<usize>], truth: &[Vec<usize>], window: usize) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(invalid("boundary sets must be non-empty and of equal size"));
    }
    let mut sum = 0.0;
    for (p, t) in predicted.iter().zip(truth) {
        sum += segmentation_accuracy(p, t, window)?;
    }
    Ok(sum / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts_hits() {
        assert_eq!(segmentation_accuracy(&[5, 9, 20], &[5, 9, 20], 3).unwrap(), 1.0);
        let a = segmentation_accuracy(&[10, 22, 40], &[10, 20, 30], 3).unwrap();
        assert!((a - 2.0 / 3.0).abs() < 1e-15);
        assert!(segmentation_accuracy(&[1, 2], &[2], 3).is_err());
    }

    #[test]
    fn mean_std_of_constant() {
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[0.0, 1.0]);
        assert_eq!((m, s), (0.5, 0.5));
    }
}

//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use casil::alignment::SimilarityMatrix;
use casil::model::TaskSpec;
use casil::training::TrainingData;
use casil::types::{Action, ActionKind, CognitivePrior, Observation, RunConfig, SegmentedTrajectory, Step, TaskGoal, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_GOAL: &str = "stack the red block on the blue block";

/// K = 3, every dimension at most 8.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        seed: 11,
        embedding_dim: 6,
        token_buckets: 16,
        skill_embedding_dim: 4,
        memory_dim: 5,
        model_dim: 8,
        attention_heads: 2,
        truncation: 4,
        dropout: 0.0,
        max_skill_horizon: 8,
        ..RunConfig::default()
    }
}

pub fn tiny_spec(kind: ActionKind) -> TaskSpec {
    tiny_spec_with(kind, &["reach the red block", "grasp it", "place it on blue"])
}

pub fn tiny_spec_with(kind: ActionKind, prior: &[&str]) -> TaskSpec {
    TaskSpec {
        task: "tiny".into(),
        goal: TINY_GOAL.into(),
        prior: CognitivePrior::new(prior.iter().copied()).unwrap(),
        obs_dim: 5,
        action_dim: 3,
        action_kind: kind,
    }
}

pub fn random_trajectory(rng: &mut ChaCha8Rng, kind: ActionKind, t: usize) -> Trajectory {
    let steps = (0..t)
        .map(|_| Step {
            obs: Observation::new((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            action: match kind {
                ActionKind::Discrete => Action::one_hot(rng.gen_range(0..3), 3),
                ActionKind::Continuous => Action::new((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            },
        })
        .collect();
    Trajectory::new(TaskGoal::new(TINY_GOAL).unwrap(), steps).unwrap()
}

/// Two short trajectories with hand-placed boundaries for three skills.
pub fn tiny_data(kind: ActionKind, seed: u64) -> TrainingData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segmented = [(9usize, vec![3usize, 7, 9]), (7, vec![1, 6, 7])]
        .into_iter()
        .map(|(t, b)| SegmentedTrajectory::new(random_trajectory(&mut rng, kind, t), b).unwrap())
        .collect();
    TrainingData { segmented }
}

/// Random strictly increasing boundaries ending at `t`.
pub fn random_boundaries(rng: &mut ChaCha8Rng, t: usize, k: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (1..t).collect();
    for i in 0..k - 1 {
        let j = rng.gen_range(i..cuts.len());
        cuts.swap(i, j);
    }
    let mut b: Vec<usize> = cuts[..k - 1].to_vec();
    b.sort_unstable();
    b.push(t);
    b
}

/// Exhaustive search over every boundary vector in lexicographic order,
/// keeping the first strict maximum.
pub fn brute_force_segmentation(sim: &SimilarityMatrix) -> Vec<usize> {
    fn walk(sim: &SimilarityMatrix, j: usize, from: usize, prefix: &mut Vec<usize>, best: &mut Option<(f64, Vec<usize>)>) {
        let (k, t) = (sim.skills, sim.steps);
        if j == k - 1 {
            prefix.push(t);
            let score: f64 = prefix.iter().enumerate().map(|(i, &b)| sim.get(i, b - 1)).sum();
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                *best = Some((score, prefix.clone()));
            }
            prefix.pop();
            return;
        }
        for b in from..=t - (k - 1 - j) {
            prefix.push(b);
            walk(sim, j + 1, b + 1, prefix, best);
            prefix.pop();
        }
    }
    let mut best = None;
    walk(sim, 0, 1, &mut Vec::new(), &mut best);
    best.expect("at least one segmentation").1
}

/// Random `K × T` matrix. With `integer` set, entries are small integers so
/// that ties are common and sums are exact.
pub fn random_similarity(rng: &mut ChaCha8Rng, k: usize, t: usize, integer: bool) -> SimilarityMatrix {
    let values = (0..k * t)
        .map(|_| {
            if integer {
                rng.gen_range(-2i32..=2) as f64
            } else {
                rng.gen_range(-1.0..1.0)
            }
        })
        .collect();
    SimilarityMatrix::new(k, t, values).unwrap()
}

/// Relative error `‖numeric − analytic‖ / max(‖numeric‖, ‖analytic‖)` of
/// the casil_loss gradient per parameter group, using central differences
/// with step `1e-5`. The flag says whether the analytic gradient is nonzero.
pub fn gradient_errors(kind: ActionKind) -> Vec<(String, f64, bool)> {
    use casil::model::{Mode, ModelBundle};
    use casil::training::{casil_loss, casil_loss_with_grads, chunk_segments, LossWeights};

    let mut bundle = ModelBundle::new(tiny_spec(kind), tiny_config(), Mode::Casil).unwrap();
    let data = tiny_data(kind, 5);
    let chunks = chunk_segments(&data.segmented, bundle.config.truncation);
    let weights = LossWeights {
        epsilon: 0.7,
        termination: 1.3,
    };
    let (_, grads) = casil_loss_with_grads(&bundle, &data, &chunks, weights).unwrap();
    let h = 1e-5;
    let mut out = Vec::new();
    for (group, ids) in bundle.groups() {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for id in ids {
            for j in 0..bundle.params.get(id).len() {
                let orig = bundle.params.get(id).data[j];
                bundle.params.get_mut(id).data[j] = orig + h;
                let up = casil_loss(&bundle, &data, &chunks, weights).unwrap().total;
                bundle.params.get_mut(id).data[j] = orig - h;
                let down = casil_loss(&bundle, &data, &chunks, weights).unwrap().total;
                bundle.params.get_mut(id).data[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).data[j];
                diff2 += (numeric - analytic).powi(2);
                a2 += analytic * analytic;
                n2 += numeric * numeric;
            }
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12);
        out.push((group, rel, a2 > 0.0));
    }
    out
}

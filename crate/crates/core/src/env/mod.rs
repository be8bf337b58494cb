//! Synthetic worlds with scripted experts.

pub mod corridor;
pub mod stage;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::CaptionedObservation;
use crate::dataset::{Dataset, Manifest};
use crate::error::{invalid, Error, Result};
use crate::model::TaskSpec;
use crate::types::{Action, ActionKind, CognitivePrior, Observation, Step, TaskGoal, Trajectory};

pub use corridor::CorridorWorld;
pub use stage::{StageTask, StageWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Self::Easy),
            "medium" => Ok(Self::Medium),
            "hard" => Ok(Self::Hard),
            other => Err(invalid(format!("unknown difficulty {other:?}"))),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Easy => "easy",
            Self::Medium => "medium",
            Self::Hard => "hard",
        })
    }
}

/// Which world to build. Written as `corridor` or `stage-K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EnvKind {
    Stage { stages: usize },
    Corridor,
}

impl EnvKind {
    pub fn task_spec(&self) -> Result<TaskSpec> {
        match *self {
            EnvKind::Stage { stages } => {
                let task = StageTask::with_stages(stages)?;
                Ok(TaskSpec {
                    task: task.name.clone(),
                    goal: task.goal.clone(),
                    prior: task.prior(),
                    obs_dim: task.obs_dim(),
                    action_dim: stage::ACTIONS,
                    action_kind: ActionKind::Discrete,
                })
            }
            EnvKind::Corridor => Ok(TaskSpec {
                task: "corridor".into(),
                goal: corridor::GOAL.into(),
                prior: corridor::prior(),
                obs_dim: corridor::OBS_DIM,
                action_dim: corridor::ACTION_DIM,
                action_kind: ActionKind::Continuous,
            }),
        }
    }

    pub fn max_steps(&self) -> Result<usize> {
        match *self {
            EnvKind::Stage { stages } => Ok(StageTask::with_stages(stages)?.max_steps),
            EnvKind::Corridor => Ok(corridor::MAX_STEPS),
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "corridor" {
            return Ok(Self::Corridor);
        }
        let stages = s
            .strip_prefix("stage-")
            .and_then(|k| k.parse::<usize>().ok())
            .ok_or_else(|| invalid(format!("unknown environment {s:?} (expected corridor or stage-K)")))?;
        StageTask::with_stages(stages)?;
        Ok(Self::Stage { stages })
    }
}

impl TryFrom<String> for EnvKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EnvKind> for String {
    fn from(k: EnvKind) -> String {
        k.to_string()
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvKind::Stage { stages } => write!(f, "stage-{stages}"),
            EnvKind::Corridor => f.write_str("corridor"),
        }
    }
}

/// Outcome of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// Metres travelled along the corridor, or stages completed.
    pub progress: f64,
    pub steps: usize,
    pub collision: bool,
}

/// A live world of any kind.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum World {
    Stage(StageWorld),
    Corridor(CorridorWorld),
}

impl World {
    pub fn observe(&self) -> Observation {
        match self {
            World::Stage(w) => w.observe(),
            World::Corridor(w) => w.observe(),
        }
    }

    pub fn step(&mut self, action: &Action) {
        match self {
            World::Stage(w) => {
                w.step(action);
            }
            World::Corridor(w) => {
                w.step(action);
            }
        }
    }

    pub fn done(&self) -> bool {
        match self {
            World::Stage(w) => w.done(),
            World::Corridor(w) => w.done(),
        }
    }

    pub fn result(&self) -> EpisodeResult {
        match self {
            World::Stage(w) => EpisodeResult {
                success: w.status == stage::StageStatus::Success,
                progress: w.stage as f64,
                steps: w.steps,
                collision: false,
            },
            World::Corridor(w) => EpisodeResult {
                success: w.status == corridor::CorridorStatus::Success,
                progress: w.progress,
                steps: w.steps,
                collision: w.status == corridor::CorridorStatus::Collision,
            },
        }
    }

    pub fn expert_action(&mut self) -> Action {
        match self {
            World::Stage(w) => w.expert_action(),
            World::Corridor(w) => w.expert_action(),
        }
    }

    /// The expert's current phase (stage or section index).
    pub fn expert_phase(&self) -> usize {
        match self {
            World::Stage(w) => w.stage,
            World::Corridor(w) => w.phase,
        }
    }

    /// What the world executes while the expert is being recorded.
    pub fn demo_perturbation(&mut self, action: &Action) -> Action {
        match self {
            World::Stage(_) => action.clone(),
            World::Corridor(w) => w.demo_perturbation(action),
        }
    }

    pub fn caption(&self, rng: &mut ChaCha8Rng) -> String {
        match self {
            World::Stage(w) => w.caption(rng),
            World::Corridor(w) => w.caption(rng),
        }
    }

    pub fn max_steps(&self) -> usize {
        match self {
            World::Stage(w) => w.task.max_steps,
            World::Corridor(_) => corridor::MAX_STEPS,
        }
    }
}

/// Deterministic world for `(kind, difficulty, seed)`.
pub fn make_env(kind: EnvKind, difficulty: Difficulty, seed: u64) -> Result<World> {
    match kind {
        EnvKind::Stage { stages } => Ok(World::Stage(StageWorld::new(StageTask::with_stages(stages)?, seed))),
        EnvKind::Corridor => Ok(World::Corridor(CorridorWorld::new(difficulty, seed))),
    }
}

/// An expert demonstration with its hidden phase boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub trajectory: Trajectory,
    pub boundaries: Vec<usize>,
    pub seed: u64,
}

/// Runs the scripted expert to the end of an episode.
pub fn scripted_expert(world: &mut World, goal: &TaskGoal) -> Result<Demonstration> {
    let mut steps = Vec::new();
    let mut boundaries = Vec::new();
    while !world.done() {
        let obs = world.observe();
        let phase = world.expert_phase();
        let action = world.expert_action();
        let executed = world.demo_perturbation(&action);
        world.step(&executed);
        steps.push(Step { obs, action });
        if world.expert_phase() != phase {
            boundaries.push(steps.len());
        }
    }
    if !world.result().success {
        return Err(Error::Generation("expert did not complete the episode".into()));
    }
    if boundaries.last() != Some(&steps.len()) {
        boundaries.push(steps.len());
    }
    Ok(Demonstration {
        trajectory: Trajectory::new(goal.clone(), steps)?,
        boundaries,
        seed: 0,
    })
}

/// Seed of the `i`-th demonstration world for a generation seed.
pub fn demo_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64) & 0x0000_FFFF_FFFF_FFFF
}

/// Evaluation worlds draw from a range no demonstration seed can reach.
pub fn eval_seed(seed: u64, i: usize) -> u64 {
    (1u64 << 56) | (seed.wrapping_mul(1_000_003).wrapping_add(i as u64) & 0x0000_FFFF_FFFF_FFFF)
}

/// Worlds used for encoder pre-training captions.
pub fn caption_seed(seed: u64, i: usize) -> u64 {
    (2u64 << 56) | (seed.wrapping_mul(1_000_003).wrapping_add(i as u64) & 0x0000_FFFF_FFFF_FFFF)
}

/// Dataset plus the expert's boundaries for each trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub dataset: Dataset,
    pub boundaries: Vec<Vec<usize>>,
    pub seeds: Vec<u64>,
}

const MAX_RESEEDS: u64 = 20;

pub fn generate_demos(kind: EnvKind, difficulty: Difficulty, n: usize, seed: u64) -> Result<DemoSet> {
    if n == 0 {
        return Err(invalid("need at least one demonstration"));
    }
    let spec = kind.task_spec()?;
    let goal = TaskGoal::new(spec.goal.clone())?;
    let mut trajectories = Vec::with_capacity(n);
    let mut boundaries = Vec::with_capacity(n);
    let mut seeds = Vec::with_capacity(n);
    for i in 0..n {
        let base = demo_seed(seed, i);
        let mut made = None;
        for retry in 0..MAX_RESEEDS {
            let s = base ^ (retry << 48);
            let mut world = make_env(kind, difficulty, s)?;
            if let Ok(mut d) = scripted_expert(&mut world, &goal) {
                d.seed = s;
                made = Some(d);
                break;
            }
        }
        let d = made.ok_or_else(|| Error::Generation(format!("no solvable world for demonstration {i}")))?;
        trajectories.push(d.trajectory);
        boundaries.push(d.boundaries);
        seeds.push(d.seed);
    }
    let manifest = Manifest::new(
        spec.task.clone(),
        spec.goal.clone(),
        &spec.prior,
        spec.obs_dim,
        spec.action_dim,
        spec.action_kind,
        n,
    );
    Ok(DemoSet {
        dataset: Dataset { manifest, trajectories },
        boundaries,
        seeds,
    })
}

/// Captioned observations from expert episodes in worlds reserved for
/// pre-training. Observations showing a decision point are kept; the rest
/// are subsampled so they make up about half of the set.
pub fn caption_pairs(kind: EnvKind, difficulty: Difficulty, n: usize, seed: u64) -> Result<Vec<CaptionedObservation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut salient = Vec::new();
    let mut plain = Vec::new();
    let mut i = 0;
    while salient.len() + plain.len().min(salient.len()) < n && i < 100 * n + 100 {
        let mut world = make_env(kind, difficulty, caption_seed(seed, i))?;
        i += 1;
        while !world.done() {
            let obs = world.observe();
            let caption = world.caption(&mut rng);
            let pair = CaptionedObservation { obs, caption };
            if is_salient(&world) {
                salient.push(pair);
            } else {
                plain.push(pair);
            }
            let a = world.expert_action();
            world.step(&a);
        }
    }
    plain.shuffle(&mut rng);
    plain.truncate(salient.len().max(n / 2));
    let mut all = salient;
    all.extend(plain);
    all.shuffle(&mut rng);
    all.truncate(n);
    Ok(all)
}

fn is_salient(world: &World) -> bool {
    match world {
        World::Stage(w) => !w.pressed_last && w.objects.contains(&w.effector),
        World::Corridor(w) => w.on_marker(),
    }
}

/// Expert boundaries of one demonstration, kept apart from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryRecord {
    pub index: usize,
    pub seed: u64,
    pub boundaries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySidecar {
    pub format_version: u32,
    pub task: String,
    pub trajectories: Vec<BoundaryRecord>,
}

impl DemoSet {
    pub fn sidecar(&self) -> BoundarySidecar {
        BoundarySidecar {
            format_version: crate::dataset::FORMAT_VERSION,
            task: self.dataset.manifest.task.clone(),
            trajectories: self
                .boundaries
                .iter()
                .zip(&self.seeds)
                .enumerate()
                .map(|(index, (b, &seed))| BoundaryRecord {
                    index,
                    seed,
                    boundaries: b.clone(),
                })
                .collect(),
        }
    }
}

impl BoundarySidecar {
    pub fn boundaries(&self) -> Vec<Vec<usize>> {
        self.trajectories.iter().map(|r| r.boundaries.clone()).collect()
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| invalid(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: e.column(),
            message: e.to_string(),
        })?;
        if s.format_version != crate::dataset::FORMAT_VERSION {
            return Err(Error::Version {
                found: s.format_version,
                expected: crate::dataset::FORMAT_VERSION,
            });
        }
        if s.trajectories.iter().enumerate().any(|(i, r)| r.index != i) {
            return Err(invalid("boundary records are not in index order"));
        }
        Ok(s)
    }
}

/// Builds a bundle's task description for `kind`.
pub fn task_prior(kind: EnvKind) -> Result<CognitivePrior> {
    Ok(kind.task_spec()?.prior)
}

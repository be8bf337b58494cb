//! Grid table-top task: visit objects in a fixed order and press each one.
//!
//! The order revisits objects, and nothing in the observation says which
//! stage is active, so acting well needs to know how far the task has got.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{Action, CognitivePrior, Observation};

pub const GRID: i32 = 10;
pub const ACTIONS: usize = 5;
pub const INTERACT: usize = 4;

const OBJECT_NAMES: [&str; 5] = ["red cube", "blue ball", "green ring", "yellow cone", "white box"];

/// Stage order and limits of one task variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTask {
    pub name: String,
    pub goal: String,
    pub objects: usize,
    /// Object pressed at each stage.
    pub order: Vec<usize>,
    pub max_steps: usize,
}

impl StageTask {
    /// Built-in variants keyed by stage count: 3, 4, 7 or 8.
    pub fn with_stages(k: usize) -> Result<Self> {
        let (order, max_steps): (Vec<usize>, usize) = match k {
            3 => (vec![0, 1, 0], 200),
            4 => (vec![0, 1, 0, 2], 250),
            7 => (vec![0, 1, 2, 0, 3, 1, 2], 300),
            8 => (vec![0, 1, 2, 0, 3, 1, 2, 3], 400),
            other => return Err(invalid(format!("no stage task with {other} stages (use 3, 4, 7 or 8)"))),
        };
        let objects = order.iter().max().unwrap() + 1;
        Ok(Self {
            name: format!("stage-{k}"),
            goal: "Press the objects on the table in the instructed order.".into(),
            objects,
            order,
            max_steps,
        })
    }

    pub fn stages(&self) -> usize {
        self.order.len()
    }

    pub fn obs_dim(&self) -> usize {
        3 * self.objects + 1
    }

    pub fn object_name(&self, j: usize) -> &'static str {
        OBJECT_NAMES[j]
    }

    /// One description per stage, in order.
    pub fn prior(&self) -> CognitivePrior {
        let mut seen = vec![false; self.objects];
        let texts: Vec<String> = self
            .order
            .iter()
            .map(|&j| {
                let verb = if seen[j] { "Return to" } else { "Reach" };
                seen[j] = true;
                format!("{verb} the {} and press it.", OBJECT_NAMES[j])
            })
            .collect();
        CognitivePrior::new(texts).expect("non-empty prior")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Running,
    Success,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageWorld {
    pub task: StageTask,
    pub objects: Vec<(i32, i32)>,
    pub effector: (i32, i32),
    pub stage: usize,
    pub steps: usize,
    pub pressed_last: bool,
    /// Presses on an object other than the current one; they change nothing.
    pub wrong_presses: usize,
    pub status: StageStatus,
}

fn manhattan(a: (i32, i32), b: (i32, i32)) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

impl StageWorld {
    pub fn new(task: StageTask, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells: Vec<(i32, i32)> = Vec::new();
        while cells.len() < task.objects + 1 {
            let c = (rng.gen_range(0..GRID), rng.gen_range(0..GRID));
            if cells.iter().all(|&o| manhattan(o, c) >= 3) {
                cells.push(c);
            }
        }
        let effector = cells.pop().unwrap();
        Self {
            task,
            objects: cells,
            effector,
            stage: 0,
            steps: 0,
            pressed_last: false,
            wrong_presses: 0,
            status: StageStatus::Running,
        }
    }

    /// Per object: sign of the x and y offsets and whether the effector is
    /// on it; then whether the last action was a press.
    pub fn observe(&self) -> Observation {
        let mut f = Vec::with_capacity(self.task.obs_dim());
        for &(x, y) in &self.objects {
            let (dx, dy) = (x - self.effector.0, y - self.effector.1);
            f.push(dx.signum() as f64);
            f.push(dy.signum() as f64);
            f.push(if dx == 0 && dy == 0 { 1.0 } else { 0.0 });
        }
        f.push(if self.pressed_last { 1.0 } else { 0.0 });
        Observation::new(f)
    }

    pub fn done(&self) -> bool {
        self.status != StageStatus::Running
    }

    /// Applies a one-hot (or score) action; the largest entry is taken.
    pub fn step(&mut self, action: &Action) -> StageStatus {
        if self.done() {
            return self.status;
        }
        let a = action.argmax();
        self.pressed_last = a == INTERACT;
        match a {
            0 => self.effector.0 = (self.effector.0 + 1).min(GRID - 1),
            1 => self.effector.0 = (self.effector.0 - 1).max(0),
            2 => self.effector.1 = (self.effector.1 + 1).min(GRID - 1),
            3 => self.effector.1 = (self.effector.1 - 1).max(0),
            _ => {
                if let Some(j) = self.objects.iter().position(|&o| o == self.effector) {
                    if j == self.task.order[self.stage] {
                        self.stage += 1;
                        if self.stage == self.task.stages() {
                            self.status = StageStatus::Success;
                        }
                    } else {
                        self.wrong_presses += 1;
                    }
                }
            }
        }
        self.steps += 1;
        if self.status == StageStatus::Running && self.steps >= self.task.max_steps {
            self.status = StageStatus::Timeout;
        }
        self.status
    }

    /// The scripted expert's action: close the x gap to the current object,
    /// then the y gap, then press. Passing over other objects is harmless.
    pub fn expert_action(&self) -> Action {
        let target = self.objects[self.task.order[self.stage.min(self.task.stages() - 1)]];
        let (dx, dy) = (target.0 - self.effector.0, target.1 - self.effector.1);
        if dx == 0 && dy == 0 {
            return Action::one_hot(INTERACT, ACTIONS);
        }
        let along_x = if dx > 0 { 0 } else { 1 };
        let along_y = if dy > 0 { 2 } else { 3 };
        let a = if dx != 0 { along_x } else { along_y };
        Action::one_hot(a, ACTIONS)
    }

    /// Short description of what the current observation shows.
    pub fn caption(&self, rng: &mut ChaCha8Rng) -> String {
        const ARRIVE: [&str; 4] = ["reach", "return to", "arrive at", "stand on"];
        const MOVE: [&str; 4] = [
            "move across the table",
            "travel over the empty table",
            "go between objects",
            "moving with nothing below",
        ];
        const AFTER: [&str; 3] = ["finished a press", "just pressed something", "press complete"];
        if self.pressed_last {
            return AFTER[rng.gen_range(0..AFTER.len())].to_string();
        }
        match self.objects.iter().position(|&o| o == self.effector) {
            Some(j) => format!("{} the {}", ARRIVE[rng.gen_range(0..ARRIVE.len())], OBJECT_NAMES[j]),
            None => MOVE[rng.gen_range(0..MOVE.len())].to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_completes_every_variant() {
        for k in [3, 4, 7, 8] {
            let task = StageTask::with_stages(k).unwrap();
            for seed in 0..50 {
                let mut w = StageWorld::new(task.clone(), seed);
                while !w.done() {
                    let a = w.expert_action();
                    w.step(&a);
                }
                assert_eq!(w.status, StageStatus::Success, "k={k} seed={seed}");
            }
        }
    }

    #[test]
    fn prior_texts_are_distinct() {
        for k in [3, 4, 7, 8] {
            let p = StageTask::with_stages(k).unwrap().prior();
            assert_eq!(p.len(), k);
            let mut d = p.descriptions().to_vec();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), k);
        }
    }
}

//! Closed-loop control: choose options online and act with the policy.

use crate::alignment::{cosine_similarity, embed_observation};
use crate::autodiff::Tensor;
use crate::env::{EpisodeResult, World};
use crate::error::{invalid, Result};
use crate::generator::{init_chain_memory, should_switch, ChainMemory};
use crate::model::{Mode, ModelBundle};
use crate::policy::greedy_action;
use crate::types::{Action, Observation};

/// Stateful controller for one episode.
#[derive(Debug, Clone)]
pub struct Agent<'a> {
    bundle: &'a ModelBundle,
    goal: Tensor,
    prior: Tensor,
    mem: ChainMemory,
    /// Observations since the current skill started.
    window: Vec<Observation>,
    skill: Option<usize>,
    steps_in_skill: usize,
    trace: Vec<usize>,
}

impl<'a> Agent<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Result<Self> {
        if bundle.mode == Mode::NoCognition && bundle.switch_thresholds.len() != bundle.skill_count() {
            return Err(invalid("no-cognition bundle has no switch thresholds; train it first"));
        }
        Ok(Self {
            bundle,
            goal: bundle.goal_embedding()?,
            prior: bundle.prior_embeddings()?,
            mem: init_chain_memory(bundle.config.memory_dim),
            window: Vec::new(),
            skill: None,
            steps_in_skill: 0,
            trace: Vec::new(),
        })
    }

    /// Skill active at each step so far.
    pub fn skill_trace(&self) -> &[usize] {
        &self.trace
    }

    pub fn current_skill(&self) -> Option<usize> {
        self.skill
    }

    /// Greedy action for `obs`; updates the option state afterwards.
    pub fn act(&mut self, obs: &Observation) -> Result<Action> {
        let b = self.bundle;
        let k = b.skill_count();
        if obs.dim() != b.spec.obs_dim {
            return Err(invalid(format!(
                "observation has {} features, the model expects {}",
                obs.dim(),
                b.spec.obs_dim
            )));
        }
        if self.skill.is_none() {
            let first = match b.mode {
                Mode::Casil | Mode::Hbc => {
                    let out = b.generator.generate_option(
                        &b.params,
                        &b.obs,
                        &self.goal,
                        &self.prior,
                        std::slice::from_ref(obs),
                        &self.mem,
                        1,
                    )?;
                    crate::types::argmax(&out.probs)
                }
                Mode::NoCognition | Mode::Bc => 0,
            };
            self.begin(first)?;
        }
        let skill = self.skill.expect("skill chosen above");
        self.window.push(obs.clone());
        self.steps_in_skill += 1;
        self.trace.push(skill);

        let window = &self.window[self.window.len().saturating_sub(b.config.truncation)..];
        let code = b.mode.hierarchical().then(|| b.params.get(b.codes).row(skill).to_vec());
        let dist = b.policy.predict_action(&b.params, &self.goal, window, code.as_deref())?;
        let action = greedy_action(&dist);

        let horizon = b.config.max_skill_horizon;
        let next = match b.mode {
            Mode::Casil | Mode::Hbc => {
                let out = b.generator.generate_option(
                    &b.params,
                    &b.obs,
                    &self.goal,
                    &self.prior,
                    window,
                    &self.mem,
                    self.steps_in_skill,
                )?;
                should_switch(out.termination, self.steps_in_skill, horizon).then(|| crate::types::argmax(&out.probs))
            }
            Mode::NoCognition => {
                let e = embed_observation(&b.obs, &b.params, obs)?;
                let s = cosine_similarity(&e, self.prior.row(skill))?;
                let fire = s >= b.switch_thresholds[skill] || self.steps_in_skill >= horizon;
                (fire && skill + 1 < k).then_some(skill + 1)
            }
            Mode::Bc => None,
        };
        if let Some(n) = next {
            self.begin(n)?;
        }
        Ok(action)
    }

    fn begin(&mut self, skill: usize) -> Result<()> {
        let b = self.bundle;
        if b.mode == Mode::Casil || b.mode == Mode::Hbc {
            let option = b.generator.option(&b.params, skill);
            self.mem = b.generator.push_option(&b.params, &self.mem, &option)?;
        }
        self.skill = Some(skill);
        self.window.clear();
        self.steps_in_skill = 0;
        Ok(())
    }
}

/// An evaluated episode and the skills the agent used.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub result: EpisodeResult,
    pub skills: Vec<usize>,
}

/// Runs `bundle` in `world` until the episode ends.
pub fn run_episode(bundle: &ModelBundle, world: &mut World) -> Result<Episode> {
    let mut agent = Agent::new(bundle)?;
    while !world.done() {
        let obs = world.observe();
        let a = agent.act(&obs)?;
        world.step(&a);
    }
    Ok(Episode {
        result: world.result(),
        skills: agent.trace,
    })
}

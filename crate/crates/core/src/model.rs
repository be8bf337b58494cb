//! The full parameter bundle: encoders, skill code table, generator and policy.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{prior_embeddings, ObsEncoder, TextEncoder};
use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::generator::{CognitionGenerator, GeneratorDims};
use crate::nn::{normal, Graph, ParamId, ParamSet};
use crate::policy::{Policy, PolicyDims};
use crate::types::{ActionKind, CognitivePrior, RunConfig};

/// Training and rollout variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Full method: co-trained alignment, generator and termination head.
    Casil,
    /// Flat behaviour cloning with a constant null skill code.
    Bc,
    /// Two-level model trained on uniform splits instead of alignment, with
    /// no access to the prior's descriptions.
    Hbc,
    /// One frozen alignment pass and no generator loss.
    NoCognition,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Casil, Mode::NoCognition, Mode::Hbc, Mode::Bc];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Casil => "casil",
            Mode::Bc => "bc",
            Mode::Hbc => "hbc",
            Mode::NoCognition => "no-cognition",
        }
    }

    /// Whether the policy receives skill codes.
    pub fn hierarchical(self) -> bool {
        self != Mode::Bc
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "casil" => Ok(Mode::Casil),
            "bc" => Ok(Mode::Bc),
            "hbc" | "h-bc" => Ok(Mode::Hbc),
            "no-cognition" | "no_cognition" => Ok(Mode::NoCognition),
            other => Err(invalid(format!("unknown mode {other:?}"))),
        }
    }
}

/// Task-level facts a bundle is built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: String,
    pub goal: String,
    pub prior: CognitivePrior,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_kind: ActionKind,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: RunConfig,
    pub spec: TaskSpec,
    pub mode: Mode,
    pub params: ParamSet,
    pub text: TextEncoder,
    pub obs: ObsEncoder,
    pub codes: ParamId,
    pub generator: CognitionGenerator,
    pub policy: Policy,
    /// Per-skill similarity thresholds used by the no-cognition rollout.
    pub switch_thresholds: Vec<f64>,
    pub step: usize,
    /// Dropout stream; training continues from wherever it was left.
    pub rng: ChaCha8Rng,
}

impl ModelBundle {
    pub fn new(spec: TaskSpec, config: RunConfig, mode: Mode) -> Result<Self> {
        config.validate()?;
        let k = spec.prior.len();
        if config.skill_count != 0 && config.skill_count != k {
            return Err(Error::Config(format!(
                "skill_count {} does not match a prior of {k} descriptions",
                config.skill_count
            )));
        }
        if spec.obs_dim == 0 || spec.action_dim == 0 {
            return Err(invalid("observation and action dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let mut ps = ParamSet::new();
        let d = config.embedding_dim;
        let text = TextEncoder::new(&mut ps, "text", config.token_buckets, d, &mut rng);
        let obs = ObsEncoder::new(&mut ps, "obs", spec.obs_dim, d, &mut rng);
        let codes = ps.add("skill.codes", normal(k, config.skill_embedding_dim, 1.0, &mut rng));
        let generator = CognitionGenerator::new(
            &mut ps,
            "gen",
            GeneratorDims {
                obs_dim: spec.obs_dim,
                skills: k,
                embedding_dim: d,
                skill_embedding_dim: config.skill_embedding_dim,
                memory_dim: config.memory_dim,
                model_dim: config.model_dim,
                heads: config.attention_heads,
                max_skill_horizon: config.max_skill_horizon,
            },
            codes,
            &mut rng,
        );
        let policy = Policy::new(
            &mut ps,
            "policy",
            PolicyDims {
                obs_dim: spec.obs_dim,
                action_dim: spec.action_dim,
                action_kind: spec.action_kind,
                embedding_dim: d,
                skill_embedding_dim: config.skill_embedding_dim,
                model_dim: config.model_dim,
                heads: config.attention_heads,
                window: config.truncation,
            },
            &mut rng,
        );
        Ok(Self {
            spec,
            mode,
            params: ps,
            text,
            obs,
            codes,
            generator,
            policy,
            switch_thresholds: Vec::new(),
            step: 0,
            rng: {
                let mut r = ChaCha8Rng::seed_from_u64(config.seed);
                r.set_stream(3);
                r
            },
            config,
        })
    }

    pub fn skill_count(&self) -> usize {
        self.spec.prior.len()
    }

    /// Blocks that belong to the text or observation encoder.
    pub fn encoder_mask(&self) -> Vec<bool> {
        self.params
            .blocks()
            .iter()
            .map(|b| b.name.starts_with("text.") || b.name.starts_with("obs."))
            .collect()
    }

    /// Parameter groups by name prefix, in block order.
    pub fn groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut out: Vec<(String, Vec<ParamId>)> = Vec::new();
        for (id, b) in self.params.ids().zip(self.params.blocks()) {
            let group = b.name.split('.').next().unwrap_or("").to_string();
            match out.iter_mut().find(|(g, _)| *g == group) {
                Some((_, ids)) => ids.push(id),
                None => out.push((group, vec![id])),
            }
        }
        out
    }

    pub fn goal_embedding(&self) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let v = self.text.forward(&mut g, &[self.spec.goal.as_str()])?;
        Ok(g.value(v).clone())
    }

    /// Description embeddings as the generator sees them. H-BC has no
    /// cognitive prior, so it gets zeros.
    pub fn prior_embeddings(&self) -> Result<Tensor> {
        if self.mode == Mode::Hbc {
            return Ok(Tensor::zeros(self.skill_count(), self.config.embedding_dim));
        }
        prior_embeddings(&self.text, &self.params, &self.spec.prior)
    }
}

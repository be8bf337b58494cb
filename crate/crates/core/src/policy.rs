//! The low-level skill-conditioned policy: a one-block causal transformer over
//! the observations seen since the active skill started.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{normal, Graph, Linear, MultiHeadAttention, ParamId, ParamSet};
use crate::types::{Action, ActionKind, Observation};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_kind: ActionKind,
    pub embedding_dim: usize,
    pub skill_embedding_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub window: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Policy {
    pub dims: PolicyDims,
    pub input: Linear,
    pub goal: Linear,
    pub skill: ParamId,
    /// Feature-wise gain on the input embedding, one row per skill dimension.
    pub skill_gain: ParamId,
    pub position: ParamId,
    pub attention: MultiHeadAttention,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub head: Linear,
    pub log_std: Option<Linear>,
}

/// Per-position action distribution parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub enum HeadVars {
    Logits(Var),
    Gaussian { mean: Var, log_std: Var },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionDistribution {
    Categorical { probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl ActionDistribution {
    pub fn dim(&self) -> usize {
        match self {
            Self::Categorical { probs } => probs.len(),
            Self::Gaussian { mean, .. } => mean.len(),
        }
    }
}

impl Policy {
    pub fn new(ps: &mut ParamSet, name: &str, dims: PolicyDims, rng: &mut ChaCha8Rng) -> Self {
        let m = dims.model_dim;
        let log_std = match dims.action_kind {
            ActionKind::Continuous => Some(Linear::new(ps, &format!("{name}.log_std"), m, dims.action_dim, rng)),
            ActionKind::Discrete => None,
        };
        Self {
            dims,
            input: Linear::new(ps, &format!("{name}.input"), dims.obs_dim, m, rng),
            goal: Linear::new(ps, &format!("{name}.goal"), dims.embedding_dim, m, rng),
            skill: ps.add(format!("{name}.skill"), crate::nn::xavier(dims.skill_embedding_dim, m, rng)),
            skill_gain: ps.add(format!("{name}.skill_gain"), crate::nn::xavier(dims.skill_embedding_dim, m, rng)),
            position: ps.add(format!("{name}.position"), normal(dims.window, m, 0.1, rng)),
            attention: MultiHeadAttention::new(ps, &format!("{name}.attention"), m, m, m, dims.heads, rng),
            ff_in: Linear::new(ps, &format!("{name}.ff_in"), m, 2 * m, rng),
            ff_out: Linear::new(ps, &format!("{name}.ff_out"), 2 * m, m, rng),
            head: Linear::new(ps, &format!("{name}.head"), m, dims.action_dim, rng),
            log_std,
        }
    }

    /// Forward pass over `n ≤ window` observations (`n × obs_dim`). `goal`
    /// is `1 × d`; `skill` is `1 × e` (a zero row for the unconditioned
    /// policy). Position `j` only sees positions `0..=j`.
    pub fn forward(&self, g: &mut Graph, obs: Var, goal: Var, skill: Var) -> HeadVars {
        let n = g.value(obs).rows;
        let skills = g.tape.gather_rows(skill, &vec![0; n]);
        self.forward_segments(g, obs, goal, skills, &[(0, n)])
    }

    /// Batched forward pass: rows of `obs` are split into independent
    /// windows `(start, len)` with `len ≤ window`, and `skill` holds one
    /// code per row.
    pub fn forward_segments(&self, g: &mut Graph, obs: Var, goal: Var, skill: Var, segments: &[(usize, usize)]) -> HeadVars {
        let n = g.value(obs).rows;
        let mut positions = vec![0; n];
        for &(start, len) in segments {
            assert!(len >= 1 && len <= self.dims.window, "policy window of {len} steps");
            for (j, p) in positions[start..start + len].iter_mut().enumerate() {
                *p = j;
            }
        }
        let x = self.input.forward(g, obs);
        let gp = self.goal.forward(g, goal);
        let wg = g.p(self.skill_gain);
        let gain = g.tape.matmul(skill, wg);
        let gated = g.tape.mul(x, gain);
        let x = g.tape.add(x, gated);
        let ws = g.p(self.skill);
        let sp = g.tape.matmul(skill, ws);
        let x = g.tape.add(x, sp);
        let x = g.tape.add_row(x, gp);
        let pos = g.p(self.position);
        let pos = g.tape.gather_rows(pos, &positions);
        let x = g.tape.add(x, pos);
        let att = self.attention.forward_segments(g, x, segments);
        let att = g.dropout(att);
        let x = g.tape.add(x, att);
        let h = self.ff_in.forward(g, x);
        let h = g.tape.tanh(h);
        let h = self.ff_out.forward(g, h);
        let h = g.dropout(h);
        let x = g.tape.add(x, h);
        let out = self.head.forward(g, x);
        match self.log_std {
            None => HeadVars::Logits(out),
            Some(ls) => {
                let raw = ls.forward(g, x);
                let log_std = g.tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
                HeadVars::Gaussian { mean: out, log_std }
            }
        }
    }

    /// Summed negative log-likelihood of `actions` (one row per position).
    pub fn nll(&self, g: &mut Graph, head: HeadVars, actions: &[Action]) -> Var {
        match head {
            HeadVars::Logits(z) => {
                let lp = g.tape.log_softmax(z);
                let idx: Vec<usize> = actions.iter().map(Action::argmax).collect();
                let picked = g.tape.pick_per_row(lp, &idx);
                let s = g.tape.sum(picked);
                g.tape.scale(s, -1.0)
            }
            HeadVars::Gaussian { mean, log_std } => {
                let n = actions.len();
                let d = self.dims.action_dim;
                let rows: Vec<Vec<f64>> = actions.iter().map(|a| a.values.clone()).collect();
                let target = g.constant(Tensor::from_rows(&rows));
                let diff = g.tape.sub(target, mean);
                let neg = g.tape.scale(log_std, -1.0);
                let inv = g.tape.exp(neg);
                let z = g.tape.mul(diff, inv);
                let z2 = g.tape.mul(z, z);
                let quad = g.tape.sum(z2);
                let quad = g.tape.scale(quad, 0.5);
                let logs = g.tape.sum(log_std);
                let s = g.tape.add(quad, logs);
                let c = g.constant(Tensor::from_vec(1, 1, vec![HALF_LN_2PI * (n * d) as f64]));
                g.tape.add(s, c)
            }
        }
    }

    /// Distributions for every position of `window`.
    pub fn predict_sequence(
        &self,
        params: &ParamSet,
        goal: &Tensor,
        window: &[Observation],
        skill_embedding: Option<&[f64]>,
    ) -> Result<Vec<ActionDistribution>> {
        if window.is_empty() {
            return Err(invalid("policy needs at least one observation"));
        }
        if window.iter().any(|o| o.dim() != self.dims.obs_dim) {
            return Err(invalid("observation dimension does not match the policy"));
        }
        let start = window.len().saturating_sub(self.dims.window);
        let window = &window[start..];
        let mut g = Graph::new(params);
        let rows: Vec<Vec<f64>> = window.iter().map(|o| o.features.clone()).collect();
        let obs = g.constant(Tensor::from_rows(&rows));
        let goal = g.constant(goal.clone());
        let e = self.dims.skill_embedding_dim;
        let skill = match skill_embedding {
            Some(v) if v.len() != e => return Err(invalid("skill embedding has the wrong size")),
            Some(v) => g.constant(Tensor::row_vector(v)),
            None => g.constant(Tensor::zeros(1, e)),
        };
        let head = self.forward(&mut g, obs, goal, skill);
        let n = window.len();
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            let dist = match head {
                HeadVars::Logits(z) => {
                    let row = g.value(z).row(j);
                    let lse = log_sum_exp(row);
                    ActionDistribution::Categorical {
                        probs: row.iter().map(|v| (v - lse).exp()).collect(),
                    }
                }
                HeadVars::Gaussian { mean, log_std } => ActionDistribution::Gaussian {
                    mean: g.value(mean).row(j).to_vec(),
                    std: g.value(log_std).row(j).iter().map(|v| v.exp()).collect(),
                },
            };
            let finite = match &dist {
                ActionDistribution::Categorical { probs } => probs.iter().all(|p| p.is_finite()),
                ActionDistribution::Gaussian { mean, std } => mean.iter().chain(std).all(|v| v.is_finite()),
            };
            if !finite {
                return Err(Error::Numeric {
                    stage: "policy head".into(),
                });
            }
            out.push(dist);
        }
        Ok(out)
    }

    /// Distribution for the last observation in `window`. Only the most
    /// recent `window` steps are used.
    pub fn predict_action(
        &self,
        params: &ParamSet,
        goal: &Tensor,
        window: &[Observation],
        skill_embedding: Option<&[f64]>,
    ) -> Result<ActionDistribution> {
        let mut all = self.predict_sequence(params, goal, window, skill_embedding)?;
        Ok(all.pop().expect("non-empty window"))
    }
}

/// Negative log-likelihood of one expert action.
pub fn action_nll(dist: &ActionDistribution, expert: &Action) -> Result<f64> {
    if dist.dim() != expert.dim() {
        return Err(invalid("action dimension does not match the distribution"));
    }
    match dist {
        ActionDistribution::Categorical { probs } => {
            let p = probs[expert.argmax()].max(f64::MIN_POSITIVE);
            Ok(-p.ln())
        }
        ActionDistribution::Gaussian { mean, std } => Ok(mean
            .iter()
            .zip(std)
            .zip(&expert.values)
            .map(|((m, s), a)| {
                let z = (a - m) / s;
                0.5 * z * z + s.ln() + HALF_LN_2PI
            })
            .sum()),
    }
}

/// Mean for a Gaussian, lowest-index argmax for a categorical.
pub fn greedy_action(dist: &ActionDistribution) -> Action {
    match dist {
        ActionDistribution::Categorical { probs } => Action::one_hot(crate::types::argmax(probs), probs.len()),
        ActionDistribution::Gaussian { mean, .. } => Action::new(mean.clone()),
    }
}

pub fn sample_action(dist: &ActionDistribution, rng: &mut ChaCha8Rng) -> Action {
    match dist {
        ActionDistribution::Categorical { probs } => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            Action::one_hot(pick, probs.len())
        }
        ActionDistribution::Gaussian { mean, std } => {
            let noise = normal(1, mean.len(), 1.0, rng);
            Action::new(mean.iter().zip(std).zip(&noise.data).map(|((m, s), z)| m + s * z).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_examples() {
        let certain = ActionDistribution::Categorical {
            probs: vec![0.0, 1.0, 0.0],
        };
        assert_eq!(action_nll(&certain, &Action::one_hot(1, 3)).unwrap(), 0.0);
        let uniform = ActionDistribution::Categorical { probs: vec![0.25; 4] };
        assert!((action_nll(&uniform, &Action::one_hot(2, 4)).unwrap() - 4f64.ln()).abs() < 1e-15);
        let g = ActionDistribution::Gaussian {
            mean: vec![0.3, -1.0, 2.0],
            std: vec![1.0; 3],
        };
        let v = action_nll(&g, &Action::new(vec![0.3, -1.0, 2.0])).unwrap();
        assert!((v - 3.0 * 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let z = [2.0f64, 2.0, 1.0];
        let lse = log_sum_exp(&z);
        let d = ActionDistribution::Categorical {
            probs: z.iter().map(|v| (v - lse).exp()).collect(),
        };
        assert_eq!(greedy_action(&d).argmax(), 0);
        let g = ActionDistribution::Gaussian {
            mean: vec![0.5, -0.25],
            std: vec![0.1, 3.0],
        };
        assert_eq!(greedy_action(&g).values, vec![0.5, -0.25]);
    }

    #[test]
    fn sampling_is_seeded() {
        use rand::SeedableRng;
        let d = ActionDistribution::Gaussian {
            mean: vec![0.0, 1.0],
            std: vec![0.5, 0.5],
        };
        let a = sample_action(&d, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_action(&d, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}

//! The high-level cognition generator: goal-modulated observation features,
//! a recurrent summary of the option chain, attention over the chain, and
//! heads for the next option and for terminating the current one.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{xavier, Glu, Graph, Linear, LstmCell, MultiHeadAttention, ParamId, ParamSet};
use crate::types::{Observation, SkillOption};

/// Shape of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorDims {
    pub obs_dim: usize,
    pub skills: usize,
    pub embedding_dim: usize,
    pub skill_embedding_dim: usize,
    pub memory_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub max_skill_horizon: usize,
}

/// Parameter handles for the generator. The skill code table is shared with
/// the policy and owned by the model bundle.
#[derive(Debug, Clone, Copy)]
pub struct CognitionGenerator {
    pub dims: GeneratorDims,
    pub codes: ParamId,
    pub input: Linear,
    pub film_gamma: Linear,
    pub film_beta: Linear,
    pub glu: Glu,
    pub lstm: LstmCell,
    pub query: Linear,
    pub attention: MultiHeadAttention,
    pub mix_window: ParamId,
    /// Applied to each row's own features, so the current step is not
    /// diluted by the window mean.
    pub mix_current: ParamId,
    pub mix_context: Linear,
    pub mix_elapsed: ParamId,
    /// Weight on each row's similarity to the active skill's description.
    pub mix_own: ParamId,
    pub classifier: Linear,
    pub termination: Linear,
}

/// Recurrent summary of the options chosen so far plus their embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMemory {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub skills: Vec<usize>,
}

impl ChainMemory {
    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }
}

/// Zero state, empty chain.
pub fn init_chain_memory(memory_dim: usize) -> ChainMemory {
    ChainMemory {
        hidden: vec![0.0; memory_dim],
        cell: vec![0.0; memory_dim],
        keys: Vec::new(),
        skills: Vec::new(),
    }
}

/// Next-option probabilities and the probability that the current option ends.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput {
    pub probs: Vec<f64>,
    pub termination: f64,
}

/// Switch when the termination head fires or the skill has run for the cap.
pub fn should_switch(termination_prob: f64, steps_in_current_skill: usize, max_skill_horizon: usize) -> bool {
    termination_prob > 0.5 || steps_in_current_skill >= max_skill_horizon
}

/// `γ(goal) ⊙ features + β(goal)` evaluated numerically.
pub fn fuse_goal(
    gamma: &Linear,
    beta: &Linear,
    params: &ParamSet,
    goal_embedding: &[f64],
    obs_features: &[f64],
) -> Result<Vec<f64>> {
    if goal_embedding.len() != gamma.input || obs_features.len() != gamma.output {
        return Err(invalid(format!(
            "fuse_goal expects a goal of {} and features of {}, got {} and {}",
            gamma.input,
            gamma.output,
            goal_embedding.len(),
            obs_features.len()
        )));
    }
    let mut g = Graph::new(params);
    let goal = g.constant(Tensor::row_vector(goal_embedding));
    let x = g.constant(Tensor::row_vector(obs_features));
    let y = film(&mut g, gamma, beta, goal, x);
    Ok(g.value(y).data.clone())
}

fn film(g: &mut Graph, gamma: &Linear, beta: &Linear, goal: Var, x: Var) -> Var {
    let gm = gamma.forward(g, goal);
    let bt = beta.forward(g, goal);
    let scaled = g.tape.mul_row(x, gm);
    g.tape.add_row(scaled, bt)
}

/// Embedding inputs that stay fixed for an episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeContext {
    /// `1 × d` goal embedding.
    pub goal: Var,
    /// `K × d` prior description embeddings.
    pub prior: Var,
}

impl CognitionGenerator {
    pub fn new(ps: &mut ParamSet, name: &str, dims: GeneratorDims, codes: ParamId, rng: &mut ChaCha8Rng) -> Self {
        let m = dims.model_dim;
        let film_gamma = Linear::with_values(
            ps,
            &format!("{name}.film_gamma"),
            Tensor::zeros(dims.embedding_dim, m),
            Tensor::filled(1, m, 1.0),
        );
        let film_beta = Linear::with_values(
            ps,
            &format!("{name}.film_beta"),
            Tensor::zeros(dims.embedding_dim, m),
            Tensor::zeros(1, m),
        );
        Self {
            dims,
            codes,
            input: Linear::new(ps, &format!("{name}.input"), dims.obs_dim + dims.skills, m, rng),
            film_gamma,
            film_beta,
            glu: Glu::new(ps, &format!("{name}.glu"), m, m, rng),
            lstm: LstmCell::new(ps, &format!("{name}.lstm"), dims.skill_embedding_dim, dims.memory_dim, rng),
            query: Linear::new(ps, &format!("{name}.query"), dims.memory_dim, m, rng),
            attention: MultiHeadAttention::new(
                ps,
                &format!("{name}.attention"),
                m,
                dims.skill_embedding_dim,
                m,
                dims.heads,
                rng,
            ),
            mix_window: ps.add(format!("{name}.mix_window"), xavier(m, m, rng)),
            mix_current: ps.add(format!("{name}.mix_current"), xavier(m, m, rng)),
            mix_context: Linear::new(ps, &format!("{name}.mix_context"), m, m, rng),
            mix_elapsed: ps.add(format!("{name}.mix_elapsed"), xavier(1, m, rng)),
            mix_own: ps.add(format!("{name}.mix_own"), xavier(1, m, rng)),
            classifier: Linear::new(ps, &format!("{name}.classifier"), m, dims.skills, rng),
            termination: Linear::new(ps, &format!("{name}.termination"), m, 1, rng),
        }
    }

    /// Runs the chain LSTM over `skills` on the tape. Returns the final
    /// hidden state (`1 × memory_dim`) and the option embeddings (`n × e`),
    /// or `None` for the embeddings when the chain is empty.
    pub fn chain_forward(&self, g: &mut Graph, skills: &[usize]) -> (Var, Option<Var>) {
        let md = self.dims.memory_dim;
        let mut h = g.constant(Tensor::zeros(1, md));
        let mut c = g.constant(Tensor::zeros(1, md));
        if skills.is_empty() {
            return (h, None);
        }
        let codes = g.p(self.codes);
        let emb = g.tape.gather_rows(codes, skills);
        for i in 0..skills.len() {
            let x = g.tape.slice_rows(emb, i, 1);
            (h, c) = self.lstm.step(g, x, h, c);
        }
        (h, Some(emb))
    }

    /// Context row from a chain summary: attention from the memory query over
    /// the option embeddings, or the query itself for an empty chain.
    pub fn context(&self, g: &mut Graph, hidden: Var, keys: Option<Var>) -> Var {
        let q = self.query.forward(g, hidden);
        match keys {
            Some(k) => self.attention.forward(g, q, k, false),
            None => q,
        }
    }

    /// Forward pass over a window of `n` observations. Row `t` sees its own
    /// features plus the mean over `starts[t]..=t`. `context` is one row
    /// shared by all observations or one row each. `current` names the active
    /// skill of each row, if any. Returns `n × K` option logits and `n × 1`
    /// termination logits.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_window(
        &self,
        g: &mut Graph,
        ctx: EpisodeContext,
        obs_enc: &crate::alignment::ObsEncoder,
        obs: Var,
        starts: &[usize],
        elapsed: &[f64],
        current: &[Option<usize>],
        context: Var,
    ) -> (Var, Var) {
        let u = obs_enc.forward(g, obs);
        let sims = g.tape.matmul_t(u, ctx.prior);
        let cols: Vec<usize> = current.iter().map(|c| c.unwrap_or(0)).collect();
        let own = g.tape.pick_per_row(sims, &cols);
        let mask: Vec<f64> = current.iter().map(|c| if c.is_some() { 1.0 } else { 0.0 }).collect();
        let mask = g.constant(Tensor::from_vec(current.len(), 1, mask));
        let own = g.tape.mul(own, mask);
        let x = g.tape.concat_cols(&[obs, sims]);
        let f = self.input.forward(g, x);
        let f = g.tape.tanh(f);
        let fused = film(g, &self.film_gamma, &self.film_beta, ctx.goal, f);
        let gated = self.glu.forward(g, fused);
        let pooled = g.tape.window_mean(gated, starts);
        let w = g.p(self.mix_window);
        let a = g.tape.matmul(pooled, w);
        let wc = g.p(self.mix_current);
        let cur = g.tape.matmul(gated, wc);
        let a = g.tape.add(a, cur);
        let cproj = self.mix_context.forward(g, context);
        let a = if g.value(cproj).rows == 1 {
            g.tape.add_row(a, cproj)
        } else {
            g.tape.add(a, cproj)
        };
        let el = g.constant(Tensor::from_vec(elapsed.len(), 1, elapsed.to_vec()));
        let we = g.p(self.mix_elapsed);
        let e = g.tape.matmul(el, we);
        let pre = g.tape.add(a, e);
        let wo = g.p(self.mix_own);
        let o = g.tape.matmul(own, wo);
        let pre = g.tape.add(pre, o);
        let hidden = g.tape.tanh(pre);
        let hidden = g.dropout(hidden);
        let logits = self.classifier.forward(g, hidden);
        let term = self.termination.forward(g, hidden);
        (logits, term)
    }

    /// Normalized elapsed-time feature for a skill that has run `steps` steps.
    pub fn elapsed_feature(&self, steps: usize) -> f64 {
        steps.min(self.dims.max_skill_horizon) as f64 / self.dims.max_skill_horizon as f64
    }

    /// Advances the chain by one option without touching `mem`.
    pub fn push_option(&self, params: &ParamSet, mem: &ChainMemory, option: &SkillOption) -> Result<ChainMemory> {
        if option.skill_index >= self.dims.skills {
            return Err(invalid(format!(
                "skill index {} outside a prior of {} skills",
                option.skill_index, self.dims.skills
            )));
        }
        if option.embedding.len() != self.dims.skill_embedding_dim {
            return Err(invalid("option embedding has the wrong size"));
        }
        let md = self.dims.memory_dim;
        let mut g = Graph::new(params);
        let x = g.constant(Tensor::row_vector(&option.embedding));
        let h = g.constant(Tensor::from_vec(1, md, mem.hidden.clone()));
        let c = g.constant(Tensor::from_vec(1, md, mem.cell.clone()));
        let (h, c) = self.lstm.step(&mut g, x, h, c);
        let mut next = mem.clone();
        next.hidden = g.value(h).data.clone();
        next.cell = g.value(c).data.clone();
        next.keys.push(option.embedding.clone());
        next.skills.push(option.skill_index);
        Ok(next)
    }

    /// The option for `skill` from the code table.
    pub fn option(&self, params: &ParamSet, skill: usize) -> SkillOption {
        SkillOption {
            skill_index: skill,
            embedding: params.get(self.codes).row(skill).to_vec(),
        }
    }

    /// Next-option distribution and termination probability for the last
    /// observation of `window`. `goal` is `1 × d`, `prior` is `K × d`.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_option(
        &self,
        params: &ParamSet,
        obs_enc: &crate::alignment::ObsEncoder,
        goal: &Tensor,
        prior: &Tensor,
        window: &[Observation],
        mem: &ChainMemory,
        steps_in_skill: usize,
    ) -> Result<GeneratorOutput> {
        if window.is_empty() {
            return Err(invalid("generator needs at least one observation"));
        }
        let mut g = Graph::new(params);
        let ctx = EpisodeContext {
            goal: g.constant(goal.clone()),
            prior: g.constant(prior.clone()),
        };
        let rows: Vec<Vec<f64>> = window.iter().map(|o| o.features.clone()).collect();
        let obs = g.constant(Tensor::from_rows(&rows));
        let hidden = g.constant(Tensor::from_vec(1, mem.hidden.len(), mem.hidden.clone()));
        let keys = if mem.is_empty() {
            None
        } else {
            Some(g.constant(Tensor::from_rows(&mem.keys)))
        };
        let context = self.context(&mut g, hidden, keys);
        let n = window.len();
        let starts = vec![0; n];
        let first = steps_in_skill.saturating_sub(n - 1);
        let elapsed: Vec<f64> = (0..n).map(|i| self.elapsed_feature(first + i)).collect();
        let current = vec![mem.skills.last().copied(); n];
        let (logits, term) = self.forward_window(&mut g, ctx, obs_enc, obs, &starts, &elapsed, &current, context);
        let z = g.value(logits).row(n - 1).to_vec();
        let tz = g.value(term).at(n - 1, 0);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                stage: "generator classifier".into(),
            });
        }
        if !tz.is_finite() {
            return Err(Error::Numeric {
                stage: "generator termination head".into(),
            });
        }
        let lse = crate::autodiff::log_sum_exp(&z);
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        Ok(GeneratorOutput {
            probs,
            termination: crate::autodiff::sigmoid(tz),
        })
    }
}

//! Text and observation encoders, cosine similarity, and monotone
//! segmentation of demonstrations against a cognitive prior.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{normal, Graph, GradSet, Linear, ParamId, ParamSet};
use crate::optim::{clip_global_norm, Adam};
use crate::types::{CognitivePrior, Observation, Trajectory};

/// Lower-cased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed bag-of-tokens encoder: mean of token rows, one hidden layer, unit-norm output.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoder {
    pub table: ParamId,
    pub hidden: Linear,
    pub out: Linear,
    pub buckets: usize,
    pub output_dim: usize,
}

impl TextEncoder {
    pub fn new(ps: &mut ParamSet, name: &str, buckets: usize, output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = ps.add(format!("{name}.table"), normal(buckets, output_dim, 1.0, rng));
        let hidden = Linear::new(ps, &format!("{name}.hidden"), output_dim, output_dim, rng);
        let out = Linear::new(ps, &format!("{name}.out"), output_dim, output_dim, rng);
        // non-zero biases keep the normalization well defined for every input
        *ps.get_mut(hidden.bias) = normal(1, output_dim, 0.1, rng);
        *ps.get_mut(out.bias) = normal(1, output_dim, 0.1, rng);
        Self {
            table,
            hidden,
            out,
            buckets,
            output_dim,
        }
    }

    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(invalid("text must contain at least one token"));
        }
        Ok(tokens
            .iter()
            .map(|t| (fnv1a(t.as_bytes()) % self.buckets as u64) as usize)
            .collect())
    }

    /// Embeds each text as one row of an `n × output_dim` matrix.
    pub fn forward(&self, g: &mut Graph, texts: &[&str]) -> Result<Var> {
        if texts.is_empty() {
            return Err(invalid("no texts to encode"));
        }
        let table = g.p(self.table);
        let mut rows = Vec::with_capacity(texts.len());
        for text in texts {
            let ids = self.token_ids(text)?;
            let picked = g.tape.gather_rows(table, &ids);
            rows.push(g.tape.mean_rows(picked));
        }
        let x = if rows.len() == 1 { rows[0] } else { g.tape.concat_rows(&rows) };
        let h = self.hidden.forward(g, x);
        let h = g.tape.tanh(h);
        let y = self.out.forward(g, h);
        Ok(g.tape.l2_normalize_rows(y))
    }
}

/// Two-layer feed-forward observation encoder with unit-norm output.
#[derive(Debug, Clone, Copy)]
pub struct ObsEncoder {
    pub hidden: Linear,
    pub out: Linear,
    pub obs_dim: usize,
    pub output_dim: usize,
}

impl ObsEncoder {
    pub fn new(ps: &mut ParamSet, name: &str, obs_dim: usize, output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = Linear::new(ps, &format!("{name}.hidden"), obs_dim, output_dim, rng);
        let out = Linear::new(ps, &format!("{name}.out"), output_dim, output_dim, rng);
        *ps.get_mut(hidden.bias) = normal(1, output_dim, 0.1, rng);
        *ps.get_mut(out.bias) = normal(1, output_dim, 0.1, rng);
        Self {
            hidden,
            out,
            obs_dim,
            output_dim,
        }
    }

    /// `obs` is `n × obs_dim`; returns `n × output_dim` unit rows.
    pub fn forward(&self, g: &mut Graph, obs: Var) -> Var {
        let h = self.hidden.forward(g, obs);
        let h = g.tape.tanh(h);
        let y = self.out.forward(g, h);
        g.tape.l2_normalize_rows(y)
    }
}

fn check_unit(v: &[f64], stage: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { stage: stage.into() })
    }
}

pub fn embed_text(encoder: &TextEncoder, params: &ParamSet, text: &str) -> Result<Vec<f64>> {
    let mut g = Graph::new(params);
    let v = encoder.forward(&mut g, &[text])?;
    let out = g.value(v).data.clone();
    check_unit(&out, "text encoder")?;
    Ok(out)
}

pub fn embed_observation(encoder: &ObsEncoder, params: &ParamSet, obs: &Observation) -> Result<Vec<f64>> {
    if obs.dim() != encoder.obs_dim {
        return Err(invalid(format!(
            "observation has {} features, encoder expects {}",
            obs.dim(),
            encoder.obs_dim
        )));
    }
    let mut g = Graph::new(params);
    let x = g.constant(Tensor::row_vector(&obs.features));
    let v = encoder.forward(&mut g, x);
    let out = g.value(v).data.clone();
    check_unit(&out, "observation encoder")?;
    Ok(out)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("cosine similarity of vectors with different lengths"));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `K × T` prior-against-observation similarities, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub skills: usize,
    pub steps: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(skills: usize, steps: usize, values: Vec<f64>) -> Result<Self> {
        if skills == 0 || steps == 0 {
            return Err(invalid("similarity matrix needs at least one row and column"));
        }
        if values.len() != skills * steps {
            return Err(invalid("similarity matrix size does not match its shape"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                stage: "similarity matrix".into(),
            });
        }
        Ok(Self { skills, steps, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let steps = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != steps) {
            return Err(invalid("ragged similarity rows"));
        }
        Self::new(rows.len(), steps, rows.concat())
    }

    pub fn get(&self, k: usize, t: usize) -> f64 {
        self.values[k * self.steps + t]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.steps..(k + 1) * self.steps]
    }
}

/// Unit-norm text embeddings for every prior description, `K × d`.
pub fn prior_embeddings(encoder: &TextEncoder, params: &ParamSet, prior: &CognitivePrior) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let texts: Vec<&str> = prior.descriptions().iter().map(String::as_str).collect();
    let v = encoder.forward(&mut g, &texts)?;
    Ok(g.value(v).clone())
}

pub fn observation_matrix(traj: &Trajectory) -> Tensor {
    let rows: Vec<Vec<f64>> = traj.observations().map(|o| o.features.clone()).collect();
    Tensor::from_rows(&rows)
}

/// Similarities against precomputed prior embeddings.
pub fn similarity_against(
    obs_enc: &ObsEncoder,
    params: &ParamSet,
    texts: &Tensor,
    traj: &Trajectory,
) -> Result<SimilarityMatrix> {
    if traj.steps[0].obs.dim() != obs_enc.obs_dim {
        return Err(invalid("trajectory observation dimension does not match the encoder"));
    }
    let mut g = Graph::new(params);
    let x = g.constant(observation_matrix(traj));
    let u = obs_enc.forward(&mut g, x);
    let u = g.value(u);
    let (k, t) = (texts.rows, u.rows);
    let st = texts.matmul_t(u);
    let values = st.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    debug_assert_eq!(st.rows, k);
    SimilarityMatrix::new(k, t, values)
}

pub fn build_similarity_matrix(
    text_enc: &TextEncoder,
    obs_enc: &ObsEncoder,
    params: &ParamSet,
    prior: &CognitivePrior,
    traj: &Trajectory,
) -> Result<SimilarityMatrix> {
    let texts = prior_embeddings(text_enc, params, prior)?;
    similarity_against(obs_enc, params, &texts, traj)
}

/// Monotone boundaries `b_1 < … < b_K = T` (one-based) maximizing
/// `Σ_k sim[k][b_k - 1]`, earliest on ties.
pub fn segment_trajectory(sim: &SimilarityMatrix) -> Result<Vec<usize>> {
    let (k, t) = (sim.skills, sim.steps);
    if t < k {
        return Err(Error::Infeasible(format!(
            "cannot place {k} monotone boundaries in {t} steps"
        )));
    }
    // suffix[j][c]: best score of skills j.. given skill j ends at column c.
    // best_after[j][c]: (max, earliest argmax) of suffix[j][c'] over c' >= c.
    let neg = f64::NEG_INFINITY;
    let mut suffix = vec![vec![neg; t]; k];
    let mut best_after = vec![vec![(neg, usize::MAX); t + 1]; k];
    suffix[k - 1][t - 1] = sim.get(k - 1, t - 1);
    for j in (0..k).rev() {
        if j < k - 1 {
            // skill j ends at column c, leaving room for the k-1-j later skills
            let last = t - (k - j);
            for c in j..=last {
                let (rest, _) = best_after[j + 1][c + 1];
                suffix[j][c] = sim.get(j, c) + rest;
            }
        }
        for c in (0..t).rev() {
            let cur = suffix[j][c];
            let (m, at) = best_after[j][c + 1];
            best_after[j][c] = if cur >= m && cur > neg { (cur, c) } else { (m, at) };
        }
    }
    let mut boundaries = Vec::with_capacity(k);
    let mut from = 0;
    for row in &best_after {
        let (_, c) = row[from];
        boundaries.push(c + 1);
        from = c + 1;
    }
    Ok(boundaries)
}

/// `H(k) = b_k - b_{k-1}` for a valid boundary list ending at `t`.
pub fn compute_durations(boundaries: &[usize], t: usize) -> Result<Vec<usize>> {
    crate::types::check_boundaries(boundaries, t)?;
    Ok(crate::types::durations_from_boundaries(boundaries))
}

/// `K` near-equal segments, remainder steps going to the earliest segments.
pub fn uniform_boundaries(t: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || t < k {
        return Err(Error::Infeasible(format!(
            "cannot place {k} monotone boundaries in {t} steps"
        )));
    }
    let (base, extra) = (t / k, t % k);
    let mut b = Vec::with_capacity(k);
    let mut acc = 0;
    for j in 0..k {
        acc += base + usize::from(j < extra);
        b.push(acc);
    }
    Ok(b)
}

/// An observation with a short caption, used to pre-train the dual encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedObservation {
    pub obs: Observation,
    pub caption: String,
}

/// Contrastive pre-training of the text and observation encoders: each
/// observation in a batch is classified against the batch's distinct
/// captions. Only encoder blocks are updated. Returns the per-step loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_dual_encoder(
    params: &mut ParamSet,
    text_enc: &TextEncoder,
    obs_enc: &ObsEncoder,
    pairs: &[CaptionedObservation],
    steps: usize,
    batch: usize,
    lr: f64,
    temperature: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if pairs.is_empty() || steps == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(params);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch.min(pairs.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let mut captions: Vec<&str> = Vec::new();
        let mut targets = Vec::with_capacity(picked.len());
        for &i in &picked {
            let c = pairs[i].caption.as_str();
            let idx = match captions.iter().position(|x| *x == c) {
                Some(p) => p,
                None => {
                    captions.push(c);
                    captions.len() - 1
                }
            };
            targets.push(idx);
        }
        let rows: Vec<Vec<f64>> = picked.iter().map(|&i| pairs[i].obs.features.clone()).collect();
        let mut g = Graph::new(params);
        let t = text_enc.forward(&mut g, &captions)?;
        let x = g.constant(Tensor::from_rows(&rows));
        let u = obs_enc.forward(&mut g, x);
        let logits = g.tape.matmul_t(u, t);
        let logits = g.tape.scale(logits, 1.0 / temperature);
        let logp = g.tape.log_softmax(logits);
        let picked_lp = g.tape.pick_per_row(logp, &targets);
        let total = g.tape.sum(picked_lp);
        let loss = g.tape.scale(total, -1.0 / picked.len() as f64);
        let value = g.tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric {
                stage: "encoder pre-training".into(),
            });
        }
        let grads = g.tape.backward(loss);
        let mut gs = GradSet::zeros_like(params);
        g.accumulate_grads(&grads, &mut gs);
        drop(g);
        clip_global_norm(&mut gs, 1.0);
        adam.step(params, &gs, lr, None);
        losses.push(value);
    }
    Ok(losses)
}

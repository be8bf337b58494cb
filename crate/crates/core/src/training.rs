//! The joint objective, batching over skill chunks, and the training loops
//! for the full method and its baselines.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    pretrain_dual_encoder, prior_embeddings, segment_trajectory, similarity_against, uniform_boundaries,
    CaptionedObservation,
};
use crate::autodiff::{Tensor, Var};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::generator::EpisodeContext;
use crate::model::{Mode, ModelBundle};
use crate::nn::{GradSet, Graph};
use crate::optim::{clip_global_norm, Adam, LrSchedule};
use crate::types::{Action, SegmentedTrajectory, Trajectory};

/// Weights of the generator and termination terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub epsilon: f64,
    pub termination: f64,
}

/// Loss components for one batch, each averaged over the batch's chunks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub cognition: f64,
    pub policy: f64,
    pub termination: f64,
}

/// A run of at most `window` consecutive steps inside one skill segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub trajectory: usize,
    pub skill: usize,
    pub start: usize,
    pub end: usize,
    pub skill_start: usize,
    pub skill_end: usize,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Termination targets: 1 at the segment's last step, 0 elsewhere.
    pub fn termination_targets(&self) -> Vec<f64> {
        (self.start..self.end)
            .map(|t| if t + 1 == self.skill_end { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Splits every skill segment into chunks of at most `window` steps.
pub fn chunk_segments(segmented: &[SegmentedTrajectory], window: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    for (i, seg) in segmented.iter().enumerate() {
        for k in 0..seg.skill_count() {
            let (s, e) = seg.segment(k);
            let mut c = s;
            while c < e {
                let end = (c + window).min(e);
                out.push(Chunk {
                    trajectory: i,
                    skill: k,
                    start: c,
                    end,
                    skill_start: s,
                    skill_end: e,
                });
                c = end;
            }
        }
    }
    out
}

/// Teacher-forced option history for the segment holding skill `k`: the
/// labels of every segment up to and including `k`.
pub fn teacher_chain(seg: &SegmentedTrajectory, k: usize) -> Vec<usize> {
    (0..=k).map(|j| seg.per_step_option[seg.segment(j).0]).collect()
}

/// Segmented demonstrations plus the goal and prior they are read against.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub segmented: Vec<SegmentedTrajectory>,
}

fn conditioned(mode: Mode) -> bool {
    mode.hierarchical()
}

/// Builds the loss on `g`. Returns `(total, cognition, policy, termination)`.
fn build_loss(
    g: &mut Graph,
    bundle: &ModelBundle,
    data: &TrainingData,
    chunks: &[Chunk],
    weights: LossWeights,
    trace: &mut Option<&mut Vec<Vec<usize>>>,
) -> Result<(Var, Var, Var, Var)> {
    if chunks.is_empty() {
        return Err(crate::error::invalid("empty batch"));
    }
    let goal = bundle.text.forward(g, &[bundle.spec.goal.as_str()])?;
    let use_codes = conditioned(bundle.mode);
    let with_generator = use_codes && (weights.epsilon != 0.0 || weights.termination != 0.0);
    let ctx = if with_generator {
        let texts: Vec<&str> = bundle.spec.prior.descriptions().iter().map(String::as_str).collect();
        let prior = if bundle.mode == Mode::Hbc {
            g.constant(Tensor::zeros(texts.len(), bundle.config.embedding_dim))
        } else {
            bundle.text.forward(g, &texts)?
        };
        Some(EpisodeContext { goal, prior })
    } else {
        None
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut segments = Vec::with_capacity(chunks.len());
    let mut row_skill = Vec::new();
    let mut actions: Vec<Action> = Vec::new();
    for chunk in chunks {
        let seg = &data.segmented[chunk.trajectory];
        segments.push((rows.len(), chunk.len()));
        for step in &seg.base.steps[chunk.start..chunk.end] {
            rows.push(step.obs.features.clone());
            actions.push(step.action.clone());
            row_skill.push(seg.per_step_option[chunk.start]);
        }
    }
    let n = rows.len();
    let obs = g.constant(Tensor::from_rows(&rows));
    let skill = if use_codes {
        let codes = g.p(bundle.codes);
        g.tape.gather_rows(codes, &row_skill)
    } else {
        g.constant(Tensor::zeros(n, bundle.config.skill_embedding_dim))
    };
    let head = bundle.policy.forward_segments(g, obs, goal, skill, &segments);
    let pol_sum = bundle.policy.nll(g, head, &actions);

    let mut cog_sum = None;
    let mut term_sum = None;
    if let Some(ctx) = ctx {
        // one context row per distinct teacher-forced chain
        let mut chains: Vec<Vec<usize>> = Vec::new();
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut slot = |chain: Vec<usize>, chains: &mut Vec<Vec<usize>>| -> usize {
            *index.entry(chain.clone()).or_insert_with(|| {
                chains.push(chain);
                chains.len() - 1
            })
        };
        let mut row_context = Vec::with_capacity(n);
        let mut starts = Vec::with_capacity(n);
        let mut elapsed = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let mut next_rows = Vec::new();
        let mut next_labels = Vec::new();
        let mut first_rows = Vec::new();
        let mut first_labels = Vec::new();
        let mut empty_slot = None;
        for (chunk, &(offset, len)) in chunks.iter().zip(&segments) {
            let seg = &data.segmented[chunk.trajectory];
            let chain = teacher_chain(seg, chunk.skill);
            if let Some(t) = trace.as_deref_mut() {
                t.push(chain.clone());
            }
            let c = slot(chain, &mut chains);
            row_context.extend(std::iter::repeat_n(c, len));
            starts.extend(std::iter::repeat_n(offset, len));
            elapsed.extend((chunk.start..chunk.end).map(|t| bundle.generator.elapsed_feature(t - chunk.skill_start + 1)));
            targets.extend(chunk.termination_targets());
            if chunk.end == chunk.skill_end && chunk.skill + 1 < seg.skill_count() {
                next_rows.push(offset + len - 1);
                next_labels.push(seg.per_step_option[chunk.skill_end]);
            }
            if chunk.start == 0 {
                if let Some(t) = trace.as_deref_mut() {
                    t.push(Vec::new());
                }
                empty_slot = Some(slot(Vec::new(), &mut chains));
                first_rows.push(offset);
                first_labels.push(seg.per_step_option[0]);
            }
        }
        let mut context_rows = Vec::with_capacity(chains.len());
        for chain in &chains {
            let (h, keys) = bundle.generator.chain_forward(g, chain);
            context_rows.push(bundle.generator.context(g, h, keys));
        }
        let table = g.tape.concat_rows(&context_rows);
        let context = g.tape.gather_rows(table, &row_context);
        let current: Vec<Option<usize>> = row_skill.iter().map(|&k| Some(k)).collect();
        let (logits, term) = bundle
            .generator
            .forward_window(g, ctx, &bundle.obs, obs, &starts, &elapsed, &current, context);
        term_sum = Some(g.tape.bce_with_logits(term, &targets));
        let mut parts = Vec::new();
        if !next_rows.is_empty() {
            let picked = g.tape.gather_rows(logits, &next_rows);
            let lp = g.tape.log_softmax(picked);
            let lp = g.tape.pick_per_row(lp, &next_labels);
            parts.push(g.tape.sum(lp));
        }
        if let Some(e) = empty_slot {
            let m = first_rows.len();
            let first_obs = g.tape.gather_rows(obs, &first_rows);
            let first_context = g.tape.gather_rows(table, &vec![e; m]);
            let own: Vec<usize> = (0..m).collect();
            let el = vec![bundle.generator.elapsed_feature(1); m];
            let (logits, _) = bundle
                .generator
                .forward_window(g, ctx, &bundle.obs, first_obs, &own, &el, &vec![None; m], first_context);
            let lp = g.tape.log_softmax(logits);
            let lp = g.tape.pick_per_row(lp, &first_labels);
            parts.push(g.tape.sum(lp));
        }
        if !parts.is_empty() {
            let joined = g.tape.concat_rows(&parts);
            let s = g.tape.sum(joined);
            cog_sum = Some(g.tape.scale(s, -1.0));
        }
    }
    let inv = 1.0 / chunks.len() as f64;
    let mut mean_of = |sum: Option<Var>| match sum {
        Some(v) => g.tape.scale(v, inv),
        None => g.constant(Tensor::zeros(1, 1)),
    };
    let cog = mean_of(cog_sum);
    let pol = mean_of(Some(pol_sum));
    let term = mean_of(term_sum);
    let weighted_cog = g.tape.scale(cog, weights.epsilon);
    let weighted_term = g.tape.scale(term, weights.termination);
    let partial = g.tape.add(weighted_cog, pol);
    let total = g.tape.add(partial, weighted_term);
    Ok((total, cog, pol, term))
}

fn read_terms(g: &Graph, vars: (Var, Var, Var, Var)) -> LossTerms {
    LossTerms {
        total: g.tape.scalar(vars.0),
        cognition: g.tape.scalar(vars.1),
        policy: g.tape.scalar(vars.2),
        termination: g.tape.scalar(vars.3),
    }
}

/// `ε·cognition + policy + λ·termination` for one batch, without dropout.
/// A term whose weight is zero is skipped and reported as 0.
pub fn casil_loss(bundle: &ModelBundle, data: &TrainingData, chunks: &[Chunk], weights: LossWeights) -> Result<LossTerms> {
    let mut g = Graph::new(&bundle.params);
    let vars = build_loss(&mut g, bundle, data, chunks, weights, &mut None)?;
    Ok(read_terms(&g, vars))
}

/// Loss and parameter gradients for one batch, without dropout.
pub fn casil_loss_with_grads(
    bundle: &ModelBundle,
    data: &TrainingData,
    chunks: &[Chunk],
    weights: LossWeights,
) -> Result<(LossTerms, GradSet)> {
    let mut g = Graph::new(&bundle.params);
    let vars = build_loss(&mut g, bundle, data, chunks, weights, &mut None)?;
    let grads = g.tape.backward(vars.0);
    let mut gs = GradSet::zeros_like(&bundle.params);
    g.accumulate_grads(&grads, &mut gs);
    Ok((read_terms(&g, vars), gs))
}

/// The option histories fed to the generator for a batch, in order.
pub fn generator_inputs(bundle: &ModelBundle, data: &TrainingData, chunks: &[Chunk]) -> Result<Vec<Vec<usize>>> {
    let mut trace = Vec::new();
    let mut g = Graph::new(&bundle.params);
    let weights = LossWeights {
        epsilon: 1.0,
        termination: 1.0,
    };
    build_loss(&mut g, bundle, data, chunks, weights, &mut Some(&mut trace))?;
    Ok(trace)
}

/// Segments every trajectory against the prior with the bundle's encoders.
pub fn align_dataset(bundle: &ModelBundle, trajectories: &[Trajectory]) -> Result<Vec<Vec<usize>>> {
    let texts = prior_embeddings(&bundle.text, &bundle.params, &bundle.spec.prior)?;
    trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let sim = similarity_against(&bundle.obs, &bundle.params, &texts, t)?;
            segment_trajectory(&sim).map_err(|e| match e {
                Error::Infeasible(m) => Error::Infeasible(format!("trajectory {i}: {m}")),
                other => other,
            })
        })
        .collect()
}

/// Boundaries the given mode trains on.
pub fn mode_boundaries(bundle: &ModelBundle, trajectories: &[Trajectory]) -> Result<Vec<Vec<usize>>> {
    match bundle.mode {
        Mode::Casil | Mode::NoCognition => align_dataset(bundle, trajectories),
        Mode::Hbc => trajectories
            .iter()
            .map(|t| uniform_boundaries(t.len(), bundle.skill_count()))
            .collect(),
        Mode::Bc => Ok(trajectories.iter().map(|t| vec![t.len()]).collect()),
    }
}

fn segment_all(trajectories: &[Trajectory], boundaries: Vec<Vec<usize>>) -> Result<TrainingData> {
    let segmented = trajectories
        .iter()
        .zip(boundaries)
        .map(|(t, b)| SegmentedTrajectory::new(t.clone(), b))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingData { segmented })
}

/// Loss weights used by each mode.
pub fn mode_weights(mode: Mode, config: &crate::types::RunConfig) -> LossWeights {
    match mode {
        Mode::Casil | Mode::Hbc => LossWeights {
            epsilon: config.epsilon,
            termination: config.termination_weight,
        },
        Mode::NoCognition | Mode::Bc => LossWeights {
            epsilon: 0.0,
            termination: 0.0,
        },
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub cognition: f64,
    pub policy: f64,
    pub termination: f64,
    pub grad_norm: f64,
    pub chunks: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
    /// Wall-clock seconds per step, kept apart from the records so that
    /// the records stay reproducible.
    pub wall_seconds: Vec<f64>,
    /// Boundaries used in the final epoch.
    pub boundaries: Vec<Vec<usize>>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("log record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Per-skill midpoints between boundary and non-boundary similarities,
/// used when no termination head is trained.
pub fn similarity_thresholds(bundle: &ModelBundle, data: &TrainingData) -> Result<Vec<f64>> {
    let k = bundle.skill_count();
    let texts = prior_embeddings(&bundle.text, &bundle.params, &bundle.spec.prior)?;
    let mut at = vec![(0.0, 0usize); k];
    let mut off = vec![(0.0, 0usize); k];
    for seg in &data.segmented {
        let sim = similarity_against(&bundle.obs, &bundle.params, &texts, &seg.base)?;
        for j in 0..k {
            let (s, e) = seg.segment(j);
            for t in s..e {
                let slot = if t + 1 == e { &mut at[j] } else { &mut off[j] };
                slot.0 += sim.get(j, t);
                slot.1 += 1;
            }
        }
    }
    Ok((0..k)
        .map(|j| {
            let a = if at[j].1 > 0 { at[j].0 / at[j].1 as f64 } else { 1.0 };
            let o = if off[j].1 > 0 { off[j].0 / off[j].1 as f64 } else { a };
            0.5 * (a + o)
        })
        .collect())
}

/// Trains `bundle` in place on `dataset` according to `bundle.mode`.
///
/// On a non-finite loss the bundle keeps the last good parameters and
/// [`Error::TrainingAborted`] is returned.
pub fn train(bundle: &mut ModelBundle, dataset: &Dataset) -> Result<TrainingLog> {
    train_with_captions(bundle, dataset, &[])
}

/// [`train`], with captioned observations that keep the encoders aligned:
/// in CasIL mode each epoch starts with `realign_steps` contrastive steps on
/// `captions` before the dataset is segmented again.
pub fn train_with_captions(
    bundle: &mut ModelBundle,
    dataset: &Dataset,
    captions: &[CaptionedObservation],
) -> Result<TrainingLog> {
    let cfg = bundle.config.clone();
    cfg.validate()?;
    let trajectories = &dataset.trajectories;
    if trajectories.is_empty() {
        return Err(crate::error::invalid("cannot train on an empty dataset"));
    }
    let report = crate::dataset::validate_dataset(trajectories, &bundle.spec.prior);
    if bundle.mode.hierarchical() && !report.is_valid() {
        let v = &report.violations[0];
        return Err(Error::Infeasible(format!("trajectory {}: {}", v.trajectory, v.message)));
    }
    let weights = mode_weights(bundle.mode, &cfg);
    let schedule = LrSchedule::from_config(&cfg);
    let frozen: Option<Vec<bool>> = (bundle.mode == Mode::NoCognition).then(|| bundle.encoder_mask());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);
    let mut dropout_rng = bundle.rng.clone();
    let mut adam = Adam::new(&bundle.params);
    let mut log = TrainingLog::default();

    let mut data = segment_all(trajectories, mode_boundaries(bundle, trajectories)?)?;
    if bundle.mode == Mode::NoCognition {
        bundle.switch_thresholds = similarity_thresholds(bundle, &data)?;
    }
    let mut order = chunk_segments(&data.segmented, cfg.truncation);
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0;
    let mut epoch = 0;
    for step in 1..=cfg.train_steps {
        if cursor >= order.len() {
            epoch += 1;
            if bundle.mode == Mode::Casil {
                pretrain_dual_encoder(
                    &mut bundle.params,
                    &bundle.text,
                    &bundle.obs,
                    captions,
                    cfg.realign_steps,
                    cfg.pretrain_batch,
                    cfg.pretrain_lr,
                    PRETRAIN_TEMPERATURE,
                    cfg.seed ^ 0x5eed ^ ((epoch as u64) << 32),
                )?;
                data = segment_all(trajectories, align_dataset(bundle, trajectories)?)?;
            }
            order = chunk_segments(&data.segmented, cfg.truncation);
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = &order[cursor..end];
        cursor = end;

        let started = std::time::Instant::now();
        let lr = schedule.at(step);
        let (terms, mut grads) = {
            let mut g = Graph::new(&bundle.params).with_dropout(cfg.dropout, &mut dropout_rng);
            if let Some(mask) = frozen.as_deref() {
                g = g.with_frozen(mask);
            }
            let vars = build_loss(&mut g, bundle, &data, batch, weights, &mut None)?;
            let terms = read_terms(&g, vars);
            if !terms.total.is_finite() {
                return Err(Error::TrainingAborted {
                    step,
                    reason: format!(
                        "non-finite loss (cognition {}, policy {}, termination {})",
                        terms.cognition, terms.policy, terms.termination
                    ),
                });
            }
            let gr = g.tape.backward(vars.0);
            let mut gs = GradSet::zeros_like(&bundle.params);
            g.accumulate_grads(&gr, &mut gs);
            (terms, gs)
        };
        if !grads.is_finite() {
            return Err(Error::TrainingAborted {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        let before = bundle.params.clone();
        adam.step(&mut bundle.params, &grads, lr, frozen.as_deref());
        if !bundle.params.is_finite() {
            bundle.params = before;
            return Err(Error::TrainingAborted {
                step,
                reason: "parameters became non-finite".into(),
            });
        }
        bundle.step += 1;
        log.records.push(LogRecord {
            step,
            epoch,
            lr,
            total: terms.total,
            cognition: terms.cognition,
            policy: terms.policy,
            termination: terms.termination,
            grad_norm,
            chunks: batch.len(),
        });
        log.wall_seconds.push(started.elapsed().as_secs_f64());
    }
    log.boundaries = data.segmented.iter().map(|s| s.boundaries.clone()).collect();
    bundle.rng = dropout_rng;
    Ok(log)
}

/// Full method.
pub fn train_casil(bundle: &mut ModelBundle, dataset: &Dataset) -> Result<TrainingLog> {
    bundle.mode = Mode::Casil;
    train(bundle, dataset)
}

/// Policy alone with a constant null skill code.
pub fn train_bc(bundle: &mut ModelBundle, dataset: &Dataset) -> Result<TrainingLog> {
    bundle.mode = Mode::Bc;
    train(bundle, dataset)
}

/// Two-level model on uniform splits.
pub fn train_hbc(bundle: &mut ModelBundle, dataset: &Dataset) -> Result<TrainingLog> {
    bundle.mode = Mode::Hbc;
    train(bundle, dataset)
}

/// One frozen alignment pass, no generator or termination loss.
pub fn train_no_cognition(bundle: &mut ModelBundle, dataset: &Dataset) -> Result<TrainingLog> {
    bundle.mode = Mode::NoCognition;
    train(bundle, dataset)
}

/// Segmented data for a mode, as the first training epoch sees it.
pub fn prepare(bundle: &ModelBundle, trajectories: &[Trajectory]) -> Result<TrainingData> {
    segment_all(trajectories, mode_boundaries(bundle, trajectories)?)
}

/// Contrastive warm start of the bundle's encoders on captioned observations,
/// using the `pretrain_*` settings of its config.
pub fn pretrain_encoders(bundle: &mut ModelBundle, pairs: &[CaptionedObservation]) -> Result<Vec<f64>> {
    let cfg = bundle.config.clone();
    pretrain_dual_encoder(
        &mut bundle.params,
        &bundle.text,
        &bundle.obs,
        pairs,
        cfg.pretrain_steps,
        cfg.pretrain_batch,
        cfg.pretrain_lr,
        PRETRAIN_TEMPERATURE,
        cfg.seed ^ 0x5eed,
    )
}

const PRETRAIN_TEMPERATURE: f64 = 0.1;

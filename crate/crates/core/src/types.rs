//! Value types shared by every stage of the pipeline: demonstrations, priors,
//! options, segmentations and run configuration.
//!
//! Skill indices are zero-based throughout the crate. Boundaries are one-based
//! step counts: skill `k` covers the steps `boundaries[k-1]..boundaries[k]`
//! (zero-based step indices, with an implicit leading boundary of 0), so the
//! last boundary always equals the trajectory length.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
}

impl Observation {
    pub fn new(features: Vec<f64>) -> Self {
        Self { features }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub values: Vec<f64>,
}

impl Action {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// One-hot action for a discrete primitive.
    pub fn one_hot(index: usize, n: usize) -> Self {
        let mut values = vec![0.0; n];
        values[index] = 1.0;
        Self { values }
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGoal {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_cache: Option<Vec<f64>>,
}

impl TaskGoal {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(invalid("goal text must be non-empty"));
        }
        Ok(Self {
            text,
            embedding_cache: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub goal: TaskGoal,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(goal: TaskGoal, steps: Vec<Step>) -> Result<Self> {
        if steps.is_empty() {
            return Err(invalid("trajectory needs at least one step"));
        }
        let (od, ad) = (steps[0].obs.dim(), steps[0].action.dim());
        if steps.iter().any(|s| s.obs.dim() != od || s.action.dim() != ad) {
            return Err(invalid("trajectory steps disagree on dimensions"));
        }
        Ok(Self { goal, steps })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.steps.iter().map(|s| &s.obs)
    }
}

/// Ordered textual skill descriptions supplied by a human.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CognitivePrior {
    descriptions: Vec<String>,
}

impl CognitivePrior {
    pub fn new<S: Into<String>>(descriptions: impl IntoIterator<Item = S>) -> Result<Self> {
        let descriptions: Vec<String> = descriptions.into_iter().map(Into::into).collect();
        if descriptions.is_empty() {
            return Err(invalid("a cognitive prior needs at least one description"));
        }
        if let Some(i) = descriptions.iter().position(|d| d.trim().is_empty()) {
            return Err(invalid(format!("prior description {i} is empty")));
        }
        Ok(Self { descriptions })
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    pub fn descriptions(&self) -> &[String] {
        &self.descriptions
    }

    pub fn get(&self, k: usize) -> &str {
        &self.descriptions[k]
    }
}

/// A selected skill: its index in the prior and its code-table embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillOption {
    pub skill_index: usize,
    pub embedding: Vec<f64>,
}

/// Options are always available; the initiation set is not modelled.
pub fn option_available(_option: &SkillOption, _obs: &Observation) -> bool {
    true
}

/// A trajectory viewed as a semi-Markov sequence of options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedTrajectory {
    pub base: Trajectory,
    pub boundaries: Vec<usize>,
    pub durations: Vec<usize>,
    pub per_step_option: Vec<usize>,
}

impl SegmentedTrajectory {
    pub fn new(base: Trajectory, boundaries: Vec<usize>) -> Result<Self> {
        check_boundaries(&boundaries, base.len())?;
        let durations = durations_from_boundaries(&boundaries);
        let per_step_option = labels_from_boundaries(&boundaries);
        Ok(Self {
            base,
            boundaries,
            durations,
            per_step_option,
        })
    }

    pub fn skill_count(&self) -> usize {
        self.boundaries.len()
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// Zero-based step range `[start, end)` covered by skill `k`.
    pub fn segment(&self, k: usize) -> (usize, usize) {
        let start = if k == 0 { 0 } else { self.boundaries[k - 1] };
        (start, self.boundaries[k])
    }
}

/// Boundaries must be strictly increasing, start at ≥ 1 and end at `t`.
pub fn check_boundaries(boundaries: &[usize], t: usize) -> Result<()> {
    if boundaries.is_empty() {
        return Err(invalid("boundary list is empty"));
    }
    if boundaries[0] == 0 {
        return Err(invalid("first boundary must be at least 1"));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("boundaries must be strictly increasing"));
    }
    if *boundaries.last().unwrap() != t {
        return Err(invalid(format!(
            "last boundary {} must equal trajectory length {t}",
            boundaries.last().unwrap()
        )));
    }
    Ok(())
}

/// `H(k) = b_k - b_{k-1}` with `b_0 = 0`.
pub fn durations_from_boundaries(boundaries: &[usize]) -> Vec<usize> {
    let mut prev = 0;
    boundaries
        .iter()
        .map(|&b| {
            let d = b - prev;
            prev = b;
            d
        })
        .collect()
}

/// Per-step skill labels implied by a boundary list.
pub fn labels_from_boundaries(boundaries: &[usize]) -> Vec<usize> {
    let mut labels = Vec::with_capacity(*boundaries.last().unwrap_or(&0));
    let mut prev = 0;
    for (k, &b) in boundaries.iter().enumerate() {
        labels.extend(std::iter::repeat_n(k, b - prev));
        prev = b;
    }
    labels
}

/// Inverse of [`labels_from_boundaries`] for non-decreasing labels covering `0..k` in order.
pub fn boundaries_from_labels(labels: &[usize]) -> Result<Vec<usize>> {
    let mut boundaries = Vec::new();
    for (t, w) in labels.windows(2).enumerate() {
        if w[1] < w[0] || w[1] > w[0] + 1 {
            return Err(invalid("labels must step through skills in order"));
        }
        if w[1] != w[0] {
            boundaries.push(t + 1);
        }
    }
    if labels.first().copied().unwrap_or(1) != 0 {
        return Err(invalid("labels must start at skill 0"));
    }
    boundaries.push(labels.len());
    Ok(boundaries)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Hyperparameters for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output size of the text and observation encoders.
    pub embedding_dim: usize,
    /// Hash buckets for the text encoder's token table.
    pub token_buckets: usize,
    pub skill_embedding_dim: usize,
    pub memory_dim: usize,
    pub model_dim: usize,
    pub attention_heads: usize,
    /// Number of skills. Zero means "use the prior's length".
    pub skill_count: usize,
    /// Weight of the cognition-generator term.
    pub epsilon: f64,
    /// Weight of the termination-head term.
    pub termination_weight: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub decay_step: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub truncation: usize,
    pub dropout: f64,
    pub train_steps: usize,
    pub grad_clip: f64,
    pub max_skill_horizon: usize,
    /// Contrastive pre-training of the dual encoder before imitation.
    pub pretrain_steps: usize,
    pub pretrain_pairs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Contrastive steps run on the captions before each CasIL
    /// re-segmentation, when captions are supplied.
    pub realign_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            embedding_dim: 32,
            token_buckets: 256,
            skill_embedding_dim: 16,
            memory_dim: 32,
            model_dim: 32,
            attention_heads: 4,
            skill_count: 0,
            epsilon: 1.0,
            termination_weight: 1.0,
            lr_start: 1e-4,
            lr_peak: 5e-4,
            warmup_steps: 10,
            decay_step: 150,
            decay_factor: 0.5,
            batch_size: 180,
            truncation: 30,
            dropout: 0.1,
            train_steps: 300,
            grad_clip: 1.0,
            max_skill_horizon: 120,
            pretrain_steps: 400,
            pretrain_pairs: 2048,
            pretrain_batch: 64,
            pretrain_lr: 3e-3,
            realign_steps: 25,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("token_buckets", self.token_buckets),
            ("skill_embedding_dim", self.skill_embedding_dim),
            ("memory_dim", self.memory_dim),
            ("model_dim", self.model_dim),
            ("attention_heads", self.attention_heads),
            ("warmup_steps", self.warmup_steps),
            ("batch_size", self.batch_size),
            ("truncation", self.truncation),
            ("max_skill_horizon", self.max_skill_horizon),
            ("pretrain_batch", self.pretrain_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.attention_heads) {
            return Err(invalid("model_dim must be divisible by attention_heads"));
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(invalid("epsilon must be finite and non-negative"));
        }
        if self.termination_weight < 0.0 || !self.termination_weight.is_finite() {
            return Err(invalid("termination_weight must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must be in [0, 1)"));
        }
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_peak", self.lr_peak),
            ("decay_factor", self.decay_factor),
            ("grad_clip", self.grad_clip),
            ("pretrain_lr", self.pretrain_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

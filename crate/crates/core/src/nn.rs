//! Parameter storage and the small set of layers the models are built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named parameter blocks.
///
/// Block order is fixed at construction and is the order used by the
/// optimizer, checkpoints and gradient checks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.blocks.iter().all(|b| b.name != name),
            "duplicate parameter block {name}"
        );
        self.blocks.push(ParamBlock { name, value });
        ParamId(self.blocks.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.blocks[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.blocks[id.0].value
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn element_count(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.value.is_finite())
    }

    /// Replace block contents, keeping names and order. Shapes must match.
    pub fn load_blocks(&mut self, blocks: Vec<ParamBlock>) -> Result<(), String> {
        if blocks.len() != self.blocks.len() {
            return Err(format!(
                "expected {} parameter blocks, found {}",
                self.blocks.len(),
                blocks.len()
            ));
        }
        for (mine, theirs) in self.blocks.iter().zip(&blocks) {
            if mine.name != theirs.name {
                return Err(format!("block order mismatch: {} vs {}", mine.name, theirs.name));
            }
            if mine.value.rows != theirs.value.rows || mine.value.cols != theirs.value.cols {
                return Err(format!("shape mismatch for block {}", mine.name));
            }
        }
        self.blocks = blocks;
        Ok(())
    }
}

/// Gradient accumulator aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradSet {
    pub grads: Vec<Tensor>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params
                .blocks()
                .iter()
                .map(|b| Tensor::zeros(b.value.rows, b.value.cols))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn add_block(&mut self, id: ParamId, g: &Tensor) {
        for (a, b) in self.grads[id.0].data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

/// A tape bound to a parameter set. Parameters are placed on the tape lazily,
/// the first time a layer asks for them.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamSet,
    bound: Vec<Option<Var>>,
    frozen: Option<&'a [bool]>,
    dropout: Option<(f64, &'a mut ChaCha8Rng)>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            frozen: None,
            dropout: None,
        }
    }

    /// Blocks whose mask entry is `true` enter the tape as constants.
    pub fn with_frozen(mut self, mask: &'a [bool]) -> Self {
        assert_eq!(mask.len(), self.params.len());
        self.frozen = Some(mask);
        self
    }

    /// Enables dropout with the given drop rate, drawing masks from `rng`.
    pub fn with_dropout(mut self, rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, rng));
        }
        self
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let frozen = self.frozen.is_some_and(|m| m[id.0]);
        let v = if frozen {
            self.tape.constant(value)
        } else {
            self.tape.leaf(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let rate = *rate;
        let n = self.tape.value(x).len();
        let keep = 1.0 - rate;
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.tape.dropout(x, mask)
    }

    /// Adds this graph's parameter gradients into `out`.
    pub fn accumulate_grads(&self, grads: &Gradients, out: &mut GradSet) {
        for (idx, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                if let Some(g) = grads.get(*v) {
                    out.add_block(ParamId(idx), g);
                }
            }
        }
    }
}

pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(rows, cols, data)
}

pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    // Box-Muller keeps this free of extra distribution crates.
    let data = (0..rows * cols)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// `y = x W + b`
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = ps.add(format!("{name}.weight"), xavier(input, output, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(1, output));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    /// Weight and bias set explicitly (used for identity-initialized maps).
    pub fn with_values(ps: &mut ParamSet, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (input, output) = (weight.rows, weight.cols);
        assert_eq!(bias.cols, output);
        let weight = ps.add(format!("{name}.weight"), weight);
        let bias = ps.add(format!("{name}.bias"), bias);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.p(self.weight);
        let b = g.p(self.bias);
        let xw = g.tape.matmul(x, w);
        g.tape.add_row(xw, b)
    }
}

/// Gated linear unit: `(x A + a) ⊙ σ(x B + b)`.
#[derive(Debug, Clone, Copy)]
pub struct Glu {
    pub value: Linear,
    pub gate: Linear,
}

impl Glu {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            value: Linear::new(ps, &format!("{name}.value"), input, output, rng),
            gate: Linear::new(ps, &format!("{name}.gate"), input, output, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let v = self.value.forward(g, x);
        let z = self.gate.forward(g, x);
        let s = g.tape.sigmoid(z);
        g.tape.mul(v, s)
    }
}

/// Single LSTM cell.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let input_weight = ps.add(format!("{name}.input_weight"), xavier(input, 4 * hidden, rng));
        let hidden_weight = ps.add(format!("{name}.hidden_weight"), xavier(hidden, 4 * hidden, rng));
        let mut b = Tensor::zeros(1, 4 * hidden);
        // forget gate starts open
        for j in hidden..2 * hidden {
            b.data[j] = 1.0;
        }
        let bias = ps.add(format!("{name}.bias"), b);
        Self {
            input_weight,
            hidden_weight,
            bias,
            hidden,
        }
    }

    /// One step on a `1×input` row. Returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> (Var, Var) {
        let wx = g.p(self.input_weight);
        let wh = g.p(self.hidden_weight);
        let b = g.p(self.bias);
        let a = g.tape.matmul(x, wx);
        let r = g.tape.matmul(h, wh);
        let s = g.tape.add(a, r);
        let gates = g.tape.add_row(s, b);
        let n = self.hidden;
        let i = g.tape.slice_cols(gates, 0, n);
        let f = g.tape.slice_cols(gates, n, n);
        let cand = g.tape.slice_cols(gates, 2 * n, n);
        let o = g.tape.slice_cols(gates, 3 * n, n);
        let i = g.tape.sigmoid(i);
        let f = g.tape.sigmoid(f);
        let cand = g.tape.tanh(cand);
        let o = g.tape.sigmoid(o);
        let keep = g.tape.mul(f, c);
        let write = g.tape.mul(i, cand);
        let c_next = g.tape.add(keep, write);
        let squashed = g.tape.tanh(c_next);
        let h_next = g.tape.mul(o, squashed);
        (h_next, c_next)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        query_in: usize,
        kv_in: usize,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "attention dim must divide into heads");
        Self {
            query: ps.add(format!("{name}.query"), xavier(query_in, dim, rng)),
            key: ps.add(format!("{name}.key"), xavier(kv_in, dim, rng)),
            value: ps.add(format!("{name}.value"), xavier(kv_in, dim, rng)),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `queries` is `m×query_in`, `memory` is `n×kv_in`. With `causal`, query
    /// row `i` only sees memory rows `0..=i` (requires `m == n`).
    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var, causal: bool) -> Var {
        let wq = g.p(self.query);
        let wk = g.p(self.key);
        let wv = g.p(self.value);
        let q = g.tape.matmul(queries, wq);
        let k = g.tape.matmul(memory, wk);
        let v = g.tape.matmul(memory, wv);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.tape.slice_cols(q, h * head_dim, head_dim);
            let kh = g.tape.slice_cols(k, h * head_dim, head_dim);
            let vh = g.tape.slice_cols(v, h * head_dim, head_dim);
            let scores = g.tape.matmul_t(qh, kh);
            let scores = g.tape.scale(scores, scale);
            let weights = g.tape.softmax(scores, causal);
            outs.push(g.tape.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.tape.concat_cols(&outs)
        };
        self.out.forward(g, joined)
    }

    /// Causal self-attention of `x` (`n × query_in`, requires
    /// `query_in == kv_in`) run separately inside each `(start, len)` row
    /// segment. Equal to calling [`forward`](Self::forward) per segment.
    pub fn forward_segments(&self, g: &mut Graph, x: Var, segments: &[(usize, usize)]) -> Var {
        let wq = g.p(self.query);
        let wk = g.p(self.key);
        let wv = g.p(self.value);
        let q = g.tape.matmul(x, wq);
        let k = g.tape.matmul(x, wk);
        let v = g.tape.matmul(x, wv);
        let joined = g.tape.segment_attention(q, k, v, self.heads, segments);
        self.out.forward(g, joined)
    }
}

//! The built-in reference encoder–decoder and its adapter layers.
//!
//! The encoder mean-pools source embeddings into a context vector `c`. The
//! decoder is a single tanh recurrent cell:
//!
//! ```text
//! g  = tanh(W_c c + W_y E[y_prev] + W_h s_prev + b)
//! s  = g + W_up relu(W_down g)        (only when an adapter is active)
//! p  = softmax(U s + b_o)
//! ```
//!
//! `s` is both the emitted hidden vector (the datastore key) and the next
//! recurrent state. Training is teacher-forced cross-entropy with plain SGD
//! and global-norm gradient clipping; gradients are computed by hand-written
//! backpropagation through time.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ParallelCorpus, Sentence, SentencePair, BOS, EOS};
use crate::dist::Distribution;
use crate::error::{format_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMDL";
pub const CHECKPOINT_VERSION: u32 = 1;
const INIT_RANGE: f64 = 0.1;

/// The decoder interface consumed by datastore construction and decoding.
pub trait StepModel: Sync {
    fn hidden_dim(&self) -> usize;

    fn vocab_size(&self) -> usize;

    fn encode(&self, source: &Sentence) -> Result<Vec<f64>>;

    fn initial_state(&self) -> Vec<f64>;

    /// One decoder step fed with `prev`. Deterministic in its inputs.
    fn step(&self, context: &[f64], state: &[f64], prev: u32) -> Result<StepOutput>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub hidden: Vec<f64>,
    pub dist: Distribution,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub adapter_rank: usize,
}

impl ModelDims {
    pub fn new(vocab_size: usize) -> Self {
        ModelDims {
            emb_dim: 32,
            hidden_dim: 64,
            vocab_size,
            adapter_rank: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.hidden_dim == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidArgument(format!("degenerate model dims {self:?}")));
        }
        if self.adapter_rank == 0 || self.adapter_rank >= self.hidden_dim {
            return Err(Error::InvalidArgument(format!(
                "adapter rank must be in 1..{}, got {}",
                self.hidden_dim, self.adapter_rank
            )));
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self · x`
    fn mul_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · y`
    fn mul_t_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yi != 0.0 {
                axpy(yi, row, out);
            }
        }
    }

    /// `self += y ⊗ x`
    fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        for (&yi, row) in y.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if yi != 0.0 {
                axpy(yi, x, row);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Base (non-adapter) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RefModelParams {
    pub dims: ModelDims,
    pub embedding: Matrix,
    pub w_ctx: Matrix,
    pub w_tok: Matrix,
    pub w_rec: Matrix,
    pub bias: Vec<f64>,
    pub w_out: Matrix,
    pub out_bias: Vec<f64>,
}

impl RefModelParams {
    pub fn random(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelDims {
            emb_dim: de,
            hidden_dim: d,
            vocab_size: v,
            ..
        } = dims;
        let embedding = Matrix::random(v, de, &mut rng);
        let w_ctx = Matrix::random(d, de, &mut rng);
        let w_tok = Matrix::random(d, de, &mut rng);
        let w_rec = Matrix::random(d, d, &mut rng);
        let bias = Matrix::random(1, d, &mut rng).data;
        let w_out = Matrix::random(v, d, &mut rng);
        let out_bias = Matrix::random(1, v, &mut rng).data;
        Ok(RefModelParams {
            dims,
            embedding,
            w_ctx,
            w_tok,
            w_rec,
            bias,
            w_out,
            out_bias,
        })
    }

    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            emb_dim: de,
            hidden_dim: d,
            vocab_size: v,
            ..
        } = dims;
        Ok(RefModelParams {
            dims,
            embedding: Matrix::zeros(v, de),
            w_ctx: Matrix::zeros(d, de),
            w_tok: Matrix::zeros(d, de),
            w_rec: Matrix::zeros(d, d),
            bias: vec![0.0; d],
            w_out: Matrix::zeros(v, d),
            out_bias: vec![0.0; v],
        })
    }

    fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.embedding.data,
            &self.w_ctx.data,
            &self.w_tok.data,
            &self.w_rec.data,
            &self.bias,
            &self.w_out.data,
            &self.out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.embedding.data,
            &mut self.w_ctx.data,
            &mut self.w_tok.data,
            &mut self.w_rec.data,
            &mut self.bias,
            &mut self.w_out.data,
            &mut self.out_bias,
        ]
    }

    /// FNV-1a over the bit patterns of every base parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Bottleneck residual adapter, `s = g + W_up relu(W_down g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub down: Matrix,
    pub up: Matrix,
}

impl AdapterParams {
    /// `W_down` random, `W_up` zero: the adapter starts as the identity.
    pub fn identity_init(hidden_dim: usize, rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AdapterParams {
            down: Matrix::random(rank, hidden_dim, &mut rng),
            up: Matrix::zeros(hidden_dim, rank),
        }
    }
}

/// Identifies one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    Embedding,
    CtxProj,
    TokProj,
    Recurrent,
    Bias,
    OutProj,
    OutBias,
    AdapterDown,
    AdapterUp,
}

impl ParamId {
    pub const BASE: [ParamId; 7] = [
        ParamId::Embedding,
        ParamId::CtxProj,
        ParamId::TokProj,
        ParamId::Recurrent,
        ParamId::Bias,
        ParamId::OutProj,
        ParamId::OutBias,
    ];
    pub const ADAPTER: [ParamId; 2] = [ParamId::AdapterDown, ParamId::AdapterUp];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    AdaptersOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be non-negative and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-token cross-entropy (nats) of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Gradients with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub base: RefModelParams,
    pub adapter: Option<AdapterParams>,
}

impl Gradients {
    fn zeros_like(model: &RefModel) -> Self {
        let base = RefModelParams::zeros(model.params.dims).expect("dims already validated");
        let adapter = model.active_adapter().map(|a| AdapterParams {
            down: Matrix::zeros(a.down.rows, a.down.cols),
            up: Matrix::zeros(a.up.rows, a.up.cols),
        });
        Gradients { base, adapter }
    }

    pub fn tensor(&self, id: ParamId) -> Option<&[f64]> {
        Some(match id {
            ParamId::Embedding => &self.base.embedding.data,
            ParamId::CtxProj => &self.base.w_ctx.data,
            ParamId::TokProj => &self.base.w_tok.data,
            ParamId::Recurrent => &self.base.w_rec.data,
            ParamId::Bias => &self.base.bias,
            ParamId::OutProj => &self.base.w_out.data,
            ParamId::OutBias => &self.base.out_bias,
            ParamId::AdapterDown => &self.adapter.as_ref()?.down.data,
            ParamId::AdapterUp => &self.adapter.as_ref()?.up.data,
        })
    }

    fn tensor_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        Some(match id {
            ParamId::AdapterDown => &mut self.adapter.as_mut()?.down.data,
            ParamId::AdapterUp => &mut self.adapter.as_mut()?.up.data,
            base => {
                let i = ParamId::BASE.iter().position(|&p| p == base).unwrap();
                self.base.tensors_mut().into_iter().nth(i).unwrap()
            }
        })
    }

    fn scale(&mut self, factor: f64) {
        for t in self.base.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
        if let Some(a) = &mut self.adapter {
            a.down.data.iter_mut().for_each(|v| *v *= factor);
            a.up.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn norm(&self, trainable: Trainable) -> f64 {
        let mut sq = 0.0;
        if trainable == Trainable::All {
            for t in self.base.tensors() {
                sq += t.iter().map(|v| v * v).sum::<f64>();
            }
        }
        if let Some(a) = &self.adapter {
            sq += a.down.data.iter().map(|v| v * v).sum::<f64>();
            sq += a.up.data.iter().map(|v| v * v).sum::<f64>();
        }
        sq.sqrt()
    }
}

/// Reference model: base parameters plus per-language adapters, at most one
/// of which is active.
#[derive(Debug, Clone, PartialEq)]
pub struct RefModel {
    pub params: RefModelParams,
    adapters: BTreeMap<String, AdapterParams>,
    active: Option<String>,
}

struct StepCache {
    input: u32,
    prev: Vec<f64>,
    gate: Vec<f64>,
    pre_relu: Vec<f64>,
    relu: Vec<f64>,
    out: Vec<f64>,
    probs: Vec<f64>,
    target: u32,
}

impl RefModel {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        Ok(Self::from_params(RefModelParams::random(dims, seed)?))
    }

    pub fn from_params(params: RefModelParams) -> Self {
        RefModel {
            params,
            adapters: BTreeMap::new(),
            active: None,
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.params.dims
    }

    /// Adds an identity-initialized adapter for `lang` (if missing) and
    /// activates it.
    pub fn attach_adapter(&mut self, lang: &str, seed: u64) {
        let dims = self.params.dims;
        self.adapters
            .entry(lang.to_string())
            .or_insert_with(|| AdapterParams::identity_init(dims.hidden_dim, dims.adapter_rank, seed));
        self.active = Some(lang.to_string());
    }

    pub fn insert_adapter(&mut self, lang: &str, adapter: AdapterParams) -> Result<()> {
        let d = self.params.dims;
        if adapter.down.rows != d.adapter_rank
            || adapter.down.cols != d.hidden_dim
            || adapter.up.rows != d.hidden_dim
            || adapter.up.cols != d.adapter_rank
        {
            return Err(Error::InvalidArgument(format!("adapter shape does not match dims {d:?}")));
        }
        self.adapters.insert(lang.to_string(), adapter);
        Ok(())
    }

    /// Activates the adapter for `lang` when one exists; `None` disables
    /// adapters. Returns whether an adapter is now active.
    pub fn set_active(&mut self, lang: Option<&str>) -> bool {
        self.active = lang.filter(|l| self.adapters.contains_key(*l)).map(str::to_string);
        self.active.is_some()
    }

    pub fn active_lang(&self) -> Option<&str> {
        self.active.as_deref()
    }

    pub fn adapter(&self, lang: &str) -> Option<&AdapterParams> {
        self.adapters.get(lang)
    }

    pub fn adapters(&self) -> impl Iterator<Item = (&str, &AdapterParams)> {
        self.adapters.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn active_adapter(&self) -> Option<&AdapterParams> {
        self.active.as_ref().and_then(|l| self.adapters.get(l))
    }

    fn active_adapter_mut(&mut self) -> Option<&mut AdapterParams> {
        match &self.active {
            Some(l) => self.adapters.get_mut(l),
            None => None,
        }
    }

    pub fn tensor(&self, id: ParamId) -> Option<&[f64]> {
        let p = &self.params;
        Some(match id {
            ParamId::Embedding => &p.embedding.data,
            ParamId::CtxProj => &p.w_ctx.data,
            ParamId::TokProj => &p.w_tok.data,
            ParamId::Recurrent => &p.w_rec.data,
            ParamId::Bias => &p.bias,
            ParamId::OutProj => &p.w_out.data,
            ParamId::OutBias => &p.out_bias,
            ParamId::AdapterDown => &self.active_adapter()?.down.data,
            ParamId::AdapterUp => &self.active_adapter()?.up.data,
        })
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        Some(match id {
            ParamId::AdapterDown => &mut self.active_adapter_mut()?.down.data,
            ParamId::AdapterUp => &mut self.active_adapter_mut()?.up.data,
            base => {
                let i = ParamId::BASE.iter().position(|&p| p == base).unwrap();
                self.params.tensors_mut().into_iter().nth(i).unwrap()
            }
        })
    }

    fn check_token(&self, id: u32) -> Result<()> {
        if id as usize >= self.params.dims.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {id} outside vocabulary of {}",
                self.params.dims.vocab_size
            )));
        }
        Ok(())
    }

    fn forward_step(&self, context: &[f64], prev_state: &[f64], prev: u32) -> StepCache {
        let p = &self.params;
        let d = p.dims.hidden_dim;
        let mut pre = p.bias.clone();
        p.w_ctx.mul_add(context, &mut pre);
        p.w_tok.mul_add(p.embedding.row(prev as usize), &mut pre);
        p.w_rec.mul_add(prev_state, &mut pre);
        let gate: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let (pre_relu, relu, out) = match self.active_adapter() {
            Some(a) => {
                let mut u = vec![0.0; a.down.rows];
                a.down.mul_add(&gate, &mut u);
                let r: Vec<f64> = u.iter().map(|&v| v.max(0.0)).collect();
                let mut s = gate.clone();
                a.up.mul_add(&r, &mut s);
                (u, r, s)
            }
            None => (Vec::new(), Vec::new(), gate.clone()),
        };
        debug_assert_eq!(out.len(), d);
        let mut logits = p.out_bias.clone();
        p.w_out.mul_add(&out, &mut logits);
        let probs = Distribution::softmax(&logits).into_inner();
        StepCache {
            input: prev,
            prev: prev_state.to_vec(),
            gate,
            pre_relu,
            relu,
            out,
            probs,
            target: 0,
        }
    }

    fn teacher_force(&self, pair: &SentencePair) -> Result<(Vec<f64>, Vec<StepCache>)> {
        let context = self.encode(&pair.source)?;
        let mut state = self.initial_state();
        let mut prev = BOS;
        let mut steps = Vec::with_capacity(pair.target.len() + 1);
        for &target in pair.target.ids().iter().chain(std::iter::once(&EOS)) {
            self.check_token(target)?;
            let mut cache = self.forward_step(&context, &state, prev);
            cache.target = target;
            state.clone_from(&cache.out);
            prev = target;
            steps.push(cache);
        }
        Ok((context, steps))
    }

    /// Summed cross-entropy of one pair and its token count (target + EOS).
    pub fn pair_loss(&self, pair: &SentencePair) -> Result<(f64, usize)> {
        let (_, steps) = self.teacher_force(pair)?;
        let loss = steps.iter().map(|s| -s.probs[s.target as usize].ln()).sum();
        Ok((loss, steps.len()))
    }

    /// Mean per-token cross-entropy over a corpus.
    pub fn corpus_loss(&self, corpus: &ParallelCorpus) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0;
        for pair in &corpus.pairs {
            let (l, n) = self.pair_loss(pair)?;
            total += l;
            tokens += n;
        }
        if tokens == 0 {
            return Err(Error::Empty("corpus"));
        }
        Ok(total / tokens as f64)
    }

    /// Gradient of the summed per-pair loss.
    pub fn gradients(&self, pair: &SentencePair) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(self);
        let (loss, _) = self.accumulate_gradients(pair, &mut grads)?;
        Ok((loss, grads))
    }

    fn accumulate_gradients(&self, pair: &SentencePair, g: &mut Gradients) -> Result<(f64, usize)> {
        let (context, steps) = self.teacher_force(pair)?;
        let p = &self.params;
        let d = p.dims.hidden_dim;
        let adapter = self.active_adapter();
        let mut loss = 0.0;
        let mut d_ctx = vec![0.0; p.dims.emb_dim];
        let mut carry = vec![0.0; d];
        for s in steps.iter().rev() {
            loss -= s.probs[s.target as usize].ln();
            let mut d_logits = s.probs.clone();
            d_logits[s.target as usize] -= 1.0;
            g.base.w_out.add_outer(&d_logits, &s.out);
            axpy(1.0, &d_logits, &mut g.base.out_bias);

            let mut d_out = carry;
            p.w_out.mul_t_add(&d_logits, &mut d_out);

            let mut d_gate = d_out.clone();
            if let (Some(a), Some(ga)) = (adapter, g.adapter.as_mut()) {
                ga.up.add_outer(&d_out, &s.relu);
                let mut d_u = vec![0.0; a.up.cols];
                a.up.mul_t_add(&d_out, &mut d_u);
                for (du, &u) in d_u.iter_mut().zip(&s.pre_relu) {
                    if u <= 0.0 {
                        *du = 0.0;
                    }
                }
                ga.down.add_outer(&d_u, &s.gate);
                a.down.mul_t_add(&d_u, &mut d_gate);
            }

            let d_pre: Vec<f64> = d_gate
                .iter()
                .zip(&s.gate)
                .map(|(dg, gv)| dg * (1.0 - gv * gv))
                .collect();
            g.base.w_ctx.add_outer(&d_pre, &context);
            p.w_ctx.mul_t_add(&d_pre, &mut d_ctx);
            let emb = p.embedding.row(s.input as usize);
            g.base.w_tok.add_outer(&d_pre, emb);
            p.w_tok.mul_t_add(&d_pre, g.base.embedding.row_mut(s.input as usize));
            g.base.w_rec.add_outer(&d_pre, &s.prev);
            axpy(1.0, &d_pre, &mut g.base.bias);

            carry = vec![0.0; d];
            p.w_rec.mul_t_add(&d_pre, &mut carry);
        }
        let inv = 1.0 / pair.source.len() as f64;
        for &tok in pair.source.ids() {
            axpy(inv, &d_ctx, g.base.embedding.row_mut(tok as usize));
        }
        Ok((loss, steps.len()))
    }

    /// Teacher-forced SGD. In `AdaptersOnly` mode an identity adapter for
    /// `corpus.lang` is attached if needed and is the only tensor updated.
    pub fn train(
        &mut self,
        corpus: &ParallelCorpus,
        cfg: &TrainConfig,
        trainable: Trainable,
    ) -> Result<TrainReport> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        if trainable == Trainable::AdaptersOnly {
            self.attach_adapter(&corpus.lang, cfg.seed ^ 0xada9_7e55);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut epoch_tokens = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let mut grads = Gradients::zeros_like(self);
                let mut batch_tokens = 0usize;
                for &i in batch {
                    let (l, n) = self.accumulate_gradients(&corpus.pairs[i], &mut grads)?;
                    epoch_loss += l;
                    batch_tokens += n;
                }
                epoch_tokens += batch_tokens;
                if !epoch_loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, loss: epoch_loss });
                }
                grads.scale(1.0 / batch_tokens as f64);
                let norm = grads.norm(trainable);
                if norm > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / norm);
                }
                self.apply(&grads, cfg.learning_rate, trainable);
            }
            let mean = epoch_loss / epoch_tokens as f64;
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, loss: mean });
            }
            epoch_losses.push(mean);
        }
        Ok(TrainReport { epoch_losses })
    }

    fn apply(&mut self, grads: &Gradients, lr: f64, trainable: Trainable) {
        if lr == 0.0 {
            return;
        }
        let ids: &[ParamId] = match trainable {
            Trainable::All => &[
                ParamId::Embedding,
                ParamId::CtxProj,
                ParamId::TokProj,
                ParamId::Recurrent,
                ParamId::Bias,
                ParamId::OutProj,
                ParamId::OutBias,
                ParamId::AdapterDown,
                ParamId::AdapterUp,
            ],
            Trainable::AdaptersOnly => &ParamId::ADAPTER,
        };
        for &id in ids {
            let (Some(g), Some(p)) = (grads.tensor(id), self.tensor_mut(id)) else {
                continue;
            };
            axpy(-lr, g, p);
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.params.dims;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for dim in [d.emb_dim, d.hidden_dim, d.vocab_size, d.adapter_rank] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for t in self.params.tensors() {
            write_f64s(&mut w, t)?;
        }
        w.write_all(&(self.adapters.len() as u32).to_le_bytes())?;
        for (lang, a) in &self.adapters {
            w.write_all(&(lang.len() as u32).to_le_bytes())?;
            w.write_all(lang.as_bytes())?;
            write_f64s(&mut w, &a.down.data)?;
            write_f64s(&mut w, &a.up.data)?;
        }
        Ok(())
    }

    /// Reads a checkpoint; adapters are loaded but none is activated.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format_err("checkpoint", format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err("checkpoint", format!("unsupported version {version}")));
        }
        let dims = ModelDims {
            emb_dim: read_u32(&mut r)? as usize,
            hidden_dim: read_u32(&mut r)? as usize,
            vocab_size: read_u32(&mut r)? as usize,
            adapter_rank: read_u32(&mut r)? as usize,
        };
        let mut params = RefModelParams::zeros(dims)?;
        for t in params.tensors_mut() {
            read_f64s(&mut r, t)?;
        }
        if !params.all_finite() {
            return Err(format_err("checkpoint", "non-finite parameter"));
        }
        let mut model = RefModel::from_params(params);
        let count = read_u32(&mut r)?;
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut tag = vec![0u8; len];
            r.read_exact(&mut tag)?;
            let tag = String::from_utf8(tag).map_err(|e| format_err("checkpoint", e.to_string()))?;
            let mut a = AdapterParams {
                down: Matrix::zeros(dims.adapter_rank, dims.hidden_dim),
                up: Matrix::zeros(dims.hidden_dim, dims.adapter_rank),
            };
            read_f64s(&mut r, &mut a.down.data)?;
            read_f64s(&mut r, &mut a.up.data)?;
            model.adapters.insert(tag, a);
        }
        Ok(model)
    }
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 8];
    r.read_exact(&mut buf)?;
    for (v, chunk) in out.iter_mut().zip(buf.chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl StepModel for RefModel {
    fn hidden_dim(&self) -> usize {
        self.params.dims.hidden_dim
    }

    fn vocab_size(&self) -> usize {
        self.params.dims.vocab_size
    }

    fn encode(&self, source: &Sentence) -> Result<Vec<f64>> {
        if source.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        let mut c = vec![0.0; self.params.dims.emb_dim];
        for &tok in source.ids() {
            self.check_token(tok)?;
            axpy(1.0, self.params.embedding.row(tok as usize), &mut c);
        }
        let inv = 1.0 / source.len() as f64;
        c.iter_mut().for_each(|v| *v *= inv);
        Ok(c)
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.params.dims.hidden_dim]
    }

    fn step(&self, context: &[f64], state: &[f64], prev: u32) -> Result<StepOutput> {
        let d = self.params.dims;
        if context.len() != d.emb_dim {
            return Err(Error::DimensionMismatch {
                expected: d.emb_dim,
                actual: context.len(),
            });
        }
        if state.len() != d.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: d.hidden_dim,
                actual: state.len(),
            });
        }
        self.check_token(prev)?;
        let cache = self.forward_step(context, state, prev);
        Ok(StepOutput {
            hidden: cache.out.clone(),
            dist: Distribution::from_raw(cache.probs),
            state: cache.out,
        })
    }
}

/// Options for the finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Coordinates sampled from every checked tensor.
    pub per_tensor: usize,
    pub seed: u64,
    /// Multiplies the analytic gradient of one tensor (fault injection).
    pub perturb: Option<(ParamId, f64)>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            epsilon: 1e-4,
            per_tensor: 8,
            seed: 0,
            perturb: None,
        }
    }
}

/// Maximum relative error between analytic and central-difference
/// gradients of the per-pair loss, over sampled coordinates of every base
/// tensor and of the active adapter. At least 50 coordinates are checked.
pub fn grad_check(model: &RefModel, pair: &SentencePair, opts: &GradCheck) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&opts.epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be in [1e-6, 1e-3], got {}",
            opts.epsilon
        )));
    }
    let (_, mut grads) = model.gradients(pair)?;
    if let Some((id, factor)) = opts.perturb {
        if let Some(t) = grads.tensor_mut(id) {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
    let mut ids: Vec<ParamId> = ParamId::BASE.to_vec();
    if model.active_adapter().is_some() {
        ids.extend(ParamId::ADAPTER);
    }
    let per_tensor = opts.per_tensor.max(50usize.div_ceil(ids.len()));
    let emb_dim = model.params.dims.emb_dim;
    let mut used_rows: Vec<u32> = pair
        .source
        .ids()
        .iter()
        .chain(pair.target.ids())
        .copied()
        .chain([BOS])
        .collect();
    used_rows.sort_unstable();
    used_rows.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for id in ids {
        let len = model.tensor(id).map_or(0, <[f64]>::len);
        if len == 0 {
            continue;
        }
        for _ in 0..per_tensor {
            let coord = if id == ParamId::Embedding {
                let row = used_rows[rng.random_range(0..used_rows.len())] as usize;
                row * emb_dim + rng.random_range(0..emb_dim)
            } else {
                rng.random_range(0..len)
            };
            let original = model.tensor(id).unwrap()[coord];
            probe.tensor_mut(id).unwrap()[coord] = original + opts.epsilon;
            let (plus, _) = probe.pair_loss(pair)?;
            probe.tensor_mut(id).unwrap()[coord] = original - opts.epsilon;
            let (minus, _) = probe.pair_loss(pair)?;
            probe.tensor_mut(id).unwrap()[coord] = original;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let analytic = grads.tensor(id).unwrap()[coord];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

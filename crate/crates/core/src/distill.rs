//! Training loops: cross-entropy teacher training and teacher→student
//! distillation with optional intermediate-layer supervision through the
//! logit lens.
//!
//! `L_total = L_task + λ · L_inter`, where `L_task` compares the final output
//! distributions and `L_inter` averages a divergence between lensed teacher
//! and student distributions over the mapped layer pairs. The teacher is
//! evaluated as constants, so only student parameters move.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{self, DivergenceError, DivergenceKind};
use crate::lens::{self, LensConfig, LensError, Unembedding};
use crate::model::{BoundParams, ModelConfig, ModelError, Transformer};
use crate::rng::{self, Rng};
use crate::synth::{Example, PAD};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("layer mapping: {0}")]
    Mapping(String),
    #[error("vocab mismatch: teacher {teacher}, student {student}")]
    VocabMismatch { teacher: usize, student: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step} (l_task={l_task:?}, l_inter={l_inter:?}): {detail}")]
    NonFinite {
        step: usize,
        l_task: Option<f64>,
        l_inter: Option<f64>,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lens(#[from] LensError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DistillError> = std::result::Result<T, E>;

/// `round(num / den)` with ties away from zero, for non-negative operands.
fn div_round_half_up(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

/// Student layer pairs `(l, l′)`, 1-based, strictly increasing in both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerMapping {
    pairs: Vec<(usize, usize)>,
}

impl LayerMapping {
    pub fn new(pairs: Vec<(usize, usize)>, student_layers: usize, teacher_layers: usize) -> Result<Self> {
        for &(l, lt) in &pairs {
            if !(1..=student_layers).contains(&l) || !(1..=teacher_layers).contains(&lt) {
                return Err(DistillError::Mapping(format!(
                    "pair ({l}, {lt}) outside 1..={student_layers} x 1..={teacher_layers}"
                )));
            }
        }
        if pairs.windows(2).any(|w| w[1].0 <= w[0].0 || w[1].1 <= w[0].1) {
            return Err(DistillError::Mapping(format!(
                "pairs must be strictly increasing in both layers: {pairs:?}"
            )));
        }
        Ok(Self { pairs })
    }

    pub fn empty() -> Self {
        Self { pairs: Vec::new() }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn student_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn teacher_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

impl fmt::Display for LayerMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.pairs.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// `K` equally spaced student layers, `l_k = round(k · L_S / (K + 1))`,
/// excluding the final layer.
pub fn select_student_layers(student_layers: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k >= student_layers {
        return Err(DistillError::Mapping(format!(
            "K must be in 1..={} for {student_layers} student layers, got {k}",
            student_layers.saturating_sub(1)
        )));
    }
    Ok((1..=k).map(|i| div_round_half_up(i * student_layers, k + 1)).collect())
}

/// Pairs each student layer with `round(l · L_T / L_S)`, clamped to
/// `1..=L_T`.
pub fn uniform_map(layers: &[usize], student_layers: usize, teacher_layers: usize) -> Result<LayerMapping> {
    if layers.is_empty() {
        return Err(DistillError::Mapping("empty student layer list".into()));
    }
    if teacher_layers < student_layers {
        return Err(DistillError::Mapping(format!(
            "teacher depth {teacher_layers} is below student depth {student_layers}"
        )));
    }
    let pairs = layers
        .iter()
        .map(|&l| {
            let lt = div_round_half_up(l * teacher_layers, student_layers).clamp(1, teacher_layers);
            (l, lt)
        })
        .collect();
    LayerMapping::new(pairs, student_layers, teacher_layers)
}

/// `task + λ · inter`.
pub fn total_loss(task: f64, inter: f64, lambda: f64) -> f64 {
    task + lambda * inter
}

/// Mean over pairs of the token-weighted divergence between teacher and
/// student distributions. Both slices hold one `[.., V]` node per pair.
pub fn intermediate_loss_graph(
    g: &mut Graph,
    teacher: &[Var],
    student: &[Var],
    kind: DivergenceKind,
    weights: &[f64],
) -> Result<Var> {
    if teacher.is_empty() || teacher.len() != student.len() {
        return Err(DistillError::Mapping(format!(
            "{} teacher vs {} student distributions",
            teacher.len(),
            student.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&p, &q) in teacher.iter().zip(student) {
        let d = divergence::divergence_loss(g, kind, p, q, weights)?;
        acc = Some(match acc {
            None => d,
            Some(a) => g.add(a, d)?,
        });
    }
    let sum = acc.expect("nonempty");
    Ok(g.scale(sum, 1.0 / teacher.len() as f64)?)
}

/// Per-pair token-averaged divergences between lensed distributions of two
/// forward traces over the same tokens. `weights` (one per token, default
/// all ones) selects the positions.
#[allow(clippy::too_many_arguments)]
pub fn per_pair_divergence(
    teacher: &Transformer,
    teacher_trace: &crate::model::ForwardTrace,
    student: &Transformer,
    student_trace: &crate::model::ForwardTrace,
    mapping: &LayerMapping,
    kind: DivergenceKind,
    lens_cfg: &LensConfig,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    check_vocab(teacher.config(), student.config())?;
    let t_dists = lens::lens_all_layers(teacher_trace, teacher, &mapping.teacher_layers(), lens_cfg)?;
    let s_dists = lens::lens_all_layers(student_trace, student, &mapping.student_layers(), lens_cfg)?;
    t_dists
        .iter()
        .zip(&s_dists)
        .map(|(p, q)| weighted_row_mean(kind, p, q, weights))
        .collect()
}

fn weighted_row_mean(kind: DivergenceKind, p: &Tensor, q: &Tensor, weights: Option<&[f64]>) -> Result<f64> {
    let rows = divergence::rowwise(kind, p, q)?;
    let (num, den) = match weights {
        Some(w) => {
            if w.len() != rows.len() {
                return Err(DistillError::InvalidConfig(format!(
                    "{} weights for {} tokens",
                    w.len(),
                    rows.len()
                )));
            }
            (
                rows.iter().zip(w).map(|(r, w)| r * w).sum::<f64>(),
                w.iter().sum::<f64>(),
            )
        }
        None => (rows.iter().sum(), rows.len() as f64),
    };
    Ok(num / den)
}

/// `L_inter` between two traces: the mean of [`per_pair_divergence`].
#[allow(clippy::too_many_arguments)]
pub fn intermediate_loss(
    teacher: &Transformer,
    teacher_trace: &crate::model::ForwardTrace,
    student: &Transformer,
    student_trace: &crate::model::ForwardTrace,
    mapping: &LayerMapping,
    kind: DivergenceKind,
    lens_cfg: &LensConfig,
    weights: Option<&[f64]>,
) -> Result<f64> {
    if mapping.is_empty() {
        return Err(DistillError::Mapping("empty mapping".into()));
    }
    let per = per_pair_divergence(
        teacher,
        teacher_trace,
        student,
        student_trace,
        mapping,
        kind,
        lens_cfg,
        weights,
    )?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn check_vocab(t: &ModelConfig, s: &ModelConfig) -> Result<()> {
    if t.vocab_size != s.vocab_size {
        return Err(DistillError::VocabMismatch {
            teacher: t.vocab_size,
            student: s.vocab_size,
        });
    }
    Ok(())
}

/// Final-output objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskLoss {
    /// Cross entropy against the corpus tokens.
    Sft,
    Kd(DivergenceKind),
}

impl FromStr for TaskLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "sft" {
            return Ok(Self::Sft);
        }
        s.parse::<DivergenceKind>()
            .map(Self::Kd)
            .map_err(|_| format!("unknown task loss `{s}` (sft, fkl, rkl, jsd, jeffreys)"))
    }
}

impl fmt::Display for TaskLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sft => f.write_str("sft"),
            Self::Kd(k) => write!(f, "{k}"),
        }
    }
}

/// Intermediate-layer objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterLoss {
    /// Divergence between lensed distributions.
    Lens(DivergenceKind),
    /// Squared error between student states and a learned projection of
    /// teacher states.
    Mse,
}

impl FromStr for InterLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "mse" {
            return Ok(Self::Mse);
        }
        s.parse::<DivergenceKind>()
            .map(Self::Lens)
            .map_err(|_| format!("unknown intermediate loss `{s}` (fkl, rkl, jsd, jeffreys, mse)"))
    }
}

impl fmt::Display for InterLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Lens(k) => write!(f, "{k}"),
            Self::Mse => f.write_str("mse"),
        }
    }
}

macro_rules! serde_via_str {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

serde_via_str!(TaskLoss);
serde_via_str!(InterLoss);

/// Optimizer, schedule and batching shared by both training loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Restrict losses to positions predicting response tokens and EOS.
    pub response_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr_init: 3e-3,
            lr_final: 1e-7,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            response_only: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DistillError::InvalidConfig(m.into()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.lr_init > 0.0 && self.lr_final >= 0.0 && self.lr_final <= self.lr_init) {
            return bad("learning rates must satisfy 0 <= lr_final <= lr_init, lr_init > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be non-negative");
        }
        Ok(())
    }

    /// Cosine decay from `lr_init` at step 0 to `lr_final` at the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr_init;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub student: ModelConfig,
    pub task_loss: TaskLoss,
    pub inter_loss: InterLoss,
    pub lambda: f64,
    /// Number of intermediate student layers; 0 disables `L_inter`.
    pub k: usize,
    /// Explicit `(student, teacher)` pairs; overrides `k` when set.
    pub mapping: Option<Vec<(usize, usize)>>,
    pub lens: LensConfig,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student: ModelConfig::student_default(),
            task_loss: TaskLoss::Kd(DivergenceKind::Rkl),
            inter_loss: InterLoss::Lens(DivergenceKind::Jsd),
            lambda: 1.0,
            k: 2,
            mapping: None,
            lens: LensConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, teacher: &ModelConfig) -> Result<LayerMapping> {
        self.student.validate()?;
        self.lens.validate()?;
        self.train.validate()?;
        check_vocab(teacher, &self.student)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DistillError::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        self.resolve_mapping(teacher.n_layers)
    }

    pub fn resolve_mapping(&self, teacher_layers: usize) -> Result<LayerMapping> {
        let ls = self.student.n_layers;
        match &self.mapping {
            Some(pairs) => LayerMapping::new(pairs.clone(), ls, teacher_layers),
            None if self.k == 0 => Ok(LayerMapping::empty()),
            None => uniform_map(&select_student_layers(ls, self.k)?, ls, teacher_layers),
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_task: f64,
    pub l_inter: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Right-padded next-token batch: `inputs` and `targets` are `[batch, seq]`
/// row-major, `weights` is 1 where a loss applies and 0 on padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Each example becomes `BOS prompt response EOS`, shifted by one for
    /// targets.
    pub fn from_examples(examples: &[&Example], response_only: bool) -> Result<Self> {
        if examples.is_empty() {
            return Err(DistillError::EmptyDataset);
        }
        let seqs: Vec<Vec<usize>> = examples.iter().map(|e| e.full_sequence()).collect();
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0) - 1;
        let batch = seqs.len();
        let mut inputs = vec![PAD; batch * seq];
        let mut targets = vec![PAD; batch * seq];
        let mut weights = vec![0.0; batch * seq];
        for (b, (s, ex)) in seqs.iter().zip(examples).enumerate() {
            let first = if response_only { ex.prompt.len() } else { 0 };
            for t in 0..s.len() - 1 {
                inputs[b * seq + t] = s[t];
                targets[b * seq + t] = s[t + 1];
                if t >= first {
                    weights[b * seq + t] = 1.0;
                }
            }
        }
        Ok(Self {
            inputs,
            targets,
            weights,
            batch,
            seq,
        })
    }

    pub fn mask(&self) -> Vec<bool> {
        self.weights.iter().map(|&w| w > 0.0).collect()
    }
}

/// Endless shuffled passes over a dataset.
pub struct BatchSampler<'a> {
    data: &'a [Example],
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(data: &'a [Example], rng: Rng) -> Result<Self> {
        if data.is_empty() {
            return Err(DistillError::EmptyDataset);
        }
        let order = (0..data.len()).collect();
        let mut s = Self {
            data,
            order,
            cursor: data.len(),
            rng,
        };
        s.refill();
        Ok(s)
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_indices(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.refill();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    pub fn next_examples(&mut self, size: usize) -> Vec<&'a Example> {
        let data = self.data;
        self.next_indices(size).into_iter().map(|i| &data[i]).collect()
    }
}

/// Adaptive moments with decoupled weight decay on matrices (rank ≥ 2).
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m,
            v,
            t: 0,
        }
    }

    pub fn step<'p>(&mut self, params: impl IntoIterator<Item = &'p mut Tensor>, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

fn collect_grads(
    g: &Graph,
    loss: Var,
    bound: &BoundParams,
    extra: &[Var],
    step: usize,
    losses: (f64, f64),
) -> Result<Vec<Vec<f64>>> {
    let mut grads = g.backward(loss)?;
    let vars: Vec<Var> = bound.iter().map(|(_, v)| v).chain(extra.iter().copied()).collect();
    let out: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();
    if let Some((i, _)) = out.iter().enumerate().find(|(_, gr)| gr.iter().any(|x| !x.is_finite())) {
        let name = bound.iter().nth(i).map_or("projection", |(n, _)| n);
        return Err(DistillError::NonFinite {
            step,
            l_task: Some(losses.0),
            l_inter: Some(losses.1),
            detail: format!("gradient of `{name}` is not finite"),
        });
    }
    Ok(out)
}

fn non_finite(step: usize, e: impl fmt::Display) -> DistillError {
    DistillError::NonFinite {
        step,
        l_task: None,
        l_inter: None,
        detail: e.to_string(),
    }
}

fn check_lengths(cfg: &ModelConfig, data: &[Example]) -> Result<()> {
    // The model sees the sequence without its final token.
    if let Some(ex) = data
        .iter()
        .find(|e| e.prompt.len() + e.response.len() + 1 > cfg.max_seq_len)
    {
        return Err(DistillError::InvalidConfig(format!(
            "example of {} tokens exceeds max_seq_len {}",
            ex.prompt.len() + ex.response.len() + 2,
            cfg.max_seq_len
        )));
    }
    if let Some(&id) = data
        .iter()
        .flat_map(|e| e.prompt.iter().chain(&e.response))
        .find(|&&id| id >= cfg.vocab_size)
    {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        }
        .into());
    }
    Ok(())
}

/// Standard next-token cross-entropy training from `model`'s current
/// weights. `on_step` sees every record as it is produced.
pub fn train_teacher(
    mut model: Transformer,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord) -> std::io::Result<()>,
) -> Result<Transformer> {
    cfg.validate()?;
    check_lengths(model.config(), data)?;
    let mut sampler = BatchSampler::new(data, rng::stream(cfg.seed, "batches"))?;
    let mut opt = AdamW::new(cfg, model.params().values().map(Tensor::numel));
    let start = Instant::now();
    for step in 0..cfg.steps {
        let batch = Batch::from_examples(&sampler.next_examples(cfg.batch_size), cfg.response_only)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let trace = model
            .forward_graph(&mut g, &bound, &batch.inputs, batch.batch, batch.seq)
            .map_err(|e| non_finite(step, e))?;
        let loss = g
            .cross_entropy(trace.logits, &batch.targets, &batch.mask())
            .map_err(|e| non_finite(step, e))?;
        let l_task = g.value(loss).item();
        let mut grads = collect_grads(&g, loss, &bound, &[], step, (l_task, 0.0))?;
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = cfg.lr_at(step);
        opt.step(model.params_mut().map(|(_, t)| t), &grads, lr);
        let rec = StepRecord {
            step,
            l_task,
            l_inter: 0.0,
            l_total: l_task,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_step(&rec).map_err(|e| DistillError::InvalidConfig(format!("metrics sink: {e}")))?;
    }
    Ok(model)
}

/// Teacher outputs for one padded batch: `[batch, seq, V]` final
/// distributions plus one `[batch, seq, width]` tensor per mapped layer
/// (lensed distributions, or raw states for feature regression).
struct TeacherView {
    final_probs: Tensor,
    layers: Vec<Tensor>,
}

/// Per-example teacher outputs, filled on first use. Because no row of a
/// forward pass depends on other sequences in the batch or on later
/// positions, cached rows equal the rows an in-batch forward would produce.
struct TeacherCache<'a> {
    teacher: &'a Transformer,
    teacher_layers: Vec<usize>,
    inter: InterLoss,
    lens: LensConfig,
    /// Per example: final distributions, then each mapped layer, each
    /// `positions × width` row-major.
    entries: Vec<Option<Vec<Vec<f64>>>>,
}

impl<'a> TeacherCache<'a> {
    fn new(teacher: &'a Transformer, n: usize, mapping: &LayerMapping, inter: InterLoss, lens: LensConfig) -> Self {
        Self {
            teacher,
            teacher_layers: mapping.teacher_layers(),
            inter,
            lens,
            entries: vec![None; n],
        }
    }

    fn fill(&mut self, data: &[Example], idxs: &[usize]) -> Result<()> {
        let mut missing: Vec<usize> = idxs.iter().copied().filter(|&i| self.entries[i].is_none()).collect();
        missing.sort_unstable();
        missing.dedup();
        if missing.is_empty() {
            return Ok(());
        }
        let examples: Vec<&Example> = missing.iter().map(|&i| &data[i]).collect();
        let batch = Batch::from_examples(&examples, false)?;
        let teacher = self.teacher;
        let mut g = Graph::new();
        let bound = teacher.bind(&mut g, false);
        let trace = teacher.forward_graph(&mut g, &bound, &batch.inputs, batch.batch, batch.seq)?;
        let probs = g.softmax(trace.logits)?;
        let mut full = vec![g.value(probs).clone()];
        let unembed = Unembedding::of(teacher);
        for &lt in &self.teacher_layers {
            let h = g.value(trace.hidden[lt]);
            full.push(match self.inter {
                InterLoss::Lens(_) => lens::logit_lens(h, &unembed, &self.lens)?,
                InterLoss::Mse => h.clone(),
            });
        }
        for (b, (&idx, ex)) in missing.iter().zip(&examples).enumerate() {
            let positions = ex.prompt.len() + ex.response.len() + 1;
            let rows = full
                .iter()
                .map(|t| {
                    let w = t.cols();
                    t.data()[b * batch.seq * w..(b * batch.seq + positions) * w].to_vec()
                })
                .collect();
            self.entries[idx] = Some(rows);
        }
        Ok(())
    }

    /// Padded batch view; padding rows are zero.
    fn view(&self, idxs: &[usize], seq: usize) -> Result<TeacherView> {
        let n_tensors = 1 + self.teacher_layers.len();
        let mut out: Vec<Tensor> = Vec::with_capacity(n_tensors);
        for slot in 0..n_tensors {
            let width = self.entries[idxs[0]].as_ref().expect("filled")[slot].len() / self.positions(idxs[0]);
            let mut data = vec![0.0; idxs.len() * seq * width];
            for (b, &i) in idxs.iter().enumerate() {
                let rows = &self.entries[i].as_ref().expect("filled")[slot];
                data[b * seq * width..b * seq * width + rows.len()].copy_from_slice(rows);
            }
            out.push(Tensor::new(vec![idxs.len(), seq, width], data)?);
        }
        let final_probs = out.remove(0);
        Ok(TeacherView {
            final_probs,
            layers: out,
        })
    }

    fn positions(&self, idx: usize) -> usize {
        let e = self.entries[idx].as_ref().expect("filled");
        e[0].len() / self.teacher.config().vocab_size
    }
}

/// Result of a distillation run.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: Transformer,
    pub mapping: LayerMapping,
}

/// Trains a freshly initialized student (seeded from `cfg.train.seed`)
/// against a frozen teacher.
pub fn distill(
    teacher: &Transformer,
    data: &[Example],
    cfg: &DistillConfig,
    on_step: impl FnMut(&StepRecord) -> std::io::Result<()>,
) -> Result<DistillOutcome> {
    let mut init_rng = rng::stream(cfg.train.seed, "student-init");
    let student = Transformer::init(cfg.student.clone(), &mut init_rng)?;
    distill_from(teacher, student, data, cfg, on_step)
}

/// As [`distill`], starting from the given student weights.
pub fn distill_from(
    teacher: &Transformer,
    mut student: Transformer,
    data: &[Example],
    cfg: &DistillConfig,
    mut on_step: impl FnMut(&StepRecord) -> std::io::Result<()>,
) -> Result<DistillOutcome> {
    if student.config() != &cfg.student {
        return Err(DistillError::InvalidConfig(
            "student weights do not match the configured student".into(),
        ));
    }
    let mapping = cfg.validate(teacher.config())?;
    check_lengths(teacher.config(), data)?;
    check_lengths(student.config(), data)?;
    let tc = &cfg.train;
    let mut sampler = BatchSampler::new(data, rng::stream(tc.seed, "batches"))?;

    // The feature-regression projection is trained alongside the student and
    // discarded afterwards.
    let (d_s, d_t) = (cfg.student.d_model, teacher.config().d_model);
    let mut projection = match cfg.inter_loss {
        InterLoss::Mse if !mapping.is_empty() => {
            let mut r = rng::stream(tc.seed, "projection");
            Some(Tensor::randn(&[d_s, d_t], 0.02, &mut r))
        }
        _ => None,
    };
    let sizes = student
        .params()
        .values()
        .map(Tensor::numel)
        .chain(projection.iter().map(Tensor::numel));
    let mut opt = AdamW::new(tc, sizes);
    let mut cache = TeacherCache::new(teacher, data.len(), &mapping, cfg.inter_loss, cfg.lens);
    let start = Instant::now();

    for step in 0..tc.steps {
        let idxs = sampler.next_indices(tc.batch_size);
        let examples: Vec<&Example> = idxs.iter().map(|&i| &data[i]).collect();
        let batch = Batch::from_examples(&examples, tc.response_only)?;
        cache.fill(data, &idxs).map_err(|e| non_finite(step, e))?;
        let tv = cache.view(&idxs, batch.seq)?;

        let mut g = Graph::new();
        let bound = student.bind(&mut g, true);
        let proj_var = projection.as_ref().map(|p| g.param(p.clone()));
        let built = (|| -> Result<(Var, Option<Var>)> {
            let trace = student.forward_graph(&mut g, &bound, &batch.inputs, batch.batch, batch.seq)?;
            let task = match cfg.task_loss {
                TaskLoss::Sft => g.cross_entropy(trace.logits, &batch.targets, &batch.mask())?,
                TaskLoss::Kd(kind) => {
                    let q = g.softmax(trace.logits)?;
                    let p = g.constant(tv.final_probs.clone());
                    divergence::divergence_loss(&mut g, kind, p, q, &batch.weights)?
                }
            };
            if mapping.is_empty() {
                return Ok((task, None));
            }
            let inter = match cfg.inter_loss {
                InterLoss::Lens(kind) => {
                    let mut ps = Vec::new();
                    let mut qs = Vec::new();
                    for (&(l, _), dist) in mapping.pairs().iter().zip(&tv.layers) {
                        ps.push(g.constant(dist.clone()));
                        qs.push(lens::lens_graph(&mut g, &student, &bound, trace.hidden[l], &cfg.lens)?);
                    }
                    intermediate_loss_graph(&mut g, &ps, &qs, kind, &batch.weights)?
                }
                InterLoss::Mse => {
                    let w = proj_var.expect("projection exists when mapping is nonempty");
                    let mut acc: Option<Var> = None;
                    for (&(l, _), h_t) in mapping.pairs().iter().zip(&tv.layers) {
                        let ht = g.constant(h_t.clone());
                        let proj = g.matmul_bt(ht, w)?;
                        let diff = g.sub(proj, trace.hidden[l])?;
                        let sq = g.mul(diff, diff)?;
                        let rows = g.sum_last(sq)?;
                        let d = g.weighted_mean(rows, &batch.weights)?;
                        acc = Some(match acc {
                            None => d,
                            Some(a) => g.add(a, d)?,
                        });
                    }
                    let sum = acc.expect("nonempty mapping");
                    g.scale(sum, 1.0 / mapping.len() as f64)?
                }
            };
            Ok((task, Some(inter)))
        })();
        let (task, inter) = built.map_err(|e| non_finite(step, e))?;

        // With λ = 0 the intermediate term is reported but kept off the
        // loss path, so the update matches a task-only run exactly.
        let loss = match inter {
            Some(i) if cfg.lambda > 0.0 => {
                let scaled = g.scale(i, cfg.lambda).map_err(|e| non_finite(step, e))?;
                g.add(task, scaled).map_err(|e| non_finite(step, e))?
            }
            _ => task,
        };
        let l_task = g.value(task).item();
        let l_inter = inter.map_or(0.0, |i| g.value(i).item());
        let l_total = g.value(loss).item();

        let extra: Vec<Var> = proj_var.into_iter().collect();
        let mut grads = collect_grads(&g, loss, &bound, &extra, step, (l_task, l_inter))?;
        clip_global_norm(&mut grads, tc.grad_clip);
        let lr = tc.lr_at(step);
        opt.step(
            student.params_mut().map(|(_, t)| t).chain(projection.as_mut()),
            &grads,
            lr,
        );
        let rec = StepRecord {
            step,
            l_task,
            l_inter,
            l_total,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_step(&rec).map_err(|e| DistillError::InvalidConfig(format!("metrics sink: {e}")))?;
    }
    Ok(DistillOutcome { student, mapping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn student_layer_selection_matches_published_sets() {
        assert_eq!(select_student_layers(12, 5).unwrap(), vec![2, 4, 6, 8, 10]);
        assert_eq!(select_student_layers(24, 5).unwrap(), vec![4, 8, 12, 16, 20]);
        assert_eq!(select_student_layers(22, 5).unwrap(), vec![4, 7, 11, 15, 18]);
        assert_eq!(select_student_layers(3, 2).unwrap(), vec![1, 2]);
        assert!(select_student_layers(3, 3).is_err());
        assert!(select_student_layers(3, 0).is_err());
    }

    #[test]
    fn uniform_map_cases() {
        let m = uniform_map(&[2, 4, 6, 8, 10], 12, 48).unwrap();
        assert_eq!(m.teacher_layers(), vec![8, 16, 24, 32, 40]);
        let m = uniform_map(&[1, 2], 3, 6).unwrap();
        assert_eq!(m.pairs(), &[(1, 2), (2, 4)]);
        let id = uniform_map(&[1, 3, 5], 6, 6).unwrap();
        assert_eq!(id.teacher_layers(), vec![1, 3, 5]);
        assert!(uniform_map(&[], 3, 6).is_err());
        assert!(uniform_map(&[1], 6, 3).is_err());
    }

    #[test]
    fn mapping_validation() {
        assert!(LayerMapping::new(vec![(1, 2), (1, 4)], 3, 6).is_err());
        assert!(LayerMapping::new(vec![(1, 4), (2, 4)], 3, 6).is_err());
        assert!(LayerMapping::new(vec![(0, 1)], 3, 6).is_err());
        assert!(LayerMapping::new(vec![(1, 7)], 3, 6).is_err());
        let m = LayerMapping::new(vec![(1, 2), (2, 4)], 3, 6).unwrap();
        assert_eq!(m.to_string(), "1:2,2:4");
    }

    #[test]
    fn total_loss_is_affine() {
        assert_eq!(total_loss(0.5, 0.25, 1.0), 0.75);
        assert_eq!(total_loss(0.5, 123.0, 0.0), 0.5);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            steps: 11,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), cfg.lr_init);
        assert!((cfg.lr_at(10) - cfg.lr_final).abs() < 1e-18);
        let mid = cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final);
        assert!((cfg.lr_at(5) - mid).abs() < 1e-15);
        assert!((1..11).all(|s| cfg.lr_at(s) < cfg.lr_at(s - 1)));
    }

    #[test]
    fn batch_layout_and_masks() {
        let a = Example {
            prompt: vec![5, 6],
            response: vec![7],
        };
        let b = Example {
            prompt: vec![8],
            response: vec![9],
        };
        let batch = Batch::from_examples(&[&a, &b], false).unwrap();
        assert_eq!((batch.batch, batch.seq), (2, 4));
        assert_eq!(batch.inputs, vec![1, 5, 6, 7, 1, 8, 9, 0]);
        assert_eq!(batch.targets, vec![5, 6, 7, 2, 8, 9, 2, 0]);
        assert_eq!(batch.weights, vec![1., 1., 1., 1., 1., 1., 1., 0.]);
        let r = Batch::from_examples(&[&a, &b], true).unwrap();
        assert_eq!(r.weights, vec![0., 0., 1., 1., 0., 1., 1., 0.]);
    }

    #[test]
    fn sampler_covers_each_example_once_per_pass() {
        let data: Vec<Example> = (0..7)
            .map(|i| Example {
                prompt: vec![3 + i],
                response: vec![3],
            })
            .collect();
        let mut s = BatchSampler::new(&data, Rng::seed_from_u64(0)).unwrap();
        let mut seen: Vec<usize> = s.next_examples(7).iter().map(|e| e.prompt[0]).collect();
        seen.sort();
        assert_eq!(seen, (3..10).collect::<Vec<_>>());
    }

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = Tensor::from_vec(vec![1.0, 1.0]);
        let mut opt = AdamW::new(&cfg, [2]);
        opt.step([&mut p], &[vec![0.5, -2.0]], 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_only_touches_matrices() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut v = Tensor::from_vec(vec![2.0]);
        let mut m = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let mut opt = AdamW::new(&cfg, [1, 1]);
        opt.step([&mut v, &mut m], &[vec![0.0], vec![0.0]], 0.1);
        assert_eq!(v.data()[0], 2.0);
        assert!((m.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn loss_kinds_parse() {
        assert_eq!("sft".parse::<TaskLoss>().unwrap(), TaskLoss::Sft);
        assert_eq!("rkl".parse::<TaskLoss>().unwrap(), TaskLoss::Kd(DivergenceKind::Rkl));
        assert_eq!("mse".parse::<InterLoss>().unwrap(), InterLoss::Mse);
        assert!("nope".parse::<InterLoss>().is_err());
        let cfg: DistillConfig = serde_json::from_str(r#"{"task_loss":"fkl","lambda":0.5}"#).unwrap();
        assert_eq!(cfg.task_loss, TaskLoss::Kd(DivergenceKind::Fkl));
        assert_eq!(cfg.inter_loss, InterLoss::Lens(DivergenceKind::Jsd));
        assert_eq!(cfg.k, 2);
    }
}

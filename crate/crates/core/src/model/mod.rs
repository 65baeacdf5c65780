//! A small pre-norm GPT-style decoder that exposes every residual-stream
//! state. The same type serves as teacher and student.

pub mod checkpoint;
mod generate;

pub use checkpoint::{CheckpointError, FORMAT_VERSION};
pub use generate::{argmax, generate, sample_index, sample_paths, SamplingConfig};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid sampling parameters: {0}")]
    Sampling(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub tie_unembedding: bool,
}

impl ModelConfig {
    pub fn teacher_default() -> Self {
        Self {
            n_layers: 6,
            d_model: 64,
            n_heads: 4,
            vocab_size: 64,
            max_seq_len: 64,
            tie_unembedding: false,
        }
    }

    pub fn student_default() -> Self {
        Self {
            n_layers: 3,
            d_model: 32,
            n_heads: 2,
            ..Self::teacher_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Name of the `[V, d]` matrix used as the unembedding.
    pub fn unembedding_name(&self) -> &'static str {
        if self.tie_unembedding {
            "wte"
        } else {
            "unembed"
        }
    }

    /// Number of manifest entries, without building the manifest.
    pub fn manifest_len(&self) -> Option<usize> {
        let untied = usize::from(!self.tie_unembedding);
        self.n_layers.checked_mul(16)?.checked_add(4 + untied)
    }

    /// Ordered parameter names and shapes implied by this config.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v) = (self.d_model, self.vocab_size);
        let mut m = vec![
            ("wte".to_string(), vec![v, d]),
            ("wpe".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            m.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.wfc"), vec![d, 4 * d]),
                (p("mlp.bfc"), vec![4 * d]),
                (p("mlp.wproj"), vec![4 * d, d]),
                (p("mlp.bproj"), vec![d]),
            ]);
        }
        m.push(("lnf.g".to_string(), vec![d]));
        m.push(("lnf.b".to_string(), vec![d]));
        if !self.tie_unembedding {
            m.push(("unembed".to_string(), vec![v, d]));
        }
        m
    }
}

/// Config plus named parameters, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    params: IndexMap<String, Tensor>,
}

/// Graph handles for every parameter of a [`Transformer`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct GraphTrace {
    pub logits: Var,
    /// `n_layers + 1` residual states; index 0 is the embedding output.
    pub hidden: Vec<Var>,
}

/// Concrete values of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[batch, seq, V]`
    pub logits: Tensor,
    /// `n_layers + 1` tensors of shape `[batch, seq, d]`.
    pub hidden_states: Vec<Tensor>,
}

/// Layernorm offsets and linear biases: the last dotted segment starts with `b`.
fn is_bias(name: &str) -> bool {
    name.contains('.') && name.rsplit('.').next().is_some_and(|s| s.starts_with('b'))
}

impl Transformer {
    /// GPT-2 style initialization: `N(0, 0.02²)` weights and embeddings, zero
    /// biases, unit layernorm gains.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for (name, shape) in config.manifest() {
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if is_bias(&name) {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, INIT_STD, rng)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Assembles a model from named tensors, checking them against the
    /// config's manifest.
    pub fn from_params(config: ModelConfig, mut named: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for (name, shape) in config.manifest() {
            let t = named
                .shift_remove(&name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.insert(name, t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(ModelError::InvalidConfig(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn unembedding(&self) -> &Tensor {
        &self.params[self.config.unembedding_name()]
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Inserts every parameter into `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    fn check_ids(&self, ids: &[usize], seq: usize) -> Result<()> {
        let cfg = &self.config;
        if ids.is_empty() || seq == 0 {
            return Err(ModelError::Empty("token batch"));
        }
        if seq > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: seq,
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Causal forward pass over `batch` rows of `seq` token ids (row-major).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        ids: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<GraphTrace> {
        if ids.len() != batch * seq {
            return Err(ModelError::InvalidConfig(format!(
                "{} ids for batch {batch} x seq {seq}",
                ids.len()
            )));
        }
        self.check_ids(ids, seq)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = g.embedding(p.get("wte"), ids, &[batch, seq])?;
        let pos = g.embedding(p.get("wpe"), &positions, &[batch, seq])?;
        let mut x = g.add(tok, pos)?;
        let mut hidden = vec![x];

        for l in 0..self.config.n_layers {
            let w = |s: &str| p.get(&format!("blocks.{l}.{s}"));
            let a = g.layernorm(x, w("ln1.g"), w("ln1.b"), LAYERNORM_EPS)?;
            let proj = |g: &mut Graph, wn: &str, bn: &str| -> Result<Var> {
                let m = g.matmul(a, w(wn))?;
                Ok(g.add(m, w(bn))?)
            };
            let q = proj(g, "attn.wq", "attn.bq")?;
            let k = proj(g, "attn.wk", "attn.bk")?;
            let v = proj(g, "attn.wv", "attn.bv")?;
            let att = g.causal_attention(q, k, v, self.config.n_heads)?;
            let o = g.matmul(att, w("attn.wo"))?;
            let o = g.add(o, w("attn.bo"))?;
            x = g.add(x, o)?;

            let m = g.layernorm(x, w("ln2.g"), w("ln2.b"), LAYERNORM_EPS)?;
            let f = g.matmul(m, w("mlp.wfc"))?;
            let f = g.add(f, w("mlp.bfc"))?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, w("mlp.wproj"))?;
            let f = g.add(f, w("mlp.bproj"))?;
            x = g.add(x, f)?;
            hidden.push(x);
        }

        let xf = self.final_norm(g, p, x)?;
        let logits = g.matmul_bt(xf, p.get(self.config.unembedding_name()))?;
        Ok(GraphTrace { logits, hidden })
    }

    pub fn final_norm(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        Ok(g.layernorm(x, p.get("lnf.g"), p.get("lnf.b"), LAYERNORM_EPS)?)
    }

    /// Forward pass over equal-length sequences, returning logits and every
    /// hidden state.
    pub fn forward_with_states(&self, seqs: &[Vec<usize>]) -> Result<ForwardTrace> {
        let (ids, batch, seq) = flatten_batch(seqs)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let trace = self.forward_graph(&mut g, &p, &ids, batch, seq)?;
        Ok(ForwardTrace {
            logits: g.value(trace.logits).clone(),
            hidden_states: trace.hidden.iter().map(|&h| g.value(h).clone()).collect(),
        })
    }
}

/// Row-major ids of equal-length sequences plus `(batch, seq)`.
pub fn flatten_batch(seqs: &[Vec<usize>]) -> Result<(Vec<usize>, usize, usize)> {
    let seq = seqs.first().map(Vec::len).unwrap_or(0);
    if seqs.is_empty() || seq == 0 {
        return Err(ModelError::Empty("token batch"));
    }
    if seqs.iter().any(|s| s.len() != seq) {
        return Err(ModelError::InvalidConfig("ragged token batch".into()));
    }
    Ok((seqs.concat(), seqs.len(), seq))
}

/// Row-wise softmax of a `[.., V]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let y = g.softmax(x).expect("finite logits");
    g.value(y).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 12,
            tie_unembedding: false,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        let bad = ModelConfig { n_heads: 3, ..tiny() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            vocab_size: 0,
            ..tiny()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_follows_manifest() {
        let m = Transformer::init(tiny(), &mut Rng::seed_from_u64(0)).unwrap();
        let names: Vec<_> = m.params().keys().cloned().collect();
        let manifest: Vec<_> = tiny().manifest().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, manifest);
        assert!(m.param("blocks.0.attn.bq").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.param("blocks.1.mlp.bproj").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.param("lnf.g").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(m.param("blocks.0.attn.wq").unwrap().data().iter().any(|&v| v != 0.0));
        let tied = Transformer::init(
            ModelConfig {
                tie_unembedding: true,
                ..tiny()
            },
            &mut Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(tied.param("unembed").is_none());
        assert_eq!(tied.unembedding(), tied.param("wte").unwrap());
    }

    #[test]
    fn trace_shapes() {
        let m = Transformer::init(tiny(), &mut Rng::seed_from_u64(1)).unwrap();
        let tr = m.forward_with_states(&[vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        assert_eq!(tr.logits.shape(), &[2, 3, 11]);
        assert_eq!(tr.hidden_states.len(), 3);
        assert!(tr.hidden_states.iter().all(|h| h.shape() == [2, 3, 8]));
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let m = Transformer::init(tiny(), &mut Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            m.forward_with_states(&[vec![1, 11]]),
            Err(ModelError::TokenOutOfRange { id: 11, .. })
        ));
        assert!(matches!(
            m.forward_with_states(&[vec![1; 13]]),
            Err(ModelError::SequenceTooLong { .. })
        ));
        assert!(m.forward_with_states(&[]).is_err());
    }

    #[test]
    fn causal_perturbation_leaves_prefix_bitwise_unchanged() {
        let mut rng = Rng::seed_from_u64(42);
        for trial in 0..10 {
            let m = Transformer::init(tiny(), &mut rng).unwrap();
            let seq: Vec<usize> = (0..10).map(|_| rng.gen_range(0..11)).collect();
            let t = rng.gen_range(0..10);
            let mut pert = seq.clone();
            pert[t] = (pert[t] + 1 + trial % 5) % 11;
            let a = m.forward_with_states(&[seq]).unwrap().logits;
            let b = m.forward_with_states(&[pert]).unwrap().logits;
            assert_eq!(&a.data()[..t * 11], &b.data()[..t * 11]);
        }
    }

    /// One block, one head, d = 2: zero MLP and identity projections, so the
    /// attention contribution can be checked by hand on two tokens.
    #[test]
    fn hand_computed_two_token_attention() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 2,
            n_heads: 1,
            vocab_size: 2,
            max_seq_len: 2,
            tie_unembedding: false,
        };
        let mut named = IndexMap::new();
        for (name, shape) in cfg.manifest() {
            let t = match name.as_str() {
                "wte" => Tensor::new(shape, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                n if n.ends_with(".g") => Tensor::full(&shape, 1.0),
                "blocks.0.attn.wq" | "blocks.0.attn.wk" | "blocks.0.attn.wv" | "blocks.0.attn.wo" | "unembed" => {
                    Tensor::new(shape, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
                }
                _ => Tensor::zeros(&shape),
            };
            named.insert(name, t);
        }
        let m = Transformer::from_params(cfg, named).unwrap();
        let tr = m.forward_with_states(&[vec![0, 1]]).unwrap();
        // Layernorm maps e0 -> [s, -s] and e1 -> [-s, s], s = 1 up to eps.
        let s = 0.5 / (0.25 + LAYERNORM_EPS).sqrt();
        let (a0, a1) = ([s, -s], [-s, s]);
        let scale = 1.0 / 2f64.sqrt();
        let s10 = (a1[0] * a0[0] + a1[1] * a0[1]) * scale;
        let s11 = (a1[0] * a1[0] + a1[1] * a1[1]) * scale;
        let w0 = 1.0 / (1.0 + (s11 - s10).exp());
        let att1 = [w0 * a0[0] + (1.0 - w0) * a1[0], w0 * a0[1] + (1.0 - w0) * a1[1]];
        let h1 = tr.hidden_states[1].row(1);
        assert!((h1[0] - att1[0]).abs() < 1e-12);
        assert!((h1[1] - (1.0 + att1[1])).abs() < 1e-12);
        let h0 = tr.hidden_states[1].row(0);
        assert!((h0[0] - (1.0 + a0[0])).abs() < 1e-12 && (h0[1] - a0[1]).abs() < 1e-12);
    }
}

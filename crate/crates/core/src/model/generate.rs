use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{ModelError, Result, Transformer};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// Argmax decoding; temperature and top-p are ignored.
    #[serde(default)]
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            greedy: false,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Sampling(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ModelError::Sampling(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }

    /// Sampling distribution for one row of logits after temperature scaling
    /// and nucleus truncation.
    pub fn probs(&self, logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| ((l - max) / self.temperature).exp()).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
        if self.top_p < 1.0 {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            let mut cum = 0.0;
            let mut keep = vec![false; p.len()];
            for &i in &order {
                keep[i] = true;
                cum += p[i];
                if cum >= self.top_p {
                    break;
                }
            }
            p.iter_mut().zip(&keep).for_each(|(x, &k)| {
                if !k {
                    *x = 0.0
                }
            });
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= z);
        }
        p
    }

    fn pick(&self, logits: &[f64], rng: &mut Rng) -> usize {
        if self.greedy {
            return argmax(logits);
        }
        sample_index(&self.probs(logits), rng.gen::<f64>())
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `probs` with a uniform `u ∈ [0, 1)`.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    last_nonzero
}

/// Autoregressive decoding from `prompt`. Returns only the new tokens; stops
/// after `max_new` tokens, at `eos` (not included), or at `max_seq_len`.
pub fn generate(
    model: &Transformer,
    prompt: &[usize],
    max_new: usize,
    sampling: &SamplingConfig,
    seed: u64,
    eos: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(ModelError::Empty("prompt"));
    }
    sampling.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let mut ctx = prompt.to_vec();
    let mut out = Vec::new();
    let (v, max_len) = (model.config().vocab_size, model.config().max_seq_len);
    while out.len() < max_new && ctx.len() < max_len {
        let trace = model.forward_with_states(std::slice::from_ref(&ctx))?;
        let last = trace.logits.rows() - 1;
        let tok = sampling.pick(trace.logits.row(last), &mut rng);
        debug_assert!(tok < v);
        if Some(tok) == eos {
            break;
        }
        out.push(tok);
        ctx.push(tok);
    }
    Ok(out)
}

/// Draws `n` independent free-running continuations of `len` tokens from
/// the model's full softmax (temperature 1, no truncation), batched.
pub fn sample_paths(
    model: &Transformer,
    prefix: &[usize],
    n: usize,
    len: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if prefix.is_empty() {
        return Err(ModelError::Empty("prompt"));
    }
    let max = model.config().max_seq_len;
    if prefix.len() + len > max {
        return Err(ModelError::SequenceTooLong {
            len: prefix.len() + len,
            max,
        });
    }
    let sampling = SamplingConfig::default();
    let mut seqs = vec![prefix.to_vec(); n];
    for _ in 0..len {
        let trace = model.forward_with_states(&seqs)?;
        let t = seqs[0].len();
        for (b, s) in seqs.iter_mut().enumerate() {
            let row = trace.logits.row(b * t + t - 1);
            s.push(sampling.pick(row, rng));
        }
    }
    Ok(seqs.into_iter().map(|s| s[prefix.len()..].to_vec()).collect())
}

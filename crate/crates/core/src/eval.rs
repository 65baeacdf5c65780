//! Evaluation: token-level Rouge-L, held-out cross entropy, layer-wise
//! divergence profiles and the excess-accumulated-error exposure-bias
//! metric.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{Batch, DistillError, LayerMapping};
use crate::divergence::{self, DivergenceError, DivergenceKind};
use crate::lens::{self, LensConfig, LensError};
use crate::model::{self, generate, sample_paths, ModelError, SamplingConfig, Transformer};
use crate::rng;
use crate::synth::{Example, EOS};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("vocab mismatch: teacher {teacher}, student {student}")]
    VocabMismatch { teacher: usize, student: usize },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lens(#[from] LensError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Distill(#[from] DistillError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Length of the longest common subsequence.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl RougeL {
    pub const ZERO: Self = Self {
        precision: 0.0,
        recall: 0.0,
        f_measure: 0.0,
    };
}

/// LCS-based precision, recall and F1; all zero when either side is empty.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeL {
    if candidate.is_empty() || reference.is_empty() {
        return RougeL::ZERO;
    }
    let lcs = lcs_length(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let f_measure = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeL {
        precision,
        recall,
        f_measure,
    }
}

fn check_vocab(teacher: &Transformer, student: &Transformer) -> Result<()> {
    let (t, s) = (teacher.config().vocab_size, student.config().vocab_size);
    if t != s {
        return Err(EvalError::VocabMismatch { teacher: t, student: s });
    }
    Ok(())
}

fn batches(data: &[Example], batch_size: usize) -> impl Iterator<Item = Vec<&Example>> {
    data.chunks(batch_size.max(1)).map(|c| c.iter().collect())
}

fn forward_batch(model: &Transformer, batch: &Batch) -> Result<model::ForwardTrace> {
    let rows: Vec<Vec<usize>> = batch.inputs.chunks(batch.seq).map(<[usize]>::to_vec).collect();
    Ok(model.forward_with_states(&rows)?)
}

/// Mean next-token cross entropy (nats per token) over every position of
/// `BOS prompt response EOS`.
pub fn held_out_ce(model: &Transformer, data: &[Example], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(EvalError::Empty("evaluation set"));
    }
    let (mut nll, mut count) = (0.0, 0.0);
    for chunk in batches(data, batch_size) {
        let batch = Batch::from_examples(&chunk, false)?;
        let trace = forward_batch(model, &batch)?;
        for (r, (&target, &w)) in batch.targets.iter().zip(&batch.weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = trace.logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[target];
            count += 1.0;
        }
    }
    Ok(nll / count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub student_layer: usize,
    pub teacher_layer: usize,
    pub divergence: f64,
    pub kind: DivergenceKind,
    /// True for the output-distribution record.
    pub is_final: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    /// Mapped pairs in mapping order, then the final layer.
    pub records: Vec<LayerRecord>,
}

impl LayerProfile {
    pub fn final_layer(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.divergence)
    }

    /// Mean over the mapped (non-final) records; NaN without any.
    pub fn mean_intermediate(&self) -> f64 {
        let inter: Vec<f64> = self
            .records
            .iter()
            .filter(|r| !r.is_final)
            .map(|r| r.divergence)
            .collect();
        inter.iter().sum::<f64>() / inter.len() as f64
    }
}

/// Token-averaged divergence `D(teacher ‖ student)` between lensed hidden
/// states for each mapped pair, and between the output distributions.
pub fn layer_kl_profile(
    teacher: &Transformer,
    student: &Transformer,
    data: &[Example],
    mapping: &LayerMapping,
    kind: DivergenceKind,
    lens_cfg: &LensConfig,
    batch_size: usize,
) -> Result<LayerProfile> {
    check_vocab(teacher, student)?;
    if data.is_empty() {
        return Err(EvalError::Empty("profile dataset"));
    }
    let n = mapping.len() + 1;
    let (mut sums, mut count) = (vec![0.0; n], 0.0);
    for chunk in batches(data, batch_size) {
        let batch = Batch::from_examples(&chunk, false)?;
        let tt = forward_batch(teacher, &batch)?;
        let st = forward_batch(student, &batch)?;
        let mut pairs: Vec<(Tensor, Tensor)> = Vec::with_capacity(n);
        let t_dists = lens::lens_all_layers(&tt, teacher, &mapping.teacher_layers(), lens_cfg)?;
        let s_dists = lens::lens_all_layers(&st, student, &mapping.student_layers(), lens_cfg)?;
        pairs.extend(t_dists.into_iter().zip(s_dists));
        pairs.push((model::softmax_rows(&tt.logits), model::softmax_rows(&st.logits)));
        for (sum, (p, q)) in sums.iter_mut().zip(&pairs) {
            let rows = divergence::rowwise(kind, p, q)?;
            *sum += rows.iter().zip(&batch.weights).map(|(d, w)| d * w).sum::<f64>();
        }
        count += batch.weights.iter().sum::<f64>();
    }
    let mut records: Vec<LayerRecord> = mapping
        .pairs()
        .iter()
        .zip(&sums)
        .map(|(&(l, lt), s)| LayerRecord {
            student_layer: l,
            teacher_layer: lt,
            divergence: s / count,
            kind,
            is_final: false,
        })
        .collect();
    records.push(LayerRecord {
        student_layer: student.config().n_layers,
        teacher_layer: teacher.config().n_layers,
        divergence: sums[n - 1] / count,
        kind,
        is_final: true,
    });
    Ok(LayerProfile { records })
}

/// Which model generates the prefixes in an exposure estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixSource {
    Student,
    Teacher,
}

impl PrefixSource {
    fn tag(self) -> &'static str {
        match self {
            Self::Student => "student",
            Self::Teacher => "teacher",
        }
    }
}

/// One row per sampled path, one per-step KL value per column.
pub type StepKl = Vec<Vec<f64>>;

/// Per-path forward KL `KL(p ‖ q)` at each step `1..=max_l`, with prefixes
/// sampled from `source`. The inner expectation over the next token is
/// exact; only prefixes are sampled. Paths are grown to the full horizon
/// once, so every shorter horizon reuses their leading steps.
pub fn per_step_kl(
    teacher: &Transformer,
    student: &Transformer,
    prompt: &[usize],
    max_l: usize,
    n_samples: usize,
    source: PrefixSource,
    seed: u64,
) -> Result<StepKl> {
    check_vocab(teacher, student)?;
    if max_l == 0 {
        return Err(EvalError::ZeroHorizon);
    }
    if prompt.is_empty() {
        return Err(EvalError::Empty("prompt"));
    }
    if n_samples == 0 {
        return Err(EvalError::Empty("prefix sample set"));
    }
    let sampler = match source {
        PrefixSource::Student => student,
        PrefixSource::Teacher => teacher,
    };
    let mut r = rng::stream(seed, &format!("exposure/{}", source.tag()));
    let paths = sample_paths(sampler, prompt, n_samples, max_l - 1, &mut r)?;
    let seqs: Vec<Vec<usize>> = paths.iter().map(|p| [prompt, p].concat()).collect();
    let pt = model::softmax_rows(&teacher.forward_with_states(&seqs)?.logits);
    let qt = model::softmax_rows(&student.forward_with_states(&seqs)?.logits);
    let t_len = seqs[0].len();
    let mut out = Vec::with_capacity(n_samples);
    for b in 0..n_samples {
        let steps = (0..max_l)
            .map(|t| {
                let row = b * t_len + prompt.len() - 1 + t;
                divergence::forward_kl(pt.row(row), qt.row(row))
            })
            .collect::<std::result::Result<Vec<f64>, _>>()?;
        out.push(steps);
    }
    Ok(out)
}

fn mean_prefix_sum(paths: &[Vec<f64>], l: usize) -> f64 {
    paths.iter().map(|p| p[..l].iter().sum::<f64>()).sum::<f64>() / paths.len() as f64
}

/// `R(l)`: summed per-step forward KL under student-generated prefixes.
pub fn accumulated_regret(
    teacher: &Transformer,
    student: &Transformer,
    prompt: &[usize],
    l: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let paths = per_step_kl(teacher, student, prompt, l, n_samples, PrefixSource::Student, seed)?;
    Ok(mean_prefix_sum(&paths, l))
}

/// `ε(l)`: mean per-step forward KL under teacher-generated prefixes.
pub fn oracle_error_rate(
    teacher: &Transformer,
    student: &Transformer,
    prompt: &[usize],
    l: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let paths = per_step_kl(teacher, student, prompt, l, n_samples, PrefixSource::Teacher, seed)?;
    Ok(mean_prefix_sum(&paths, l) / l as f64)
}

/// Below this, `R(l)` and `l·ε(l)` count as zero.
pub const EXPOSURE_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub l: usize,
    pub r_l: f64,
    pub eps_l: f64,
    /// `(R(l) − l·ε(l)) / (l·ε(l)) × 100`; `+∞` when only the denominator
    /// vanishes.
    pub exaccerr_pct: f64,
    pub r_se: f64,
    pub eps_se: f64,
    /// Delta-method standard error of `exaccerr_pct`.
    pub exaccerr_se: f64,
}

/// `(R − lε) / (lε) × 100` with the zero guard.
pub fn exaccerr_value(r_l: f64, l: usize, eps_l: f64) -> f64 {
    let denom = l as f64 * eps_l;
    if denom < EXPOSURE_GUARD {
        if r_l < EXPOSURE_GUARD {
            return 0.0;
        }
        log::warn!("oracle error vanishes at l={l} while R(l)={r_l}; reporting +inf");
        return f64::INFINITY;
    }
    (r_l - denom) / denom * 100.0
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `BOS` plus at most `prompt_len` leading prompt tokens of the first
/// `n` examples: short contexts that leave room for long continuations.
pub fn exposure_prompts(data: &[Example], n: usize, prompt_len: usize) -> Vec<Vec<usize>> {
    data.iter()
        .take(n)
        .map(|ex| {
            let mut p = ex.prompt_context();
            p.truncate(prompt_len + 1);
            p
        })
        .collect()
}

/// Exposure-bias reports for every horizon, averaged over prompts. One set
/// of prefix samples at the longest horizon serves all shorter ones.
pub fn exaccerr_horizons(
    teacher: &Transformer,
    student: &Transformer,
    prompts: &[Vec<usize>],
    horizons: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<ExposureReport>> {
    if prompts.is_empty() {
        return Err(EvalError::Empty("prompt set"));
    }
    let max_l = horizons.iter().copied().max().ok_or(EvalError::Empty("horizon list"))?;
    if horizons.contains(&0) {
        return Err(EvalError::ZeroHorizon);
    }
    let per_prompt: Vec<(StepKl, StepKl)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let s = rng::derive_seed(seed, &format!("prompt/{i}"));
            let student_paths = per_step_kl(teacher, student, prompt, max_l, n_samples, PrefixSource::Student, s)?;
            let teacher_paths = per_step_kl(teacher, student, prompt, max_l, n_samples, PrefixSource::Teacher, s)?;
            Ok((student_paths, teacher_paths))
        })
        .collect::<Result<_>>()?;

    Ok(horizons
        .iter()
        .map(|&l| {
            let r_samples: Vec<f64> = per_prompt
                .iter()
                .flat_map(|(sp, _)| sp.iter().map(|p| p[..l].iter().sum::<f64>()))
                .collect();
            let eps_samples: Vec<f64> = per_prompt
                .iter()
                .flat_map(|(_, tp)| tp.iter().map(|p| p[..l].iter().sum::<f64>() / l as f64))
                .collect();
            let (r_l, r_se) = mean_se(&r_samples);
            let (eps_l, eps_se) = mean_se(&eps_samples);
            let exaccerr_pct = exaccerr_value(r_l, l, eps_l);
            let exaccerr_se = if exaccerr_pct.is_finite() && r_l > 0.0 && eps_l > 0.0 {
                100.0 * r_l / (l as f64 * eps_l) * ((r_se / r_l).powi(2) + (eps_se / eps_l).powi(2)).sqrt()
            } else {
                0.0
            };
            ExposureReport {
                l,
                r_l,
                eps_l,
                exaccerr_pct,
                r_se,
                eps_se,
                exaccerr_se,
            }
        })
        .collect())
}

/// Single-horizon [`exaccerr_horizons`].
pub fn exaccerr(
    teacher: &Transformer,
    student: &Transformer,
    prompts: &[Vec<usize>],
    l: usize,
    n_samples: usize,
    seed: u64,
) -> Result<ExposureReport> {
    let mut v = exaccerr_horizons(teacher, student, prompts, &[l], n_samples, seed)?;
    Ok(v.remove(0))
}

/// Generated response and its Rouge-L against the reference response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationScore {
    pub index: usize,
    pub generated: Vec<usize>,
    pub rouge: RougeL,
}

/// Decodes a response for every example's `BOS prompt` context and scores
/// it against `references` (by default the corpus responses). Generation
/// stops at EOS or after `max_new` tokens; example `i` samples with the
/// subseed `derive_seed(seed, "generate/i")`.
pub fn generation_rouge(
    model: &Transformer,
    data: &[Example],
    references: Option<&[Vec<usize>]>,
    sampling: &SamplingConfig,
    seed: u64,
    max_new: usize,
) -> Result<Vec<GenerationScore>> {
    if data.is_empty() {
        return Err(EvalError::Empty("evaluation set"));
    }
    data.par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let s = rng::derive_seed(seed, &format!("generate/{i}"));
            let generated = generate(model, &ex.prompt_context(), max_new, sampling, s, Some(EOS))?;
            let reference = references.map_or(ex.response.as_slice(), |r| r[i].as_slice());
            Ok(GenerationScore {
                index: i,
                rouge: rouge_l(&generated, reference),
                generated,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;
    use rand::SeedableRng;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn lcs_hand_cases() {
        assert_eq!(lcs_length(&toks("A B C B D A B"), &toks("B D C A B A")), 4);
        assert_eq!(lcs_length(&[1, 2, 3], &[1, 2, 3]), 3);
        assert_eq!(lcs_length(&[1, 2, 3], &[4, 5]), 0);
        assert_eq!(lcs_length::<u8>(&[], &[1]), 0);
    }

    #[test]
    fn rouge_hand_cases() {
        let r = rouge_l(&toks("the cat sat"), &toks("the cat sat down"));
        assert_eq!((r.precision, r.recall), (1.0, 0.75));
        assert!((r.f_measure - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(rouge_l(&[1, 2], &[1, 2]).f_measure, 1.0);
        assert_eq!(rouge_l(&[1, 2], &[3]), RougeL::ZERO);
        assert_eq!(rouge_l::<u8>(&[], &[1]), RougeL::ZERO);
    }

    #[test]
    fn exaccerr_guard() {
        assert_eq!(exaccerr_value(0.0, 8, 0.0), 0.0);
        assert_eq!(exaccerr_value(1.0, 8, 0.0), f64::INFINITY);
        assert_eq!(exaccerr_value(8.0, 8, 1.0), 0.0);
        assert!((exaccerr_value(12.0, 8, 1.0) - 50.0).abs() < 1e-12);
    }

    fn tiny(seed: u64) -> Transformer {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 9,
            max_seq_len: 16,
            tie_unembedding: false,
        };
        Transformer::init(cfg, &mut Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn identical_models_have_zero_exposure_error() {
        let m = tiny(1);
        let reps = exaccerr_horizons(&m, &m.clone(), &[vec![1, 4], vec![1]], &[1, 3, 6], 4, 7).unwrap();
        for r in reps {
            assert_eq!((r.r_l, r.eps_l, r.exaccerr_pct), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn regret_is_monotone_and_agrees_with_oracle_at_one_step() {
        let (t, s) = (tiny(1), tiny(2));
        let p = [1, 5];
        let r1 = accumulated_regret(&t, &s, &p, 1, 3, 0).unwrap();
        let e1 = oracle_error_rate(&t, &s, &p, 1, 3, 0).unwrap();
        assert_eq!(r1, e1);
        let mut prev = 0.0;
        for l in 1..8 {
            let r = accumulated_regret(&t, &s, &p, l, 4, 0).unwrap();
            assert!(r >= prev, "R({l}) = {r} < {prev}");
            prev = r;
            assert!(oracle_error_rate(&t, &s, &p, l, 4, 0).unwrap() >= 0.0);
        }
        assert!(accumulated_regret(&t, &s, &p, 16, 2, 0).is_err());
        assert!(accumulated_regret(&t, &s, &p, 0, 2, 0).is_err());
    }

    #[test]
    fn identical_models_have_zero_profile() {
        let m = tiny(3);
        let data = vec![Example {
            prompt: vec![3, 4],
            response: vec![5],
        }];
        let mapping = LayerMapping::new(vec![(1, 1)], 2, 2).unwrap();
        let prof = layer_kl_profile(&m, &m, &data, &mapping, DivergenceKind::Fkl, &LensConfig::default(), 8).unwrap();
        assert_eq!(prof.records.len(), 2);
        assert!(prof.records.iter().all(|r| r.divergence == 0.0));
        assert!(prof.records[1].is_final);
    }

    #[test]
    fn held_out_ce_of_fresh_model_is_near_uniform() {
        let m = tiny(4);
        let data = vec![Example {
            prompt: vec![3, 4, 5],
            response: vec![6, 7],
        }];
        let ce = held_out_ce(&m, &data, 4).unwrap();
        assert!((ce - 9f64.ln()).abs() < 0.05, "{ce}");
        assert!(held_out_ce(&m, &[], 4).is_err());
    }
}

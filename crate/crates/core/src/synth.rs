//! Seeded synthetic corpus: sequences emitted by a small hidden-state
//! automaton, split into prompt/response pairs, plus a fixed character
//! tokenizer for the symbol alphabet.

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const FIRST_SYMBOL: usize = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown symbol {symbol:?} at byte {pos}")]
    UnknownSymbol { symbol: String, pos: usize },
    #[error("token id {0} has no symbol")]
    UnknownId(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Including PAD/BOS/EOS.
    pub vocab_size: usize,
    pub n_hidden_states: usize,
    /// Divides the standard-normal transition logits; lower is more peaked.
    pub transition_temperature: f64,
    pub emission_temperature: f64,
    /// Bounds on the number of emitted symbols per sequence (inclusive).
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_hidden_states: 8,
            transition_temperature: 0.5,
            emission_temperature: 0.5,
            min_len: 12,
            max_len: 32,
            n_train: 4000,
            n_val: 256,
            n_test: 256,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size must be >= 4, got {}", self.vocab_size));
        }
        if self.n_hidden_states == 0 {
            return bad("n_hidden_states must be positive".into());
        }
        if !(self.transition_temperature > 0.0 && self.emission_temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad(format!(
                "length bounds [{}, {}] infeasible: need 2 <= min_len <= max_len",
                self.min_len, self.max_len
            ));
        }
        Ok(())
    }

    pub fn n_symbols(&self) -> usize {
        self.vocab_size - FIRST_SYMBOL
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

impl Example {
    /// `BOS prompt response EOS`.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.prompt.len() + self.response.len() + 2);
        s.push(BOS);
        s.extend_from_slice(&self.prompt);
        s.extend_from_slice(&self.response);
        s.push(EOS);
        s
    }

    /// `BOS prompt`, the conditioning context for generation.
    pub fn prompt_context(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.prompt.len() + 1);
        s.push(BOS);
        s.extend_from_slice(&self.prompt);
        s
    }

    fn validate(&self, vocab_size: Option<usize>) -> std::result::Result<(), String> {
        if self.prompt.is_empty() || self.response.is_empty() {
            return Err("prompt and response must be nonempty".into());
        }
        if let Some(v) = vocab_size {
            if let Some(id) = self.prompt.iter().chain(&self.response).find(|&&id| id >= v) {
                return Err(format!("token id {id} >= vocab size {v}"));
            }
        }
        Ok(())
    }
}

/// Hidden-state automaton. Emissions cover only the regular symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct Automaton {
    pub transition: Vec<Vec<f64>>,
    pub emission: Vec<Vec<f64>>,
    /// Stationary state distribution; also the initial distribution.
    pub initial: Vec<f64>,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn draw(probs: &[f64], rng: &mut Rng) -> usize {
    crate::model::sample_index(probs, rng.gen::<f64>())
}

impl Automaton {
    pub fn from_spec(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(spec.seed, "automaton");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let s = spec.n_hidden_states;
        let transition: Vec<Vec<f64>> = (0..s)
            .map(|_| {
                let logits: Vec<f64> = (0..s)
                    .map(|_| normal.sample(&mut rng) / spec.transition_temperature)
                    .collect();
                softmax(&logits)
            })
            .collect();
        let emission = (0..s)
            .map(|_| {
                let logits: Vec<f64> = (0..spec.n_symbols())
                    .map(|_| normal.sample(&mut rng) / spec.emission_temperature)
                    .collect();
                let mut row = vec![0.0; FIRST_SYMBOL];
                row.extend(softmax(&logits));
                row
            })
            .collect();
        let initial = stationary(&transition);
        Ok(Self {
            transition,
            emission,
            initial,
        })
    }

    pub fn sample(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut state = draw(&self.initial, rng);
        let mut out = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 {
                state = draw(&self.transition[state], rng);
            }
            out.push(draw(&self.emission[state], rng));
        }
        out
    }

    /// Marginal symbol distribution under the stationary state distribution.
    pub fn stationary_emission(&self) -> Vec<f64> {
        let v = self.emission[0].len();
        let mut out = vec![0.0; v];
        for (pi, row) in self.initial.iter().zip(&self.emission) {
            for (o, e) in out.iter_mut().zip(row) {
                *o += pi * e;
            }
        }
        out
    }

    /// `−ln P(symbols)` by the scaled forward algorithm.
    pub fn neg_log_likelihood(&self, symbols: &[usize]) -> f64 {
        let s = self.initial.len();
        let mut alpha: Vec<f64> = self.initial.clone();
        let mut nll = 0.0;
        for (t, &x) in symbols.iter().enumerate() {
            if t > 0 {
                let mut next = vec![0.0; s];
                for (i, a) in alpha.iter().enumerate() {
                    for (n, tr) in next.iter_mut().zip(&self.transition[i]) {
                        *n += a * tr;
                    }
                }
                alpha = next;
            }
            for (i, a) in alpha.iter_mut().enumerate() {
                *a *= self.emission[i][x];
            }
            let z: f64 = alpha.iter().sum();
            nll -= z.ln();
            alpha.iter_mut().for_each(|a| *a /= z);
        }
        nll
    }
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary(transition: &[Vec<f64>]) -> Vec<f64> {
    let s = transition.len();
    let mut pi = vec![1.0 / s as f64; s];
    for _ in 0..100_000 {
        let mut next = vec![0.0; s];
        for (i, p) in pi.iter().enumerate() {
            for (n, t) in next.iter_mut().zip(&transition[i]) {
                *n += p * t;
            }
        }
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Self::Train => "train.jsonl",
            Self::Val => "val.jsonl",
            Self::Test => "test.jsonl",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}` (train, val, test)")),
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Samples train/val/test sets. Sequences are unique across all three
/// splits, so the splits are disjoint.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let automaton = Automaton::from_spec(spec)?;
    let mut rng = rng::stream(spec.seed, "corpus");
    let total = spec.n_train + spec.n_val + spec.n_test;
    let mut seen = HashSet::with_capacity(total);
    let mut examples = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while examples.len() < total {
        attempts += 1;
        if attempts > 20 * total + 1000 {
            return Err(SynthError::InvalidSpec(format!(
                "could only draw {} distinct sequences of the {total} requested",
                examples.len()
            )));
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let seq = automaton.sample(len, &mut rng);
        let cut = rng.gen_range(1..len);
        if !seen.insert(seq.clone()) {
            continue;
        }
        examples.push(Example {
            prompt: seq[..cut].to_vec(),
            response: seq[cut..].to_vec(),
        });
    }
    let test = examples.split_off(spec.n_train + spec.n_val);
    let val = examples.split_off(spec.n_train);
    Ok(Corpus {
        train: examples,
        val,
        test,
    })
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses JSONL examples; blank lines are skipped. With `vocab_size`, ids
/// are range-checked.
pub fn parse_jsonl(text: &str, vocab_size: Option<usize>) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_line(line, i + 1, vocab_size)?;
        out.push(ex);
    }
    Ok(out)
}

fn parse_line(line: &str, line_no: usize, vocab_size: Option<usize>) -> Result<Example> {
    let ex: Example = serde_json::from_str(line).map_err(|e| SynthError::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    ex.validate(vocab_size)
        .map_err(|msg| SynthError::Parse { line: line_no, msg })?;
    Ok(ex)
}

pub fn read_jsonl(path: impl AsRef<Path>, vocab_size: Option<usize>) -> Result<Vec<Example>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1, vocab_size)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train_tokens: usize,
    /// Per-symbol cross entropy of the generating automaton on the test split.
    pub source_entropy_nats: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn source_entropy(automaton: &Automaton, examples: &[Example]) -> f64 {
    let (mut nll, mut n) = (0.0, 0usize);
    for ex in examples {
        let symbols: Vec<usize> = ex.prompt.iter().chain(&ex.response).copied().collect();
        nll += automaton.neg_log_likelihood(&symbols);
        n += symbols.len();
    }
    nll / n.max(1) as f64
}

/// Writes the three splits and a manifest echoing the spec.
pub fn write_corpus(dir: impl AsRef<Path>, spec: &CorpusSpec, corpus: &Corpus) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        write_jsonl(dir.join(split.file_name()), corpus.split(split))?;
    }
    let automaton = Automaton::from_spec(spec)?;
    let manifest = CorpusManifest {
        spec: spec.clone(),
        n_train: corpus.train.len(),
        n_val: corpus.val.len(),
        n_test: corpus.test.len(),
        train_tokens: corpus.train.iter().map(|e| e.prompt.len() + e.response.len()).sum(),
        source_entropy_nats: source_entropy(&automaton, &corpus.test),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(io::Error::from)?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| SynthError::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn read_split(dir: impl AsRef<Path>, split: Split, vocab_size: usize) -> Result<Vec<Example>> {
    read_jsonl(dir.as_ref().join(split.file_name()), Some(vocab_size))
}

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789!#$%&()*+,-.:;=?@[]^_{|}~";
const SPECIALS: [&str; 3] = ["<pad>", "<s>", "</s>"];

/// Maps ids to text: PAD/BOS/EOS are `<pad>`, `<s>`, `</s>` and each
/// regular id is one character of a fixed alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
}

impl Tokenizer {
    pub const MAX_VOCAB: usize = FIRST_SYMBOL + ALPHABET.len();

    pub fn new(vocab_size: usize) -> Result<Self> {
        if !(FIRST_SYMBOL + 1..=Self::MAX_VOCAB).contains(&vocab_size) {
            return Err(SynthError::InvalidSpec(format!(
                "tokenizer supports vocab sizes 4..={}, got {vocab_size}",
                Self::MAX_VOCAB
            )));
        }
        Ok(Self { vocab_size })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let pos = text.len() - rest.len();
            if let Some((id, s)) = SPECIALS.iter().enumerate().find(|(_, s)| rest.starts_with(**s)) {
                ids.push(id);
                rest = &rest[s.len()..];
                continue;
            }
            let c = rest.chars().next().expect("nonempty");
            let id = ALPHABET
                .find(c)
                .map(|i| i + FIRST_SYMBOL)
                .filter(|&id| id < self.vocab_size)
                .ok_or_else(|| SynthError::UnknownSymbol {
                    symbol: c.to_string(),
                    pos,
                })?;
            ids.push(id);
            rest = &rest[c.len_utf8()..];
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id >= self.vocab_size {
                return Err(SynthError::UnknownId(id));
            }
            match SPECIALS.get(id) {
                Some(s) => out.push_str(s),
                None => out.push_str(&ALPHABET[id - FIRST_SYMBOL..=id - FIRST_SYMBOL]),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_train: 200,
            n_val: 20,
            n_test: 20,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(CorpusSpec::default().validate().is_ok());
        assert!(CorpusSpec {
            vocab_size: 2,
            ..CorpusSpec::default()
        }
        .validate()
        .is_err());
        assert!(CorpusSpec {
            min_len: 10,
            max_len: 5,
            ..CorpusSpec::default()
        }
        .validate()
        .is_err());
        assert!(CorpusSpec {
            min_len: 1,
            ..CorpusSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn corpus_is_seed_deterministic_and_bounded() {
        let spec = small_spec();
        let a = generate_corpus(&spec).unwrap();
        assert_eq!(a, generate_corpus(&spec).unwrap());
        let b = generate_corpus(&CorpusSpec {
            seed: 1,
            ..spec.clone()
        })
        .unwrap();
        assert_ne!(a, b);
        for ex in a.train.iter().chain(&a.val).chain(&a.test) {
            let n = ex.prompt.len() + ex.response.len();
            assert!((spec.min_len..=spec.max_len).contains(&n));
            assert!(!ex.prompt.is_empty() && !ex.response.is_empty());
            assert!(ex
                .prompt
                .iter()
                .chain(&ex.response)
                .all(|&t| (FIRST_SYMBOL..64).contains(&t)));
        }
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (200, 20, 20));
    }

    #[test]
    fn infeasible_uniqueness_is_reported() {
        let spec = CorpusSpec {
            vocab_size: 4,
            min_len: 2,
            max_len: 2,
            n_train: 10,
            ..small_spec()
        };
        assert!(matches!(generate_corpus(&spec), Err(SynthError::InvalidSpec(_))));
    }

    #[test]
    fn stationary_is_fixed_point() {
        let a = Automaton::from_spec(&small_spec()).unwrap();
        let pi = &a.initial;
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..pi.len() {
            let next: f64 = (0..pi.len()).map(|i| pi[i] * a.transition[i][j]).sum();
            assert!((next - pi[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_algorithm_matches_enumeration() {
        let spec = CorpusSpec {
            vocab_size: 5,
            n_hidden_states: 3,
            ..small_spec()
        };
        let a = Automaton::from_spec(&spec).unwrap();
        let symbols = [3, 4, 4];
        let mut p = 0.0;
        for s0 in 0..3 {
            for s1 in 0..3 {
                for s2 in 0..3 {
                    p += a.initial[s0]
                        * a.emission[s0][3]
                        * a.transition[s0][s1]
                        * a.emission[s1][4]
                        * a.transition[s1][s2]
                        * a.emission[s2][4];
                }
            }
        }
        assert!((a.neg_log_likelihood(&symbols) + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        write_jsonl(&path, &corpus.val).unwrap();
        assert_eq!(read_jsonl(&path, Some(64)).unwrap(), corpus.val);
        assert!(parse_jsonl("{\"prompt\":[],\"response\":[3]}", None).is_err());
        assert!(parse_jsonl("{\"prompt\":[70],\"response\":[3]}", Some(64)).is_err());
        assert!(parse_jsonl("{\"prompt\":[4],\"response\":[3],\"x\":1}", None).is_err());
        assert!(matches!(
            parse_jsonl("\n{oops\n", None),
            Err(SynthError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn tokenizer_round_trips() {
        let tok = Tokenizer::new(64).unwrap();
        assert_eq!(tok.encode("").unwrap(), Vec::<usize>::new());
        assert_eq!(tok.encode("<pad><s></s>").unwrap(), vec![PAD, BOS, EOS]);
        let mut rng = Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n = rng.gen_range(0..20);
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..64)).collect();
            let text = tok.decode(&ids).unwrap();
            assert_eq!(tok.encode(&text).unwrap(), ids);
            assert_eq!(tok.decode(&tok.encode(&text).unwrap()).unwrap(), text);
        }
        assert!(tok.encode("a b").is_err());
        assert!(tok.encode("~").is_err(), "symbol beyond vocab 64");
        assert!(tok.decode(&[64]).is_err());
        assert!(Tokenizer::new(3).is_err());
    }
}

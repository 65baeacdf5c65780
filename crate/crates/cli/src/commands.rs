use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use distillens::distill::{self, LayerMapping, StepRecord};
use distillens::divergence::{self, DivergenceKind};
use distillens::eval::{self, GenerationScore};
use distillens::lens::LensConfig;
use distillens::model::{checkpoint, SamplingConfig, Transformer};
use distillens::rng;
use distillens::synth::{self, Example, Split};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{
    Command, DistillArgs, EvalArgs, ExposureArgs, GenDataArgs, LandscapeArgs, LensArgs, LensProfileArgs, ModelArgs,
    TrainArgs, TrainTeacherArgs,
};

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train_teacher(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::LensProfile(a) => lens_profile(a),
        Command::Landscape(a) => landscape(a),
        Command::Exposure(a) => exposure(a),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Creates `dir`, refusing to reuse a non-empty one without `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.is_file() {
        return Err(CliError::Config(format!("{} exists and is a file", dir.display())));
    }
    let non_empty = dir.is_dir()
        && fs::read_dir(dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?
            .next()
            .is_some();
    if non_empty && !force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))
}

fn check_file_free(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("creating {}: {e}", parent.display())))?;
    }
    Ok(())
}

fn jsonl_twin(path: &Path) -> PathBuf {
    path.with_extension("jsonl")
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv(path: Option<&Path>, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut w: Box<dyn Write> = match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

fn load_model(path: &Path) -> Result<Transformer, CliError> {
    checkpoint::load(path).map_err(|e| match e {
        checkpoint::CheckpointError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::from(other),
    })
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(CliError::Config)
}

fn load_split(data: &Path, split: Split) -> Result<(synth::CorpusManifest, Vec<Example>), CliError> {
    let manifest = synth::read_manifest(data)
        .map_err(|e| CliError::Io(format!("reading corpus manifest in {}: {e}", data.display())))?;
    let examples = synth::read_split(data, split, manifest.spec.vocab_size)?;
    Ok((manifest, examples))
}

fn parse_mapping(s: &str) -> Result<Vec<(usize, usize)>, CliError> {
    s.split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| CliError::Config(format!("mapping pair `{pair}` is not student:teacher")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Config(format!("bad layer index `{x}` in mapping")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

fn parse_kind(s: &str) -> Result<DivergenceKind, CliError> {
    s.parse()
        .map_err(|e: divergence::DivergenceError| CliError::Config(e.to_string()))
}

fn apply_model(cfg: &mut distillens::model::ModelConfig, a: ModelArgs) {
    set(&mut cfg.n_layers, a.n_layers);
    set(&mut cfg.d_model, a.d_model);
    set(&mut cfg.n_heads, a.n_heads);
    set(&mut cfg.max_seq_len, a.max_seq_len);
    set(&mut cfg.tie_unembedding, a.tie_unembedding);
}

fn apply_train(cfg: &mut distill::TrainConfig, a: TrainArgs) {
    set(&mut cfg.steps, a.steps);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.lr_init, a.lr_init);
    set(&mut cfg.lr_final, a.lr_final);
    set(&mut cfg.weight_decay, a.weight_decay);
    set(&mut cfg.grad_clip, a.grad_clip);
    set(&mut cfg.response_only, a.response_only);
    set(&mut cfg.seed, a.seed);
}

fn apply_lens(cfg: &mut LensConfig, a: LensArgs) {
    set(&mut cfg.apply_final_norm, a.lens_final_norm);
    set(&mut cfg.temperature, a.lens_temperature);
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let c = &mut cfg.corpus;
    set(&mut c.seed, a.seed);
    set(&mut c.vocab_size, a.vocab_size);
    set(&mut c.n_hidden_states, a.n_hidden_states);
    set(&mut c.transition_temperature, a.transition_temperature);
    set(&mut c.emission_temperature, a.emission_temperature);
    set(&mut c.min_len, a.min_len);
    set(&mut c.max_len, a.max_len);
    set(&mut c.n_train, a.n_train);
    set(&mut c.n_val, a.n_val);
    set(&mut c.n_test, a.n_test);
    c.validate()?;
    prepare_dir(&a.out.out, a.out.force)?;
    let corpus = synth::generate_corpus(c)?;
    let m = synth::write_corpus(&a.out.out, c, &corpus)?;
    println!(
        "wrote {} train / {} val / {} test examples ({} train tokens) to {}",
        m.n_train,
        m.n_val,
        m.n_test,
        m.train_tokens,
        a.out.out.display()
    );
    println!(
        "source entropy {:.4} nats/token (uniform {:.4})",
        m.source_entropy_nats,
        (c.vocab_size as f64).ln()
    );
    Ok(())
}

/// Streams step records to `metrics.jsonl` and logs progress.
struct MetricsSink {
    out: BufWriter<File>,
    every: usize,
    label: &'static str,
}

impl MetricsSink {
    fn new(dir: &Path, steps: usize, label: &'static str) -> Result<Self, CliError> {
        Ok(Self {
            out: create(&dir.join("metrics.jsonl"))?,
            every: (steps / 20).max(1),
            label,
        })
    }

    fn record(&mut self, r: &StepRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        if r.step % self.every == 0 {
            self.out.flush()?;
            log::info!(
                "{} step {:>5}  l_task {:.4}  l_inter {:.4}  l_total {:.4}  lr {:.2e}",
                self.label,
                r.step,
                r.l_task,
                r.l_inter,
                r.l_total,
                r.lr
            );
        }
        Ok(())
    }
}

fn write_snapshot(dir: &Path, cfg: &RunConfig, provenance: &[(&str, &Path)]) -> Result<(), CliError> {
    let mut text = String::new();
    for (k, p) in provenance {
        text.push_str(&format!("# {k}: {}\n", p.display()));
    }
    text.push_str(&cfg.to_toml());
    fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

fn train_teacher(a: TrainTeacherArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_model(&mut cfg.teacher, a.model);
    apply_train(&mut cfg.train, a.train);
    let (manifest, train) = load_split(&a.data, Split::Train)?;
    cfg.teacher.vocab_size = manifest.spec.vocab_size;
    cfg.corpus = manifest.spec.clone();
    cfg.teacher.validate()?;
    cfg.train.validate()?;
    let (_, val) = load_split(&a.data, Split::Val)?;
    prepare_dir(&a.out.out, a.out.force)?;
    write_snapshot(&a.out.out, &cfg, &[("corpus", &a.data)])?;
    let init = Transformer::init(cfg.teacher.clone(), &mut rng::stream(cfg.train.seed, "teacher-init"))?;
    log::info!("teacher: {} parameters", init.num_params());
    let mut sink = MetricsSink::new(&a.out.out, cfg.train.steps, "teacher")?;
    let model = distill::train_teacher(init, &train, &cfg.train, |r| sink.record(r))?;
    sink.out.flush()?;
    checkpoint::save(&model, a.out.out.join("model.ckpt"))?;
    if !val.is_empty() {
        println!(
            "val cross entropy {:.4} nats/token",
            eval::held_out_ce(&model, &val, 64)?
        );
    }
    println!("saved {}", a.out.out.join("model.ckpt").display());
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_model(&mut cfg.student, a.model);
    apply_train(&mut cfg.train, a.train);
    apply_lens(&mut cfg.lens, a.lens);
    let d = &mut cfg.distill;
    if let Some(s) = a.task_loss {
        d.task_loss = s.parse().map_err(CliError::Config)?;
    }
    if let Some(s) = a.inter_loss {
        d.inter_loss = s.parse().map_err(CliError::Config)?;
    }
    set(&mut d.lambda, a.lambda);
    if let Some(k) = a.k {
        d.k = k;
        d.mapping = None;
    }
    if let Some(m) = a.mapping {
        d.mapping = Some(parse_mapping(&m)?);
    }
    let teacher = load_model(&a.teacher)?;
    cfg.student.vocab_size = teacher.config().vocab_size;
    let dcfg = cfg.distill_config();
    let mapping = dcfg.validate(teacher.config())?;
    let (manifest, train) = load_split(&a.data, Split::Train)?;
    if manifest.spec.vocab_size != teacher.config().vocab_size {
        return Err(CliError::Config(format!(
            "teacher vocab_size {} does not match corpus vocab_size {}",
            teacher.config().vocab_size,
            manifest.spec.vocab_size
        )));
    }
    cfg.corpus = manifest.spec.clone();
    cfg.teacher = teacher.config().clone();
    let (_, val) = load_split(&a.data, Split::Val)?;
    prepare_dir(&a.out.out, a.out.force)?;
    write_snapshot(&a.out.out, &cfg, &[("corpus", &a.data), ("teacher", &a.teacher)])?;
    log::info!(
        "distill: task {} + {} x {} over mapping [{mapping}]",
        dcfg.task_loss,
        dcfg.lambda,
        dcfg.inter_loss
    );
    let mut sink = MetricsSink::new(&a.out.out, dcfg.train.steps, "student")?;
    let outcome = distill::distill(&teacher, &train, &dcfg, |r| sink.record(r))?;
    sink.out.flush()?;
    checkpoint::save(&outcome.student, a.out.out.join("model.ckpt"))?;
    if !val.is_empty() {
        println!(
            "val cross entropy {:.4} nats/token",
            eval::held_out_ce(&outcome.student, &val, 64)?
        );
    }
    println!("saved {}", a.out.out.join("model.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct RougeRow<'a> {
    decoding: &'a str,
    seed: Option<u64>,
    index: usize,
    precision: f64,
    recall: f64,
    f_measure: f64,
    generated_len: usize,
    reference_len: usize,
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    rouge_l: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    split: String,
    n_examples: usize,
    reference: String,
    rouge_l_greedy: f64,
    rouge_l_sampled_mean: f64,
    rouge_l_sampled_std: f64,
    sampled: Vec<SeedSummary>,
    ce_student: f64,
    ce_teacher: Option<f64>,
}

fn mean_f(scores: &[GenerationScore]) -> f64 {
    100.0 * scores.iter().map(|s| s.rouge.f_measure).sum::<f64>() / scores.len() as f64
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let split = parse_split(&a.split)?;
    let sampling = SamplingConfig {
        temperature: a.temperature,
        top_p: a.top_p,
        greedy: false,
    };
    sampling.validate()?;
    if a.seeds.is_empty() {
        return Err(CliError::Config("--seeds must list at least one seed".into()));
    }
    let (_, data) = load_split(&a.data, split)?;
    if data.is_empty() {
        return Err(CliError::Config(format!("split `{}` is empty", a.split)));
    }
    let student = load_model(&a.student)?;
    let teacher = a.teacher.as_deref().map(load_model).transpose()?;
    let max_new = a.max_new.unwrap_or(student.config().max_seq_len);
    prepare_dir(&a.out.out, a.out.force)?;

    let references: Option<Vec<Vec<usize>>> = match (a.reference.as_str(), &teacher) {
        ("corpus", _) => None,
        (_, Some(t)) => Some(
            eval::generation_rouge(t, &data, None, &SamplingConfig::greedy(), 0, max_new)?
                .into_iter()
                .map(|s| s.generated)
                .collect(),
        ),
        (_, None) => {
            return Err(CliError::Config("--reference teacher-greedy requires --teacher".into()));
        }
    };
    let refs = references.as_deref();
    let ref_len = |i: usize| refs.map_or(data[i].response.len(), |r| r[i].len());

    let greedy = eval::generation_rouge(&student, &data, refs, &SamplingConfig::greedy(), 0, max_new)?;
    let mut rows: Vec<RougeRow> = Vec::new();
    let push = |decoding: &'static str, seed: Option<u64>, scores: &[GenerationScore], rows: &mut Vec<RougeRow>| {
        rows.extend(scores.iter().map(|s| RougeRow {
            decoding,
            seed,
            index: s.index,
            precision: s.rouge.precision,
            recall: s.rouge.recall,
            f_measure: s.rouge.f_measure,
            generated_len: s.generated.len(),
            reference_len: ref_len(s.index),
        }));
    };
    push("greedy", None, &greedy, &mut rows);
    let mut sampled = Vec::new();
    for &seed in &a.seeds {
        let scores = eval::generation_rouge(&student, &data, refs, &sampling, seed, max_new)?;
        push("sampled", Some(seed), &scores, &mut rows);
        sampled.push(SeedSummary {
            seed,
            rouge_l: mean_f(&scores),
        });
    }
    let n = sampled.len() as f64;
    let mean = sampled.iter().map(|s| s.rouge_l).sum::<f64>() / n;
    let std = (sampled.iter().map(|s| (s.rouge_l - mean).powi(2)).sum::<f64>() / n).sqrt();
    let summary = EvalSummary {
        split: a.split.clone(),
        n_examples: data.len(),
        reference: a.reference.clone(),
        rouge_l_greedy: mean_f(&greedy),
        rouge_l_sampled_mean: mean,
        rouge_l_sampled_std: std,
        sampled,
        ce_student: eval::held_out_ce(&student, &data, a.batch_size)?,
        ce_teacher: teacher
            .as_ref()
            .map(|t| eval::held_out_ce(t, &data, a.batch_size))
            .transpose()?,
    };

    let csv: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.decoding,
                r.seed.map_or(String::new(), |s| s.to_string()),
                r.index,
                r.precision,
                r.recall,
                r.f_measure,
                r.generated_len,
                r.reference_len
            )
        })
        .collect();
    write_csv(
        Some(&a.out.out.join("rouge.csv")),
        "decoding,seed,index,precision,recall,f_measure,generated_len,reference_len",
        &csv,
    )?;
    write_jsonl(&a.out.out.join("rouge.jsonl"), &rows)?;
    let text = serde_json::to_string_pretty(&summary).map_err(io::Error::from)?;
    fs::write(a.out.out.join("summary.json"), text + "\n")?;

    println!("rouge-l greedy {:.2}", summary.rouge_l_greedy);
    for s in &summary.sampled {
        println!("rouge-l sampled seed {:>3} {:.2}", s.seed, s.rouge_l);
    }
    println!(
        "rouge-l sampled mean {:.2} ± {:.2} over {} seeds",
        summary.rouge_l_sampled_mean,
        summary.rouge_l_sampled_std,
        summary.sampled.len()
    );
    println!("cross entropy student {:.4}", summary.ce_student);
    if let Some(ce) = summary.ce_teacher {
        println!("cross entropy teacher {ce:.4}");
    }
    Ok(())
}

fn lens_profile(a: LensProfileArgs) -> Result<(), CliError> {
    let split = parse_split(&a.split)?;
    let kind = parse_kind(&a.kind)?;
    let mut lens = LensConfig::default();
    apply_lens(&mut lens, a.lens);
    lens.validate()?;
    let teacher = load_model(&a.teacher)?;
    let student = load_model(&a.student)?;
    let (ls, lt) = (student.config().n_layers, teacher.config().n_layers);
    let mapping = if a.mapping == "auto" {
        distill::uniform_map(&distill::select_student_layers(ls, a.k)?, ls, lt)?
    } else {
        LayerMapping::new(parse_mapping(&a.mapping)?, ls, lt)?
    };
    let (_, data) = load_split(&a.data, split)?;
    check_file_free(&a.out.out, a.out.force)?;
    check_file_free(&jsonl_twin(&a.out.out), a.out.force)?;
    let profile = eval::layer_kl_profile(&teacher, &student, &data, &mapping, kind, &lens, a.batch_size)?;
    let rows: Vec<String> = profile
        .records
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                r.student_layer, r.teacher_layer, r.kind, r.divergence, r.is_final
            )
        })
        .collect();
    write_csv(
        Some(&a.out.out),
        "student_layer,teacher_layer,kind,divergence,is_final",
        &rows,
    )?;
    write_jsonl(&jsonl_twin(&a.out.out), &profile.records)?;
    for r in &profile.records {
        let tag = if r.is_final { "final" } else { "lens" };
        println!(
            "student {:>2} <- teacher {:>2} ({tag}): {} {:.6}",
            r.student_layer, r.teacher_layer, r.kind, r.divergence
        );
    }
    println!("mean intermediate {:.6}", profile.mean_intermediate());
    Ok(())
}

/// Log-spaced grid over `[cmin, cmax]` with exact endpoints, plus `c = 1`
/// when it lies inside.
pub fn landscape_grid(cmin: f64, cmax: f64, points: usize) -> Vec<f64> {
    let (lo, hi) = (cmin.ln(), cmax.ln());
    let mut grid: Vec<f64> = (0..points)
        .map(|i| match i {
            0 => cmin,
            i if i == points - 1 => cmax,
            i => (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp(),
        })
        .collect();
    if cmin < 1.0 && 1.0 < cmax && !grid.contains(&1.0) {
        let at = grid.partition_point(|&c| c < 1.0);
        grid.insert(at, 1.0);
    }
    grid
}

fn landscape(a: LandscapeArgs) -> Result<(), CliError> {
    if !(a.cmin > 0.0 && a.cmin < a.cmax && a.cmax.is_finite()) {
        return Err(CliError::Config(format!(
            "need 0 < cmin < cmax, got cmin={} cmax={}",
            a.cmin, a.cmax
        )));
    }
    if a.points < 2 {
        return Err(CliError::Config("--points must be at least 2".into()));
    }
    if let Some(p) = &a.out {
        check_file_free(p, a.force)?;
    }
    let g = match a.kind.as_str() {
        "jsd" => divergence::jsd_perclass_g,
        _ => divergence::jd_perclass_g,
    };
    let rows = landscape_grid(a.cmin, a.cmax, a.points)
        .into_iter()
        .map(|c| Ok(format!("{c},{}", g(c)?)))
        .collect::<Result<Vec<String>, CliError>>()?;
    write_csv(a.out.as_deref(), "c,g", &rows)
}

fn exposure(a: ExposureArgs) -> Result<(), CliError> {
    let split = parse_split(&a.split)?;
    let teacher = load_model(&a.teacher)?;
    let student = load_model(&a.student)?;
    let (_, data) = load_split(&a.data, split)?;
    let prompts = eval::exposure_prompts(&data, a.n_prompts, a.prompt_len);
    if prompts.is_empty() {
        return Err(CliError::Config(format!("split `{}` is empty", a.split)));
    }
    check_file_free(&a.out.out, a.out.force)?;
    check_file_free(&jsonl_twin(&a.out.out), a.out.force)?;
    let reports = eval::exaccerr_horizons(&teacher, &student, &prompts, &a.horizons, a.samples, a.seed)?;
    let rows: Vec<String> = reports
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.l, r.r_l, r.r_se, r.eps_l, r.eps_se, r.exaccerr_pct, r.exaccerr_se
            )
        })
        .collect();
    write_csv(
        Some(&a.out.out),
        "l,r_l,r_se,eps_l,eps_se,exaccerr_pct,exaccerr_se",
        &rows,
    )?;
    write_jsonl(&jsonl_twin(&a.out.out), &reports)?;
    for r in &reports {
        println!(
            "l={:>3}  R {:.4} ± {:.4}  eps {:.4} ± {:.4}  ExAccErr {:.2}% ± {:.2}",
            r.l, r.r_l, r.r_se, r.eps_l, r.eps_se, r.exaccerr_pct, r.exaccerr_se
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_exact_endpoints_and_one() {
        let g = landscape_grid(1e-8, 1e6, 200);
        assert_eq!((g[0], *g.last().unwrap()), (1e-8, 1e6));
        assert!(g.contains(&1.0));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(landscape_grid(2.0, 3.0, 2), vec![2.0, 3.0]);
    }

    #[test]
    fn mapping_flag_parses() {
        assert_eq!(parse_mapping("1:2,2:4").unwrap(), vec![(1, 2), (2, 4)]);
        assert!(parse_mapping("1-2").is_err());
        assert!(parse_mapping("a:2").is_err());
    }
}

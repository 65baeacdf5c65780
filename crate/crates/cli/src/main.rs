//! `dlens`: corpus generation, teacher training, distillation and
//! evaluation runs.

mod commands;

use distillens_cli::{config, error};

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

const SEED_HELP: &str = "Seed for every random stream of this command; components derive \
                         their own streams from it as SHA-256(seed LE ‖ component name)";

#[derive(Debug, Parser)]
#[command(
    name = "dlens",
    version,
    about = "Teacher-student distillation with logit-lens intermediate supervision",
    after_long_help = "ENVIRONMENT:\n  DLENS_THREADS  Upper bound on worker threads (default: logical cores)\n  \
                       RUST_LOG       Log filter (default: info)\n\n\
                       EXIT CODES:\n  0 success, 2 configuration error, 3 numeric failure, 4 I/O error"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic prompt/response corpus
    #[command(after_long_help = "OUTPUTS (in --out):\n  \
        train.jsonl, val.jsonl, test.jsonl  One {\"prompt\": [ids], \"response\": [ids]} object per line\n  \
        manifest.json  Corpus spec, split sizes, train_tokens, source_entropy_nats")]
    GenData(GenDataArgs),
    /// Train a teacher with next-token cross entropy
    #[command(after_long_help = RUN_DIR_HELP)]
    TrainTeacher(TrainTeacherArgs),
    /// Distill a student from a frozen teacher
    #[command(after_long_help = RUN_DIR_HELP)]
    Distill(DistillArgs),
    /// Rouge-L of generated responses and held-out cross entropy
    #[command(after_long_help = "OUTPUTS (in --out):\n  \
        rouge.csv / rouge.jsonl  Per example: decoding (greedy|sampled), seed, index, precision, recall, \
        f_measure (fractions in [0, 1]), generated_len, reference_len\n  \
        summary.json  rouge_l_greedy and rouge_l_sampled_mean/std (x100), per-seed sampled means, \
        ce_student and ce_teacher (nats/token)")]
    Eval(EvalArgs),
    /// Per-layer divergence between lensed teacher and student states
    #[command(after_long_help = "OUTPUTS:\n  \
        --out CSV with columns student_layer, teacher_layer, kind, divergence, is_final; \
        a JSONL twin is written next to it.\n  \
        The last row (is_final = true) compares the output distributions.")]
    LensProfile(LensProfileArgs),
    /// Per-class loss landscape g(c) over the confidence ratio c = q/p
    #[command(after_long_help = "OUTPUTS:\n  \
        CSV with columns c, g on a log-spaced grid (c = 1 is always included when in range); \
        written to --out or stdout.")]
    Landscape(LandscapeArgs),
    /// Exposure-bias report (excess accumulated error) per horizon
    #[command(after_long_help = "OUTPUTS:\n  \
        --out CSV with columns l, r_l, r_se, eps_l, eps_se, exaccerr_pct, exaccerr_se; \
        a JSONL twin is written next to it.\n  \
        r_l is the summed per-step KL under student prefixes, eps_l the mean per-step KL under teacher \
        prefixes, exaccerr_pct = (r_l - l*eps_l)/(l*eps_l)*100; *_se are Monte-Carlo standard errors.")]
    Exposure(ExposureArgs),
}

const RUN_DIR_HELP: &str = "OUTPUTS (in --out):\n  \
    config.toml    Fully resolved configuration\n  \
    metrics.jsonl  One object per step: step, l_task, l_inter, l_total, lr, wall_ms\n  \
    model.ckpt     Final weights";

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output path
    #[arg(long)]
    pub out: PathBuf,
    /// Replace existing output
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML config; its [corpus] table supplies defaults for the flags below
    #[arg(long, visible_alias = "spec")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, help = SEED_HELP)]
    pub seed: Option<u64>,
    /// Vocabulary size including PAD/BOS/EOS (>= 4)
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Hidden states of the generating automaton
    #[arg(long)]
    pub n_hidden_states: Option<usize>,
    /// Temperature of the random transition logits (lower is more peaked)
    #[arg(long)]
    pub transition_temperature: Option<f64>,
    /// Temperature of the random emission logits (lower is more peaked)
    #[arg(long)]
    pub emission_temperature: Option<f64>,
    /// Minimum symbols per sequence (>= 2)
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Maximum symbols per sequence
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Training examples
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Validation examples
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Test examples
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Transformer blocks
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Residual width
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Attention heads (must divide --d-model)
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Longest sequence (learned positions)
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Share the token embedding as the unembedding
    #[arg(long)]
    pub tie_unembedding: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Optimizer steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sequences per step
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate (cosine decay starts here)
    #[arg(long)]
    pub lr_init: Option<f64>,
    /// Learning rate at the last step
    #[arg(long)]
    pub lr_final: Option<f64>,
    /// Decoupled weight decay on matrices
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm clip (0 disables)
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Apply losses only where the next token belongs to the response
    #[arg(long)]
    pub response_only: Option<bool>,
    #[arg(long, help = SEED_HELP)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    /// TOML config; [teacher] and [train] tables supply defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory written by gen-data; its manifest fixes the vocabulary size
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct LensArgs {
    /// Apply the final layernorm before unembedding in the lens
    #[arg(long)]
    pub lens_final_norm: Option<bool>,
    /// Lens softmax temperature
    #[arg(long)]
    pub lens_temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// TOML config; [student], [train], [distill] and [lens] tables supply defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Teacher checkpoint; the student shares its vocabulary size
    #[arg(long)]
    pub teacher: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    /// Final-output loss: sft, fkl, rkl, jsd or jeffreys [default: rkl]
    #[arg(long)]
    pub task_loss: Option<String>,
    /// Intermediate loss: fkl, rkl, jsd, jeffreys or mse [default: jsd]
    #[arg(long)]
    pub inter_loss: Option<String>,
    /// Weight of the intermediate loss [default: 1.0]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Equally spaced intermediate student layers (0 disables) [default: 2]
    #[arg(long)]
    pub k: Option<usize>,
    /// Explicit student:teacher layer pairs, e.g. 1:2,2:4 (overrides --k)
    #[arg(long)]
    pub mapping: Option<String>,
    #[command(flatten)]
    pub lens: LensArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Corpus directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to evaluate
    #[arg(long)]
    pub student: PathBuf,
    /// Teacher checkpoint (needed for --reference teacher-greedy; adds ce_teacher)
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Split to evaluate: train, val or test
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub out: OutArgs,
    /// Seeds for sampled decoding
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
    pub seeds: Vec<u64>,
    /// Sampling temperature
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Nucleus mass for sampling
    #[arg(long, default_value_t = 1.0)]
    pub top_p: f64,
    /// Longest generated response (default: up to the model's max_seq_len)
    #[arg(long)]
    pub max_new: Option<usize>,
    /// References: corpus responses, or the teacher's greedy generations
    #[arg(long, value_parser = ["corpus", "teacher-greedy"], default_value = "corpus")]
    pub reference: String,
    /// Sequences per forward pass for cross entropy
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct LensProfileArgs {
    /// Teacher checkpoint (the reference distribution p)
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student checkpoint (the compared distribution q)
    #[arg(long)]
    pub student: PathBuf,
    /// Corpus directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Split to profile: train, val or test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// `auto` (uniform mapping of --k layers) or explicit pairs like 1:2,2:4
    #[arg(long, default_value = "auto")]
    pub mapping: String,
    /// Intermediate layers for --mapping auto
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Divergence D(teacher ‖ student): fkl, rkl, jsd or jeffreys
    #[arg(long, default_value = "fkl")]
    pub kind: String,
    #[command(flatten)]
    pub lens: LensArgs,
    /// Sequences per forward pass
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    /// Per-class function: jsd or jd
    #[arg(long, value_parser = ["jsd", "jd"])]
    pub kind: String,
    /// Smallest confidence ratio (> 0)
    #[arg(long, default_value_t = 1e-8)]
    pub cmin: f64,
    /// Largest confidence ratio
    #[arg(long, default_value_t = 1e6)]
    pub cmax: f64,
    /// Grid points (>= 2)
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    /// Output CSV (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing output
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ExposureArgs {
    /// Teacher checkpoint (the oracle p)
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student checkpoint (the generator q)
    #[arg(long)]
    pub student: PathBuf,
    /// Corpus directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Split supplying prompts: train, val or test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Horizons l
    #[arg(long, value_delimiter = ',', default_value = "8,16,24")]
    pub horizons: Vec<usize>,
    /// Sampled prefixes per prompt and prefix source
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// Prompts taken from the start of the split
    #[arg(long, default_value_t = 32)]
    pub n_prompts: usize,
    /// Leading prompt tokens kept after BOS
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 0, help = SEED_HELP)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("DLENS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("DLENS_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

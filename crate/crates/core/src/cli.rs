//! Command-line entry point. Every subcommand reads a JSON [`RunConfig`]
//! (optional except for `gen-data`), applies `--set key.path=value`
//! overrides, validates the result and only then does any work.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{self, CorpusConfig, Utterance};
use crate::decoding::{self, AcceptMode, LengthPenalty, VerificationPolicy};
use crate::evalbench::{self, BenchOptions};
use crate::model::{self, MedusaVariant, Model, ModelConfig};
use crate::training::{self, TwoStage};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TwoStage,
    pub policy: VerificationPolicy,
    pub penalty: LengthPenalty,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut errs = Vec::new();
        if let Err(e) = self.corpus.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.model.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.train.base.validate(0) {
            errs.push(format!("train.base: {e}"));
        }
        if let Err(e) = self.train.medusa.validate(self.model.k) {
            errs.push(format!("train.medusa: {e}"));
        }
        if let Err(e) = self.policy.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.penalty.validate() {
            errs.push(e.to_string());
        }
        let (c, m) = (&self.corpus, &self.model);
        if c.vocab_size != m.vocab_size {
            errs.push(format!(
                "corpus.vocab_size {} != model.vocab_size {}",
                c.vocab_size, m.vocab_size
            ));
        }
        if c.d_feat != m.d_feat {
            errs.push(format!(
                "corpus.d_feat {} != model.d_feat {}",
                c.d_feat, m.d_feat
            ));
        }
        if c.frames_per_token != m.frames_per_token {
            errs.push(format!(
                "corpus.frames_per_token {} != model.frames_per_token {}",
                c.frames_per_token, m.frames_per_token
            ));
        }
        let longest = c.max_tokens.max(c.eval_range().1);
        if longest + 1 > m.max_tgt_tokens {
            errs.push(format!(
                "model.max_tgt_tokens {} cannot hold {} tokens plus EOS",
                m.max_tgt_tokens, longest
            ));
        }
        if longest * c.frames_per_token > m.max_src_frames {
            errs.push(format!(
                "model.max_src_frames {} is below {} frames",
                m.max_src_frames,
                longest * c.frames_per_token
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }
}

/// Sets `path` (dot separated) in a JSON object tree. The value is parsed
/// as JSON when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), String> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not of the form key.path=value"))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(format!("override `{assignment}` has an empty key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    if !node.is_object() {
        *node = Value::Object(Default::default());
    }
    node.as_object_mut()
        .expect("object")
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, String> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let config: RunConfig = serde_json::from_value(root).map_err(|e| match path {
        Some(p) => format!("{}: {e}", p.display()),
        None => e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Parser)]
#[command(
    name = "medusa",
    about = "Multi-head speculative decoding on a toy speech model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.medusa.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Linear,
    Block,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Medusa,
    Assisted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Typical,
    ExactMatch,
}

#[derive(Debug, Args)]
struct PolicyArgs {
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

impl PolicyArgs {
    fn apply(&self, mut p: VerificationPolicy) -> Result<VerificationPolicy, String> {
        if let Some(mode) = self.policy {
            p.mode = match mode {
                PolicyArg::Typical => AcceptMode::Typical,
                PolicyArg::ExactMatch => AcceptMode::ExactMatch,
            };
        }
        if let Some(e) = self.epsilon {
            p.epsilon = e;
        }
        if let Some(a) = self.alpha {
            p.alpha = a;
        }
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a base model and fine-tune Medusa heads on it.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Start from this pretrained base instead of pretraining.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Also write the pretrained base.
        #[arg(long)]
        save_base: Option<PathBuf>,
        /// JSON-lines training log; defaults to `<out-checkpoint>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Transcribe utterances.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A corpus directory (its test split) or a JSON-lines utterance file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "medusa")]
        mode: ModeArg,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Draft model for `--mode assisted`.
        #[arg(long)]
        assistant: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        draft_len: usize,
        #[arg(long)]
        json: bool,
    },
    /// Time greedy against Medusa decoding.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        json: bool,
        /// Write the per-length buckets as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and benchmark one model per head count.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k_list: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Transcribe unlabeled audio and drop the worst 5% by length discrepancy.
    PseudoLabel {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on a runtime failure, 2 on a usage or configuration error.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
        Err(Failure::Runtime(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

fn config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    load_config(args.config.as_deref(), &args.overrides).map_err(usage)
}

fn checkpoint(path: &Path) -> Result<Model, Failure> {
    model::load_checkpoint(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read_input(path: &Path, fpt: Option<usize>, split: &str) -> Result<Vec<Utterance>, Failure> {
    let file = if path.is_dir() {
        path.join(format!("{split}.jsonl"))
    } else {
        path.to_path_buf()
    };
    data::read_utterances(&file, fpt).map_err(usage)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn json_line(out: &mut dyn Write, value: &impl Serialize) -> Outcome {
    let s = serde_json::to_string(value).map_err(runtime)?;
    writeln!(out, "{s}").map_err(runtime)
}

fn dispatch(command: Command, out: &mut dyn Write) -> Outcome {
    match command {
        Command::GenData {
            config,
            overrides,
            out: dir,
        } => {
            let rc = load_config(Some(&config), &overrides).map_err(usage)?;
            let corpus = data::generate_corpus(&rc.corpus).map_err(usage)?;
            fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
            data::write_corpus(&dir, &corpus).map_err(runtime)?;
            writeln!(
                out,
                "wrote {} train, {} valid, {} test utterances to {}",
                corpus.train.len(),
                corpus.valid.len(),
                corpus.test.len(),
                dir.display()
            )
            .map_err(runtime)
        }
        Command::Train {
            cfg,
            corpus,
            variant,
            out_checkpoint,
            base,
            save_base,
            log,
        } => {
            let mut rc = config(&cfg)?;
            if let Some(v) = variant {
                rc.model.variant = match v {
                    VariantArg::Linear => MedusaVariant::MedusaLinear,
                    VariantArg::Block => MedusaVariant::MedusaBlock,
                };
            }
            let corpus = data::read_corpus(&corpus, rc.model.frames_per_token).map_err(usage)?;
            let base_model = base.as_deref().map(checkpoint).transpose()?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out_checkpoint.clone().into_os_string();
                p.push(".log.jsonl");
                PathBuf::from(p)
            });
            let mut lines = String::new();
            let mut on_log = |stage: &str, r: &training::LogRecord| {
                let mut v = serde_json::to_value(r).expect("log record serializes");
                v["stage"] = Value::String(stage.to_string());
                lines.push_str(&v.to_string());
                lines.push('\n');
            };
            let base_model = match base_model {
                Some(b) => b.base(),
                None => {
                    let (b, _) = training::pretrain_base(
                        &rc.model,
                        &corpus.train,
                        &corpus.valid,
                        &rc.train.base,
                        |r| on_log("base", r),
                    )
                    .map_err(runtime)?;
                    b
                }
            };
            if let Some(p) = &save_base {
                model::save_checkpoint(&base_model, p).map_err(runtime)?;
            }
            let trained = if rc.model.variant == MedusaVariant::None {
                base_model
            } else {
                let (m, _) = training::finetune_medusa(
                    &base_model,
                    rc.model.variant,
                    rc.model.k,
                    &corpus.train,
                    &corpus.valid,
                    &rc.train.medusa,
                    |r| on_log("medusa", r),
                )
                .map_err(runtime)?;
                m
            };
            model::save_checkpoint(&trained, &out_checkpoint).map_err(runtime)?;
            write_text(&log_path, &lines)?;
            writeln!(
                out,
                "wrote {} ({} log records in {})",
                out_checkpoint.display(),
                lines.lines().count(),
                log_path.display()
            )
            .map_err(runtime)
        }
        Command::Decode {
            cfg,
            checkpoint: ckpt,
            input,
            mode,
            policy,
            assistant,
            draft_len,
            json,
        } => {
            let rc = config(&cfg)?;
            let m = checkpoint(&ckpt)?;
            let policy = policy.apply(rc.policy).map_err(usage)?;
            let assistant = match (mode, assistant) {
                (ModeArg::Assisted, Some(p)) => Some(checkpoint(&p)?),
                (ModeArg::Assisted, None) => {
                    return Err(usage("--mode assisted needs --assistant"))
                }
                _ => None,
            };
            let utts = read_input(&input, None, "test")?;
            let max_len = m.config().max_tgt_tokens;
            for u in &utts {
                let r = match mode {
                    ModeArg::Greedy => {
                        decoding::greedy_decode(&m, &u.features, max_len, &rc.penalty)
                    }
                    ModeArg::Medusa => {
                        decoding::medusa_decode(&m, &u.features, max_len, &policy, &rc.penalty)
                    }
                    ModeArg::Assisted => decoding::assisted_decode(
                        &m,
                        assistant.as_ref().expect("checked above"),
                        &u.features,
                        max_len,
                        draft_len,
                    ),
                }
                .map_err(|e| runtime(format!("{}: {e}", u.id)))?;
                if json {
                    json_line(out, &serde_json::json!({ "id": u.id, "result": r }))?;
                } else {
                    writeln!(
                        out,
                        "{}\t{}\t(passes {}, iterations {})",
                        u.id,
                        evalbench::render(r.transcript()),
                        r.n_decoder_forward_passes,
                        r.n_iterations
                    )
                    .map_err(runtime)?;
                }
            }
            Ok(())
        }
        Command::Bench {
            cfg,
            checkpoint: ckpt,
            corpus,
            split,
            repeats,
            policy,
            parallel,
            json,
            csv,
        } => {
            let rc = config(&cfg)?;
            let m = checkpoint(&ckpt)?;
            let policy = policy.apply(rc.policy).map_err(usage)?;
            let utts = read_input(&corpus, Some(m.config().frames_per_token), &split)?;
            let report = evalbench::bench(
                &m,
                &utts,
                &policy,
                &rc.penalty,
                &BenchOptions { repeats, parallel },
            )
            .map_err(runtime)?;
            if let Some(p) = csv {
                write_text(&p, &report.buckets_csv())?;
            }
            if json {
                json_line(out, &report)
            } else {
                write!(out, "{}", report.to_text()).map_err(runtime)
            }
        }
        Command::Ablate {
            cfg,
            corpus,
            k_list,
            repeats,
            json,
            csv,
        } => {
            let rc = config(&cfg)?;
            let corpus = data::read_corpus(&corpus, rc.model.frames_per_token).map_err(usage)?;
            let rows = evalbench::ablate_heads(
                &rc.model,
                &k_list,
                &corpus,
                &rc.train,
                &rc.policy,
                &rc.penalty,
                &BenchOptions {
                    repeats,
                    parallel: false,
                },
            )
            .map_err(|e| match e {
                evalbench::EvalError::Contract(msg) => usage(msg),
                other => runtime(other),
            })?;
            if let Some(p) = csv {
                write_text(&p, &evalbench::ablation_csv(&rows))?;
            }
            if json {
                json_line(out, &rows)
            } else {
                write!(out, "{}", evalbench::ablation_text(&rows)).map_err(runtime)
            }
        }
        Command::PseudoLabel {
            cfg,
            checkpoint: ckpt,
            unlabeled,
            out: dest,
            json,
        } => {
            config(&cfg)?;
            let m = checkpoint(&ckpt)?;
            let utts = read_input(&unlabeled, None, "train")?;
            let set =
                training::pseudo_label(&m, &utts, m.config().max_tgt_tokens).map_err(runtime)?;
            data::write_utterances(&dest, &set.to_utterances(&utts)).map_err(runtime)?;
            if json {
                json_line(out, &set)
            } else {
                writeln!(
                    out,
                    "kept {} of {} utterances, wrote {}",
                    set.kept().count(),
                    set.items.len(),
                    dest.display()
                )
                .map_err(runtime)?;
                for p in set.dropped() {
                    writeln!(out, "dropped {} (discrepancy {:.3})", p.id, p.discrepancy)
                        .map_err(runtime)?;
                }
                Ok(())
            }
        }
    }
}

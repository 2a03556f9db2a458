//! Command-line front end.
//!
//! Every run resolves its settings from three layers: command-line flags, then
//! an optional `--config` file of `key=value` lines, then built-in defaults.
//! Commands that write files echo the resolved settings to
//! `effective_config.txt` in their output directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::AttentionMode;
use crate::config::{format_kv, load_kv};
use crate::corpus::{load_corpus, save_corpus, Sequence, SyntheticLanguage};
use crate::diagnostics::{run_diagnostics, DiagnosticsConfig, DEFAULT_BUCKET_WIDTH};
use crate::error::{Error, Result};
use crate::eval::{
    bench, continuation_eval, nll_curve, select_sequences, EvalReport, MilestoneSpec,
    DEFAULT_GEN_LEN,
};
use crate::mask::{build_mask, MaskParams, DEFAULT_N_GLOBAL};
use crate::model::{load_checkpoint, save_checkpoint, ToyModel, ToyModelConfig, TrainConfig};

pub const THREADS_ENV: &str = "LMINF_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "lm-infinite",
    version,
    about = "Lambda-shaped attention with a distance limit: mask inspection, toy-model training, diagnostics, evaluation and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the Lambda mask of a sequence.
    Mask(MaskArgs),
    /// Write a synthetic-language corpus file.
    Synth(SynthArgs),
    /// Train a toy model and write its checkpoint.
    Train(TrainArgs),
    /// Greedy continuation of a prompt.
    Generate(GenerateArgs),
    /// Logit, entropy and position-projection diagnostics as CSV.
    Diag(DiagArgs),
    /// NLL and continuation quality at milestone lengths.
    Eval(EvalArgs),
    /// Encode and decode timings.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Vanilla,
    Lambda,
}

impl ModeArg {
    fn name(self) -> &'static str {
        match self {
            ModeArg::Vanilla => "vanilla",
            ModeArg::Lambda => "lambda",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskFormat {
    Ranges,
    Dense,
}

/// Settings shared by every command.
#[derive(Debug, Args)]
struct Common {
    /// `key=value` file; flags override it, it overrides defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Root seed of every random stream.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

/// Lambda mask overrides.
#[derive(Debug, Args)]
struct MaskOverrides {
    /// Pinned prefix length.
    #[arg(long, value_name = "G")]
    n_global: Option<usize>,
    /// Sliding window length.
    #[arg(long, value_name = "L")]
    n_local: Option<usize>,
    /// Distance limit; defaults to the training length, or to n_local for `mask`.
    #[arg(long, value_name = "P")]
    l_pretrain: Option<usize>,
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    mask: MaskOverrides,
    /// Sequence length.
    #[arg(long, value_name = "N")]
    seq_len: Option<usize>,
    /// `ranges` prints `i: [g0,g1) [l0,l1)` per row, `dense` a 0/1 grid.
    #[arg(long, value_enum)]
    format: Option<MaskFormat>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus file to write (`.bin` for the binary format, text otherwise).
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Number of sequences.
    #[arg(long, value_name = "N")]
    sequences: Option<usize>,
    /// Tokens per sequence.
    #[arg(long, value_name = "N")]
    seq_len: Option<usize>,
    /// Vocabulary size.
    #[arg(long, value_name = "V")]
    vocab_size: Option<usize>,
    /// Per-token noise probability.
    #[arg(long, value_name = "P")]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    mask: MaskOverrides,
    /// Training corpus; a synthetic corpus is generated from the seed when absent.
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Attention used during training.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Optimizer steps.
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    /// Adam learning rate.
    #[arg(long, value_name = "LR")]
    lr: Option<f64>,
    /// Windows per step.
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Vocabulary size.
    #[arg(long, value_name = "V")]
    vocab_size: Option<usize>,
    /// Model width.
    #[arg(long, value_name = "D")]
    d_model: Option<usize>,
    /// Number of blocks.
    #[arg(long, value_name = "N")]
    n_layers: Option<usize>,
    /// Attention heads.
    #[arg(long, value_name = "H")]
    n_heads: Option<usize>,
    /// Training window length.
    #[arg(long, value_name = "N")]
    train_len: Option<usize>,
    /// Positional encoding: `rope` or `alibi`.
    #[arg(long, value_name = "KIND")]
    encoding: Option<String>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    mask: MaskOverrides,
    /// Model checkpoint.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Attention mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Space-separated prompt token ids.
    #[arg(long, value_name = "IDS")]
    prompt: Option<String>,
    /// Tokens to generate.
    #[arg(long, value_name = "N")]
    n_new: Option<usize>,
}

#[derive(Debug, Args)]
struct DiagArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    mask: MaskOverrides,
    /// Model checkpoint.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Corpus holding the probe sequence.
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Attention mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Index of the probe sequence in the corpus.
    #[arg(long, value_name = "I")]
    sequence: Option<usize>,
    /// Distance bucket width for logit statistics.
    #[arg(long, value_name = "W")]
    bucket_width: Option<usize>,
    /// Head whose logits are profiled.
    #[arg(long, value_name = "H")]
    head: Option<usize>,
    /// Layer whose output is projected.
    #[arg(long, value_name = "L")]
    pca_layer: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    mask: MaskOverrides,
    /// Model checkpoint.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Evaluation corpus.
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Attention mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Comma list of lengths, as multiples (`4x`) of train_len or absolute.
    #[arg(long, value_name = "LIST")]
    milestones: Option<String>,
    /// Continuation length scored at each milestone; 0 skips generation.
    #[arg(long, value_name = "N")]
    gen_len: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    mask: MaskOverrides,
    /// Model checkpoint; a freshly initialized default model when absent.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Attention mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Comma list of context lengths.
    #[arg(long, value_name = "LIST")]
    seq_lens: Option<String>,
    /// Timed repeats per length; the median is reported.
    #[arg(long, value_name = "N")]
    repeats: Option<usize>,
}

/// Layered settings: flags over config file over defaults.
struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    fn new(
        common: &Common,
        defaults: &[(&str, String)],
        flags: Vec<(&str, Option<String>)>,
    ) -> Result<Self> {
        let mut map: BTreeMap<String, String> = defaults
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        if let Some(path) = &common.config {
            map.extend(load_kv(path)?);
        }
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        };
        set("out", common.out.as_ref().map(|p| p.display().to_string()));
        set("seed", common.seed.map(|s| s.to_string()));
        for (k, v) in flags {
            set(k, v);
        }
        Ok(Self { map })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.map
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`")))
            })
            .transpose()
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| {
            Error::invalid(format!(
                "missing `{key}` (pass --{} or set it in --config)",
                key.replace('_', "-")
            ))
        })
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.require::<String>(key).map(PathBuf::from)
    }

    fn mode(&self) -> Result<AttentionMode> {
        self.require::<String>("mode")?.parse()
    }

    fn seed(&self) -> Result<u64> {
        Ok(self.get("seed")?.unwrap_or(0))
    }

    /// Creates the output directory, if one is set, and echoes the settings there.
    fn prepare_out(&self) -> Result<Option<PathBuf>> {
        let Some(dir) = self.get::<String>("out")?.map(PathBuf::from) else {
            return Ok(None);
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("effective_config.txt");
        fs::write(&path, format_kv(&self.map)).map_err(|e| Error::io(&path, e))?;
        Ok(Some(dir))
    }
}

fn opt<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|v| v.to_string())
}

fn mask_flags(m: &MaskOverrides) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("n_global", opt(m.n_global)),
        ("n_local", opt(m.n_local)),
        ("l_pretrain", opt(m.l_pretrain)),
    ]
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Loads a checkpoint and applies mask and mode settings, if any.
fn load_model(s: &Settings) -> Result<ToyModel> {
    let mut model = load_checkpoint(s.path("model")?)?;
    let mut kv: BTreeMap<String, String> = model.config.to_kv().into_iter().collect();
    for key in ["n_global", "n_local", "l_pretrain", "mode"] {
        if let Some(v) = s.map.get(key) {
            kv.insert(key.to_string(), v.clone());
        }
    }
    model.config = ToyModelConfig::from_kv(&kv)?;
    Ok(model)
}

fn cmd_mask(a: &MaskArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = mask_flags(&a.mask);
    flags.push(("seq_len", opt(a.seq_len)));
    flags.push(("format", a.format.map(|f| format!("{f:?}").to_lowercase())));
    let s = Settings::new(
        &a.common,
        &[
            ("n_global", DEFAULT_N_GLOBAL.to_string()),
            ("format", "ranges".into()),
        ],
        flags,
    )?;
    let n_local: usize = s.require("n_local")?;
    let params = MaskParams::new(
        s.require("n_global")?,
        n_local,
        s.get("l_pretrain")?.unwrap_or(n_local),
    )?;
    let mask = build_mask(s.require("seq_len")?, &params)?;
    let text = match s.require::<String>("format")?.as_str() {
        "ranges" => mask.format_ranges(),
        "dense" => mask.format_dense(),
        other => return Err(Error::invalid(format!("unknown mask format `{other}`"))),
    };
    if let Some(dir) = s.prepare_out()? {
        write_file(&dir.join("mask.txt"), &text)?;
    }
    out.write_all(text.as_bytes()).map_err(out_err)
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let lang = SyntheticLanguage::default();
    let s = Settings::new(
        &a.common,
        &[
            ("sequences", "64".into()),
            ("seq_len", "1152".into()),
            ("vocab_size", lang.vocab_size.to_string()),
            ("noise", lang.noise.to_string()),
        ],
        vec![
            ("corpus", a.corpus.as_ref().map(|p| p.display().to_string())),
            ("sequences", opt(a.sequences)),
            ("seq_len", opt(a.seq_len)),
            ("vocab_size", opt(a.vocab_size)),
            ("noise", opt(a.noise)),
        ],
    )?;
    let lang = SyntheticLanguage {
        vocab_size: s.require("vocab_size")?,
        noise: s.require("noise")?,
        ..lang
    };
    let corpus = lang.generate(s.seed()?, s.require("sequences")?, s.require("seq_len")?)?;
    let path = s.path("corpus")?;
    s.prepare_out()?;
    save_corpus(&path, &corpus)?;
    writeln!(
        out,
        "wrote {} sequences to {}",
        corpus.len(),
        path.display()
    )
    .map_err(out_err)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    // Mask sizes and the seed are left out so they follow train_len and --seed.
    let model_defaults = ToyModelConfig::default().to_kv();
    let defaults: Vec<(&str, String)> = model_defaults
        .iter()
        .filter(|(k, _)| !["seed", "n_global", "n_local", "l_pretrain"].contains(&k.as_str()))
        .map(|(k, v)| (k.as_str(), v.clone()))
        .chain([
            ("steps", "400".to_string()),
            ("lr", "0.003".to_string()),
            ("batch_size", "8".to_string()),
            ("log_every", "10".to_string()),
        ])
        .collect();
    let mut flags = mask_flags(&a.mask);
    flags.extend([
        ("corpus", a.corpus.as_ref().map(|p| p.display().to_string())),
        ("mode", a.mode.map(|m| m.name().to_string())),
        ("steps", opt(a.steps)),
        ("lr", opt(a.lr)),
        ("batch_size", opt(a.batch_size)),
        ("vocab_size", opt(a.vocab_size)),
        ("d_model", opt(a.d_model)),
        ("n_layers", opt(a.n_layers)),
        ("n_heads", opt(a.n_heads)),
        ("train_len", opt(a.train_len)),
        ("encoding", a.encoding.clone()),
    ]);
    let s = Settings::new(&a.common, &defaults, flags)?;
    let mut kv = s.map.clone();
    kv.insert("seed".into(), s.seed()?.to_string());
    let config = ToyModelConfig::from_kv(&kv)?;
    let mut tc = TrainConfig::new(
        s.require("steps")?,
        s.require("lr")?,
        s.require("batch_size")?,
        config.train_len,
    );
    tc.mode = s.mode()?;
    tc.seed = s.seed()?;
    tc.log_every = s.require("log_every")?;
    let corpus: Vec<Sequence> = match s.get::<String>("corpus")? {
        Some(p) => load_corpus(p)?,
        None => {
            let lang = SyntheticLanguage {
                vocab_size: config.vocab_size as u32,
                ..SyntheticLanguage::default()
            };
            lang.generate(s.seed()?, tc.steps * tc.batch_size, config.train_len + 1)?
        }
    };
    let dir = s
        .prepare_out()?
        .ok_or_else(|| Error::invalid("train needs --out"))?;
    let mut model = ToyModel::init(config)?;
    let report = model.train(&corpus, &tc)?;
    let mut csv = String::from("step,loss\n");
    for (step, loss) in &report.losses {
        writeln!(csv, "{step},{loss}").unwrap();
    }
    write_file(&dir.join("loss.csv"), &csv)?;
    save_checkpoint(&model, dir.join("model.lmtm"))?;
    let last = report.losses.last().map_or(f64::NAN, |l| l.1);
    writeln!(
        out,
        "trained {} steps, final loss {last:.4}, checkpoint {}",
        tc.steps,
        dir.join("model.lmtm").display()
    )
    .map_err(out_err)
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = mask_flags(&a.mask);
    flags.extend([
        ("model", a.model.as_ref().map(|p| p.display().to_string())),
        ("mode", a.mode.map(|m| m.name().to_string())),
        ("prompt", a.prompt.clone()),
        ("n_new", opt(a.n_new)),
    ]);
    let s = Settings::new(
        &a.common,
        &[("mode", "lambda".into()), ("n_new", "32".into())],
        flags,
    )?;
    let model = load_model(&s)?;
    let prompt = crate::corpus::parse_text(&s.require::<String>("prompt")?)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::invalid("empty prompt"))?;
    let mode = s.mode()?;
    let mut cache = model.new_cache(mode)?;
    let tokens = model.generate(&prompt, s.require("n_new")?, mode, Some(&mut cache))?;
    let text = tokens
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    if let Some(dir) = s.prepare_out()? {
        write_file(&dir.join("generated.txt"), &format!("{text}\n"))?;
    }
    writeln!(out, "{text}").map_err(out_err)
}

fn cmd_diag(a: &DiagArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = mask_flags(&a.mask);
    flags.extend([
        ("model", a.model.as_ref().map(|p| p.display().to_string())),
        ("corpus", a.corpus.as_ref().map(|p| p.display().to_string())),
        ("mode", a.mode.map(|m| m.name().to_string())),
        ("sequence", opt(a.sequence)),
        ("bucket_width", opt(a.bucket_width)),
        ("head", opt(a.head)),
        ("pca_layer", opt(a.pca_layer)),
    ]);
    let s = Settings::new(
        &a.common,
        &[
            ("mode", "vanilla".into()),
            ("sequence", "0".into()),
            ("bucket_width", DEFAULT_BUCKET_WIDTH.to_string()),
            ("head", "0".into()),
            ("pca_layer", "0".into()),
        ],
        flags,
    )?;
    let model = load_model(&s)?;
    let corpus = load_corpus(s.path("corpus")?)?;
    let index: usize = s.require("sequence")?;
    let tokens = corpus
        .get(index)
        .ok_or_else(|| Error::invalid(format!("corpus has no sequence {index}")))?;
    let mut config = DiagnosticsConfig::for_model(&model, s.mode()?);
    config.bucket_width = s.require("bucket_width")?;
    config.head = s.require("head")?;
    config.pca_layer = s.require("pca_layer")?;
    let dir = s
        .prepare_out()?
        .ok_or_else(|| Error::invalid("diag needs --out"))?;
    let report = run_diagnostics(&model, tokens, &config)?;
    report.write_csvs(&dir)?;
    writeln!(
        out,
        "max |logit| {:.4}; wrote entropy.csv, logits.csv, pca.csv to {}",
        report.logit_bound,
        dir.display()
    )
    .map_err(out_err)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = mask_flags(&a.mask);
    flags.extend([
        ("model", a.model.as_ref().map(|p| p.display().to_string())),
        ("corpus", a.corpus.as_ref().map(|p| p.display().to_string())),
        ("mode", a.mode.map(|m| m.name().to_string())),
        ("milestones", a.milestones.clone()),
        ("gen_len", opt(a.gen_len)),
    ]);
    let s = Settings::new(
        &a.common,
        &[
            ("mode", "lambda".into()),
            ("milestones", "1x,2x,4x,8x,16x".into()),
            ("gen_len", DEFAULT_GEN_LEN.to_string()),
        ],
        flags,
    )?;
    let model = load_model(&s)?;
    let corpus = load_corpus(s.path("corpus")?)?;
    let picked: Vec<Sequence> = select_sequences(corpus.len(), s.get("max_sequences")?, s.seed()?)
        .into_iter()
        .map(|i| corpus[i].clone())
        .collect();
    let spec = MilestoneSpec::parse(&s.require::<String>("milestones")?, model.config.train_len)?;
    let mode = s.mode()?;
    let gen_len: usize = s.require("gen_len")?;
    let dir = s
        .prepare_out()?
        .ok_or_else(|| Error::invalid("eval needs --out"))?;
    let mut report = EvalReport {
        nll: vec![nll_curve(&model, &picked, &spec, mode)?],
        ..Default::default()
    };
    if gen_len > 0 {
        report
            .continuation
            .push(continuation_eval(&model, &picked, &spec, gen_len, mode)?);
    }
    report.write_csvs(&dir)?;
    let csv = eval_csv(&report);
    write_file(&dir.join("eval.csv"), &csv)?;
    out.write_all(csv.as_bytes()).map_err(out_err)
}

/// One row per (mode, milestone) joining NLL and continuation scores; the
/// scores are empty when generation was skipped.
fn eval_csv(report: &EvalReport) -> String {
    let mut s = String::from("mode,milestone,nll,perplexity,bleu,rouge_lsum,evaluated,skipped\n");
    for curve in &report.nll {
        let cont = report.continuation.iter().find(|c| c.mode == curve.mode);
        for p in &curve.points {
            let (bleu, rouge) = cont
                .and_then(|c| c.at(p.milestone))
                .map_or((String::new(), String::new()), |c| {
                    (c.bleu.to_string(), c.rouge_lsum.to_string())
                });
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                curve.mode, p.milestone, p.nll, p.perplexity, bleu, rouge, p.evaluated, p.skipped
            )
            .unwrap();
        }
    }
    s
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = mask_flags(&a.mask);
    flags.extend([
        ("model", a.model.as_ref().map(|p| p.display().to_string())),
        ("mode", a.mode.map(|m| m.name().to_string())),
        ("seq_lens", a.seq_lens.clone()),
        ("repeats", opt(a.repeats)),
    ]);
    let s = Settings::new(
        &a.common,
        &[
            ("mode", "lambda".into()),
            ("seq_lens", "512,2048".into()),
            ("repeats", "3".into()),
        ],
        flags,
    )?;
    let model = if s.map.contains_key("model") {
        load_model(&s)?
    } else {
        let mut kv: BTreeMap<String, String> =
            ToyModelConfig::default().to_kv().into_iter().collect();
        for key in ["n_global", "n_local", "l_pretrain", "seed"] {
            if let Some(v) = s.map.get(key) {
                kv.insert(key.to_string(), v.clone());
            }
        }
        ToyModel::init(ToyModelConfig::from_kv(&kv)?)?
    };
    let mode = s.mode()?;
    let repeats: usize = s.require("repeats")?;
    let lens = s
        .require::<String>("seq_lens")?
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad length `{x}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport {
        bench: lens
            .iter()
            .map(|&n| bench(&model, n, mode, repeats))
            .collect::<Result<_>>()?,
        ..Default::default()
    };
    if let Some(dir) = s.prepare_out()? {
        report.write_csvs(&dir)?;
    }
    out.write_all(report.bench_csv().as_bytes())
        .map_err(out_err)
}

fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // A pool that already exists (a second call in one process) keeps its size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

/// Parses `argv` (program name first), runs the command writing its report
/// to `out`, and returns the process exit code: 0 on success, 1 on runtime
/// failure, 2 on a usage error.
pub fn parse_and_dispatch_to<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    let result = match &cli.command {
        Command::Mask(a) => cmd_mask(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Diag(a) => cmd_diag(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Bench(a) => cmd_bench(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    parse_and_dispatch_to(argv, &mut std::io::stdout().lock())
}

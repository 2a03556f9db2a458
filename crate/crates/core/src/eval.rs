//! Evaluation protocols: NLL at milestone positions, scored greedy
//! continuations, the truncate-and-re-encode baseline, and timing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::attention::AttentionMode;
use crate::corpus::Sequence;
use crate::error::{Error, Result};
use crate::mask::{build_mask, MaskParams};
use crate::metrics::{bleu, rouge_lsum, BleuConfig};
use crate::model::{argmax, AttentionKernel, ToyModel};
use crate::rng::{substream, DATA_ORDER_STREAM};

pub const NLL_WINDOW: usize = 32;
pub const DEFAULT_GEN_LEN: usize = 100;
pub const DEFAULT_MULTIPLES: [usize; 5] = [1, 2, 4, 8, 16];

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

/// Context lengths at which quality is measured.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MilestoneSpec {
    lengths: Vec<usize>,
}

impl MilestoneSpec {
    pub fn new(lengths: Vec<usize>, train_len: usize) -> Result<Self> {
        if lengths.is_empty() || lengths[0] == 0 {
            return Err(Error::invalid(
                "milestones must be a non-empty list of positive lengths",
            ));
        }
        if lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "milestones {lengths:?} are not strictly increasing"
            )));
        }
        if lengths[0] > train_len {
            return Err(Error::invalid(format!(
                "first milestone {} exceeds train_len {train_len}",
                lengths[0]
            )));
        }
        Ok(Self { lengths })
    }

    pub fn from_multiples(train_len: usize, multiples: &[usize]) -> Result<Self> {
        Self::new(multiples.iter().map(|m| m * train_len).collect(), train_len)
    }

    pub fn default_for(train_len: usize) -> Self {
        Self::from_multiples(train_len, &DEFAULT_MULTIPLES).expect("default multiples are valid")
    }

    /// Parses a comma list whose items are either multiples of `train_len`
    /// (`4x`) or absolute lengths (`512`).
    pub fn parse(text: &str, train_len: usize) -> Result<Self> {
        let lengths = text
            .split(',')
            .map(|item| {
                let item = item.trim();
                let (num, factor) = match item.strip_suffix(['x', 'X']) {
                    Some(m) => (m, train_len),
                    None => (item, 1),
                };
                num.parse::<usize>()
                    .map(|n| n * factor)
                    .map_err(|_| Error::invalid(format!("bad milestone `{item}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(lengths, train_len)
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn max(&self) -> usize {
        *self.lengths.last().expect("non-empty")
    }
}

/// Indices of the sequences to evaluate: all of them, or `limit` drawn without
/// replacement from the data-order stream of `seed` and kept in corpus order.
/// Every mode evaluated with the same arguments sees the same sequences.
pub fn select_sequences(corpus_len: usize, limit: Option<usize>, seed: u64) -> Vec<usize> {
    match limit {
        Some(n) if n < corpus_len => {
            let mut rng = substream(seed, DATA_ORDER_STREAM);
            let mut idx = sample(&mut rng, corpus_len, n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..corpus_len).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllPoint {
    pub milestone: usize,
    pub nll: f64,
    pub perplexity: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllCurve {
    pub mode: AttentionMode,
    pub points: Vec<NllPoint>,
}

impl NllCurve {
    pub fn at(&self, milestone: usize) -> Option<&NllPoint> {
        self.points.iter().find(|p| p.milestone == milestone)
    }
}

/// Positions `[m - 32, m)` (clipped at 1) score the tokens there given
/// everything before them. Returns their summed NLL and count.
fn window_nll(token_nll: &[f64], m: usize) -> (f64, usize) {
    let lo = m.saturating_sub(NLL_WINDOW).max(1);
    let s: CompensatedSum = (lo..m).map(|p| token_nll[p - 1]).collect();
    (s.value(), m - lo)
}

/// Mean NLL of the `NLL_WINDOW` tokens ending at each milestone, averaged
/// over every sequence of at least that length. Sequences run once through
/// the model at their longest needed prefix.
pub fn nll_curve(
    model: &ToyModel,
    corpus: &[Sequence],
    milestones: &MilestoneSpec,
    mode: AttentionMode,
) -> Result<NllCurve> {
    let max_m = milestones.max();
    let per_seq: Vec<Option<Vec<f64>>> = corpus
        .par_iter()
        .map(|seq| {
            let usable = seq.len().min(max_m);
            if usable < milestones.lengths()[0] || usable < 2 {
                return Ok(None);
            }
            model.token_nll(&seq[..usable], mode).map(Some)
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(milestones.lengths().len());
    for &m in milestones.lengths() {
        let mut total = CompensatedSum::default();
        let mut count = 0usize;
        let mut evaluated = 0usize;
        for nll in per_seq.iter().flatten().filter(|n| n.len() + 1 >= m) {
            let (s, c) = window_nll(nll, m);
            total.add(s);
            count += c;
            evaluated += 1;
        }
        if evaluated == 0 || count == 0 {
            return Err(Error::NoQualifyingSequence { milestone: m });
        }
        let nll = total.value() / count as f64;
        points.push(NllPoint {
            milestone: m,
            nll,
            perplexity: nll.exp(),
            evaluated,
            skipped: corpus.len() - evaluated,
        });
    }
    Ok(NllCurve { mode, points })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationPoint {
    pub milestone: usize,
    pub bleu: f64,
    pub rouge_lsum: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationCurve {
    pub mode: AttentionMode,
    pub gen_len: usize,
    pub points: Vec<ContinuationPoint>,
}

impl ContinuationCurve {
    pub fn at(&self, milestone: usize) -> Option<&ContinuationPoint> {
        self.points.iter().find(|p| p.milestone == milestone)
    }
}

/// Greedy continuation of `gen_len` tokens after the first `m` tokens of each
/// sequence, scored against the next `gen_len` tokens of the sequence.
pub fn continuation_eval(
    model: &ToyModel,
    corpus: &[Sequence],
    milestones: &MilestoneSpec,
    gen_len: usize,
    mode: AttentionMode,
) -> Result<ContinuationCurve> {
    if gen_len == 0 {
        return Err(Error::invalid("gen_len must be at least 1"));
    }
    let mut points = Vec::with_capacity(milestones.lengths().len());
    for &m in milestones.lengths() {
        let scores: Vec<Option<(f64, f64)>> = corpus
            .par_iter()
            .map(|seq| {
                if seq.len() < m + gen_len {
                    return Ok(None);
                }
                let mut cache = model.new_cache(mode)?;
                let out = model.generate(&seq[..m], gen_len, mode, Some(&mut cache))?;
                let reference = &seq[m..m + gen_len];
                Ok(Some((
                    bleu(&out, reference, BleuConfig::default())?,
                    rouge_lsum(&out, reference)?,
                )))
            })
            .collect::<Result<_>>()?;
        let done: Vec<(f64, f64)> = scores.into_iter().flatten().collect();
        if done.is_empty() {
            return Err(Error::NoQualifyingSequence { milestone: m });
        }
        let n = done.len() as f64;
        points.push(ContinuationPoint {
            milestone: m,
            bleu: done.iter().map(|s| s.0).collect::<CompensatedSum>().value() / n,
            rouge_lsum: done.iter().map(|s| s.1).collect::<CompensatedSum>().value() / n,
            evaluated: done.len(),
            skipped: corpus.len() - done.len(),
        });
    }
    Ok(ContinuationCurve {
        mode,
        gen_len,
        points,
    })
}

/// Attention cells of causal full attention over `n` tokens.
pub fn causal_cells(n: usize) -> u64 {
    let n = n as u64;
    n * (n + 1) / 2
}

/// Attention cells of generating `gen` tokens after `prompt_len` under the
/// Lambda mask: every processed token costs one mask row. The last generated
/// token is never fed back, so `prompt_len + gen - 1` tokens are processed.
pub fn lambda_generation_cells(prompt_len: usize, gen: usize, params: &MaskParams) -> Result<u64> {
    let mask = build_mask(prompt_len + gen.saturating_sub(1), params)?;
    Ok(mask.allowed_count() as u64)
}

/// Attention cells of truncated generation: the context grows by cached
/// decoding; once it would pass `train_len` it is cut to its last `window`
/// tokens and re-encoded.
pub fn truncation_cells(prompt_len: usize, gen: usize, window: usize, train_len: usize) -> u64 {
    let mut ctx = prompt_len.min(window);
    let mut cells = causal_cells(ctx);
    for _ in 1..gen {
        ctx += 1;
        if ctx > train_len {
            ctx = window;
            cells += causal_cells(ctx);
        } else {
            cells += ctx as u64;
        }
    }
    cells
}

/// Multiply-adds of attention per cell, over all layers: one query-key dot
/// and one weighted value sum per head.
fn flops_per_cell(model: &ToyModel) -> u64 {
    (4 * model.config.d_model * model.config.n_layers) as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationResult {
    pub window: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub bleu: f64,
    pub rouge_lsum: f64,
    pub attention_cells: u64,
    pub attention_flops: u64,
    pub evaluated: usize,
}

fn generate_truncated(
    model: &ToyModel,
    prompt: &[u32],
    gen: usize,
    window: usize,
) -> Result<Vec<u32>> {
    let train_len = model.config.train_len;
    let mode = AttentionMode::VanillaCausal;
    let start = prompt.len().saturating_sub(window);
    let mut context: Vec<u32> = prompt[start..].to_vec();
    let mut cache = model.new_cache(mode)?;
    let mut logits = model.prefill(&context, &mut cache)?;
    let mut out = Vec::with_capacity(gen);
    loop {
        let next = argmax(logits.view());
        out.push(next);
        if out.len() == gen {
            return Ok(out);
        }
        context.push(next);
        if context.len() > train_len {
            context.drain(..context.len() - window);
            cache = model.new_cache(mode)?;
            logits = model.prefill(&context, &mut cache)?;
        } else {
            logits = model.decode_step(next, &mut cache)?;
        }
    }
}

/// Generates `gen_len` tokens after the first `prompt_len` tokens of each
/// sequence by truncating the context to its last `window` tokens whenever it
/// outgrows `train_len`, and scores them against the true continuation.
pub fn truncation_baseline(
    model: &ToyModel,
    corpus: &[Sequence],
    window: usize,
    prompt_len: usize,
    gen_len: usize,
) -> Result<TruncationResult> {
    if window == 0 || window > model.config.train_len {
        return Err(Error::invalid(format!(
            "truncation window {window} must be in 1..={}",
            model.config.train_len
        )));
    }
    if gen_len == 0 || prompt_len == 0 {
        return Err(Error::invalid("prompt_len and gen_len must be at least 1"));
    }
    let scores: Vec<Option<(f64, f64)>> = corpus
        .par_iter()
        .map(|seq| {
            if seq.len() < prompt_len + gen_len {
                return Ok(None);
            }
            let out = generate_truncated(model, &seq[..prompt_len], gen_len, window)?;
            let reference = &seq[prompt_len..prompt_len + gen_len];
            Ok(Some((
                bleu(&out, reference, BleuConfig::default())?,
                rouge_lsum(&out, reference)?,
            )))
        })
        .collect::<Result<_>>()?;
    let done: Vec<(f64, f64)> = scores.into_iter().flatten().collect();
    if done.is_empty() {
        return Err(Error::NoQualifyingSequence {
            milestone: prompt_len,
        });
    }
    let n = done.len() as f64;
    let cells = truncation_cells(prompt_len, gen_len, window, model.config.train_len);
    Ok(TruncationResult {
        window,
        prompt_len,
        gen_len,
        bleu: done.iter().map(|s| s.0).sum::<f64>() / n,
        rouge_lsum: done.iter().map(|s| s.1).sum::<f64>() / n,
        attention_cells: cells,
        attention_flops: cells * flops_per_cell(model),
        evaluated: done.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub mode: AttentionMode,
    pub seq_len: usize,
    pub encode_seconds: f64,
    pub decode_seconds_per_token: f64,
    pub peak_cache_entries: usize,
}

pub const BENCH_DECODE_TOKENS: usize = 16;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median-of-`repeats` wall-clock timings. Vanilla encoding runs the dense
/// masked-matrix kernel, Lambda encoding the ranged kernel. Decoding is timed
/// over `BENCH_DECODE_TOKENS` steps after `seq_len` tokens are cached.
pub fn bench(
    model: &ToyModel,
    seq_len: usize,
    mode: AttentionMode,
    repeats: usize,
) -> Result<BenchResult> {
    if repeats < 3 {
        return Err(Error::invalid("bench needs at least 3 repeats"));
    }
    if seq_len == 0 {
        return Err(Error::invalid("bench seq_len must be positive"));
    }
    let vocab = model.config.vocab_size as u64;
    let tokens: Vec<u32> = (0..seq_len as u64)
        .map(|i| ((i * 2_654_435_761) % vocab) as u32)
        .collect();
    let kernel = match mode {
        AttentionMode::VanillaCausal => AttentionKernel::Dense,
        AttentionMode::Lambda => AttentionKernel::Ranged,
    };
    let mut encode = Vec::with_capacity(repeats);
    let mut decode = Vec::with_capacity(repeats);
    let mut peak = 0;
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(model.forward_with(&tokens, mode, kernel)?);
        encode.push(t.elapsed().as_secs_f64());

        let mut cache = model.new_cache(mode)?;
        model.prefill(&tokens, &mut cache)?;
        peak = peak.max(cache.max_entries());
        let t = Instant::now();
        for i in 0..BENCH_DECODE_TOKENS {
            std::hint::black_box(model.decode_step(tokens[i % seq_len], &mut cache)?);
            peak = peak.max(cache.max_entries());
        }
        decode.push(t.elapsed().as_secs_f64() / BENCH_DECODE_TOKENS as f64);
    }
    Ok(BenchResult {
        mode,
        seq_len,
        encode_seconds: median(encode).max(f64::MIN_POSITIVE),
        decode_seconds_per_token: median(decode).max(f64::MIN_POSITIVE),
        peak_cache_entries: peak,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub nll: Vec<NllCurve>,
    pub continuation: Vec<ContinuationCurve>,
    pub bench: Vec<BenchResult>,
}

impl EvalReport {
    pub fn nll_csv(&self) -> String {
        let mut s = String::from("mode,milestone,nll,perplexity,evaluated,skipped\n");
        for c in &self.nll {
            for p in &c.points {
                writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    c.mode, p.milestone, p.nll, p.perplexity, p.evaluated, p.skipped
                )
                .unwrap();
            }
        }
        s
    }

    pub fn continuation_csv(&self) -> String {
        let mut s = String::from("mode,milestone,gen_len,bleu,rouge_lsum,evaluated,skipped\n");
        for c in &self.continuation {
            for p in &c.points {
                writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    c.mode, p.milestone, c.gen_len, p.bleu, p.rouge_lsum, p.evaluated, p.skipped
                )
                .unwrap();
            }
        }
        s
    }

    pub fn bench_csv(&self) -> String {
        let mut s = String::from(
            "mode,seq_len,encode_seconds,decode_seconds_per_token,peak_cache_entries\n",
        );
        for b in &self.bench {
            writeln!(
                s,
                "{},{},{},{},{}",
                b.mode,
                b.seq_len,
                b.encode_seconds,
                b.decode_seconds_per_token,
                b.peak_cache_entries
            )
            .unwrap();
        }
        s
    }

    /// Writes the non-empty tables as `nll.csv`, `continuation.csv` and `bench.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tables = [
            ("nll.csv", !self.nll.is_empty(), self.nll_csv()),
            (
                "continuation.csv",
                !self.continuation.is_empty(),
                self.continuation_csv(),
            ),
            ("bench.csv", !self.bench.is_empty(), self.bench_csv()),
        ];
        for (name, present, body) in tables {
            if present {
                let path = dir.join(name);
                fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

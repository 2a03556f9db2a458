//! Python bindings: mask construction, the toy model, metrics and the
//! synthetic corpus. Token sequences are lists of ints, matrices are nested
//! lists of floats.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use lm_infinite::corpus::SyntheticLanguage;
use lm_infinite::diagnostics;
use lm_infinite::eval::{self, MilestoneSpec};
use lm_infinite::model::{load_checkpoint, save_checkpoint, TrainConfig};
use lm_infinite::{AttentionMode, BleuConfig, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Parse { .. } | Error::NoQualifyingSequence { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn mode(name: &str) -> PyResult<AttentionMode> {
    name.parse().map_err(py_err)
}

#[pyclass(
    name = "MaskParams",
    module = "lm_infinite_py",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyMaskParams(lm_infinite::MaskParams);

#[pymethods]
impl PyMaskParams {
    #[new]
    fn new(n_global: usize, n_local: usize, l_pretrain: usize) -> PyResult<Self> {
        lm_infinite::MaskParams::new(n_global, n_local, l_pretrain)
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn n_global(&self) -> usize {
        self.0.n_global
    }

    #[getter]
    fn n_local(&self) -> usize {
        self.0.n_local
    }

    #[getter]
    fn l_pretrain(&self) -> usize {
        self.0.l_pretrain
    }

    /// Distance used for key `j` from query `i`, capped at `l_pretrain`.
    fn effective_distance(&self, i: usize, j: usize) -> PyResult<usize> {
        lm_infinite::effective_distance(i, j, &self.0)
            .map(|d| d.value())
            .map_err(py_err)
    }

    /// Per query row: `((global_lo, global_hi), (local_lo, local_hi))`.
    fn ranges(&self, seq_len: usize) -> PyResult<Vec<((usize, usize), (usize, usize))>> {
        let mask = lm_infinite::build_mask(seq_len, &self.0).map_err(py_err)?;
        Ok(mask
            .rows()
            .map(|r| ((r.global.start, r.global.end), (r.local.start, r.local.end)))
            .collect())
    }

    fn dense(&self, seq_len: usize) -> PyResult<Vec<Vec<bool>>> {
        Ok(lm_infinite::build_mask(seq_len, &self.0)
            .map_err(py_err)?
            .to_dense())
    }

    fn density(&self, seq_len: usize) -> PyResult<f64> {
        Ok(lm_infinite::mask_density(
            &lm_infinite::build_mask(seq_len, &self.0).map_err(py_err)?,
        ))
    }

    fn __repr__(&self) -> String {
        format!(
            "MaskParams(n_global={}, n_local={}, l_pretrain={})",
            self.0.n_global, self.0.n_local, self.0.l_pretrain
        )
    }
}

#[pyclass(name = "ToyModel", module = "lm_infinite_py")]
struct PyToyModel(lm_infinite::ToyModel);

#[pymethods]
impl PyToyModel {
    /// Seeded model from `key=value` settings; missing keys take the defaults.
    #[new]
    #[pyo3(signature = (**settings))]
    fn new(settings: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let kv = settings
            .unwrap_or_default()
            .into_iter()
            .map(|(k, v)| Ok((k, v.str()?.to_string())))
            .collect::<PyResult<BTreeMap<_, _>>>()?;
        let config = lm_infinite::ToyModelConfig::from_kv(&kv).map_err(py_err)?;
        lm_infinite::ToyModel::init(config)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        load_checkpoint(path).map(Self).map_err(py_err)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        save_checkpoint(&self.0, path).map_err(py_err)
    }

    fn config(&self) -> BTreeMap<String, String> {
        self.0.config.to_kv().into_iter().collect()
    }

    #[getter]
    fn mask(&self) -> PyMaskParams {
        PyMaskParams(self.0.config.attention.mask_params)
    }

    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    /// `len(tokens) x vocab_size` next-token logits.
    #[pyo3(signature = (tokens, mode = "lambda"))]
    fn forward(&self, py: Python<'_>, tokens: Vec<u32>, mode: &str) -> PyResult<Vec<Vec<f64>>> {
        let m = self::mode(mode)?;
        let logits = py.detach(|| self.0.forward(&tokens, m)).map_err(py_err)?;
        Ok(logits.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// NLL of each token after the first.
    #[pyo3(signature = (tokens, mode = "lambda"))]
    fn token_nll(&self, py: Python<'_>, tokens: Vec<u32>, mode: &str) -> PyResult<Vec<f64>> {
        let m = self::mode(mode)?;
        py.detach(|| self.0.token_nll(&tokens, m)).map_err(py_err)
    }

    /// Greedy continuation of `n_new` tokens, decoded through KV caches when `cached`.
    #[pyo3(signature = (prompt, n_new, mode = "lambda", cached = true))]
    fn generate(
        &self,
        py: Python<'_>,
        prompt: Vec<u32>,
        n_new: usize,
        mode: &str,
        cached: bool,
    ) -> PyResult<Vec<u32>> {
        let m = self::mode(mode)?;
        py.detach(|| {
            let mut cache = if cached {
                Some(self.0.new_cache(m)?)
            } else {
                None
            };
            self.0.generate(&prompt, n_new, m, cache.as_mut())
        })
        .map_err(py_err)
    }

    /// Trains in place and returns `(step, loss)` pairs.
    #[pyo3(signature = (corpus, steps, lr = 3e-3, batch_size = 8, mode = "vanilla", seed = 0, log_every = 10))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        corpus: Vec<Vec<u32>>,
        steps: usize,
        lr: f64,
        batch_size: usize,
        mode: &str,
        seed: u64,
        log_every: usize,
    ) -> PyResult<Vec<(usize, f64)>> {
        let mut tc = TrainConfig::new(steps, lr, batch_size, self.0.config.train_len);
        tc.mode = self::mode(mode)?;
        tc.seed = seed;
        tc.log_every = log_every;
        let model = &mut self.0;
        let report = py.detach(|| model.train(&corpus, &tc)).map_err(py_err)?;
        Ok(report.losses)
    }

    /// Largest last-position logit difference between two equal-length inputs.
    #[pyo3(signature = (a, b, mode = "lambda"))]
    fn last_logit_difference(&self, a: Vec<u32>, b: Vec<u32>, mode: &str) -> PyResult<f64> {
        self.0
            .last_logit_difference(&a, &b, self::mode(mode)?)
            .map_err(py_err)
    }

    /// `(milestone, nll)` per milestone, e.g. `"1x,2x,8x"`.
    #[pyo3(signature = (corpus, milestones, mode = "lambda"))]
    fn nll_curve(
        &self,
        py: Python<'_>,
        corpus: Vec<Vec<u32>>,
        milestones: &str,
        mode: &str,
    ) -> PyResult<Vec<(usize, f64)>> {
        let spec = MilestoneSpec::parse(milestones, self.0.config.train_len).map_err(py_err)?;
        let m = self::mode(mode)?;
        let curve = py
            .detach(|| eval::nll_curve(&self.0, &corpus, &spec, m))
            .map_err(py_err)?;
        Ok(curve.points.iter().map(|p| (p.milestone, p.nll)).collect())
    }

    /// Entropy of the last query's attention at each length, averaged over layers and heads.
    #[pyo3(signature = (tokens, lengths, mode = "vanilla"))]
    fn entropy_curve(
        &self,
        tokens: Vec<u32>,
        lengths: Vec<usize>,
        mode: &str,
    ) -> PyResult<Vec<(usize, f64)>> {
        let curve = diagnostics::entropy_curve(&self.0, &tokens, self::mode(mode)?, &lengths)
            .map_err(py_err)?;
        Ok(lengths
            .iter()
            .map(|&n| {
                (
                    n,
                    diagnostics::mean_entropy_at(&curve, n).unwrap_or(f64::NAN),
                )
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        let c = &self.0.config;
        format!(
            "ToyModel(vocab_size={}, d_model={}, n_layers={}, n_heads={}, train_len={})",
            c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.train_len
        )
    }
}

#[pyfunction]
#[pyo3(signature = (candidate, reference, max_n = 4, smoothing = false))]
fn bleu(candidate: Vec<u32>, reference: Vec<u32>, max_n: usize, smoothing: bool) -> PyResult<f64> {
    lm_infinite::bleu(&candidate, &reference, BleuConfig { max_n, smoothing }).map_err(py_err)
}

#[pyfunction]
fn rouge_lsum(candidate: Vec<u32>, reference: Vec<u32>) -> PyResult<f64> {
    lm_infinite::rouge_lsum(&candidate, &reference).map_err(py_err)
}

#[pyfunction]
fn attention_entropy(weights: Vec<f64>) -> PyResult<f64> {
    diagnostics::attention_entropy(&weights).map_err(py_err)
}

/// `count` sequences of `length` tokens from the default synthetic language.
#[pyfunction]
#[pyo3(signature = (seed, count, length, vocab_size = 256))]
fn synthetic_corpus(
    seed: u64,
    count: usize,
    length: usize,
    vocab_size: u32,
) -> PyResult<Vec<Vec<u32>>> {
    let lang = SyntheticLanguage {
        vocab_size,
        ..SyntheticLanguage::default()
    };
    lang.generate(seed, count, length).map_err(py_err)
}

#[pymodule]
fn lm_infinite_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMaskParams>()?;
    m.add_class::<PyToyModel>()?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_lsum, m)?)?;
    m.add_function(wrap_pyfunction!(attention_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    Ok(())
}

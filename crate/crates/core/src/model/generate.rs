//! Greedy decoding, with or without per-layer KV caches.

use ndarray::{Array1, ArrayView1};

use super::forward::{gelu, layer_norm_vec};
use super::ToyModel;
use crate::attention::{attend_single, AttentionMode};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;

/// One KV cache per layer for a single decode stream.
#[derive(Debug, Clone)]
pub struct ModelCache {
    pub mode: AttentionMode,
    pub layers: Vec<KvCache>,
}

impl ModelCache {
    pub fn next_position(&self) -> usize {
        self.layers[0].next_position()
    }

    /// Largest entry count over the layers.
    pub fn max_entries(&self) -> usize {
        self.layers.iter().map(KvCache::len).max().unwrap_or(0)
    }
}

fn vec_mat(x: &[f64], w: &ndarray::Array2<f64>) -> Vec<f64> {
    ArrayView1::from(x).dot(w).to_vec()
}

pub(crate) fn argmax(row: ArrayView1<f64>) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

impl ToyModel {
    pub fn new_cache(&self, mode: AttentionMode) -> Result<ModelCache> {
        let config = self.attention_config(mode);
        Ok(ModelCache {
            mode,
            layers: (0..self.config.n_layers)
                .map(|_| config.new_cache())
                .collect::<Result<_>>()?,
        })
    }

    /// Runs one token through the model at position `cache.next_position()`,
    /// appending its keys and values, and returns the next-token logits.
    pub fn decode_step(&self, token: u32, cache: &mut ModelCache) -> Result<Array1<f64>> {
        self.check_tokens(&[token])?;
        let config = self.attention_config(cache.mode);
        let position = cache.next_position();
        let mut x = self.params.embed.row(token as usize).to_vec();
        for (l, (layer, kv)) in self
            .params
            .layers
            .iter()
            .zip(cache.layers.iter_mut())
            .enumerate()
        {
            let h1 = layer_norm_vec(&x, &layer.ln1_gain, &layer.ln1_bias);
            let q = vec_mat(&h1, &layer.wq);
            let k = vec_mat(&h1, &layer.wk);
            let v = vec_mat(&h1, &layer.wv);
            let out = attend_single(&q, &k, &v, kv, &config).map_err(|e| match e {
                Error::NonFinite { context, position } => Error::NonFinite {
                    context: format!("layer {l} {context}"),
                    position,
                },
                other => other,
            })?;
            for (xi, a) in x.iter_mut().zip(vec_mat(&out.values, &layer.wo)) {
                *xi += a;
            }
            let h2 = layer_norm_vec(&x, &layer.ln2_gain, &layer.ln2_bias);
            let mut pre = vec_mat(&h2, &layer.w1);
            for (p, b) in pre.iter_mut().zip(&layer.b1) {
                *p = gelu(*p + b);
            }
            for ((xi, f), b) in x.iter_mut().zip(vec_mat(&pre, &layer.w2)).zip(&layer.b2) {
                *xi += f + b;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("layer {l} output"),
                    position,
                });
            }
        }
        let hf = layer_norm_vec(&x, &self.params.lnf_gain, &self.params.lnf_bias);
        let logits = ArrayView1::from(&hf).dot(&self.params.head);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "logits".into(),
                position,
            });
        }
        Ok(logits)
    }

    /// Feeds `tokens` into the cache and returns the logits after the last one.
    /// An empty cache is filled from one full forward pass; otherwise tokens
    /// are decoded one at a time.
    pub fn prefill(&self, tokens: &[u32], cache: &mut ModelCache) -> Result<Array1<f64>> {
        self.check_tokens(tokens)?;
        if cache.next_position() != 0 {
            let mut last = None;
            for &t in tokens {
                last = Some(self.decode_step(t, cache)?);
            }
            return Ok(last.expect("non-empty tokens"));
        }
        let trace = self.trace(tokens, cache.mode, false)?;
        for (lt, kv) in trace.layers.iter().zip(cache.layers.iter_mut()) {
            for (k, v) in lt.k.rows().into_iter().zip(lt.v.rows()) {
                kv.push(
                    k.as_slice().expect("row-major"),
                    v.as_slice().expect("row-major"),
                )?;
            }
        }
        Ok(trace.logits.row(tokens.len() - 1).to_owned())
    }

    /// Greedy decoding of `n_new` tokens after `prompt`. With a cache the
    /// prompt is prefilled into it and decoding is incremental; without one
    /// every step reruns the full forward pass.
    pub fn generate(
        &self,
        prompt: &[u32],
        n_new: usize,
        mode: AttentionMode,
        cache: Option<&mut ModelCache>,
    ) -> Result<Vec<u32>> {
        if n_new == 0 {
            return Err(Error::invalid("n_new must be at least 1"));
        }
        self.check_tokens(prompt)?;
        let mut out = Vec::with_capacity(n_new);
        match cache {
            Some(cache) => {
                if cache.mode != mode {
                    return Err(Error::state(format!(
                        "cache built for {} decoding",
                        cache.mode
                    )));
                }
                let mut logits = self.prefill(prompt, cache)?;
                loop {
                    let next = argmax(logits.view());
                    out.push(next);
                    if out.len() == n_new {
                        break;
                    }
                    logits = self.decode_step(next, cache)?;
                }
            }
            None => {
                let mut seq = prompt.to_vec();
                for _ in 0..n_new {
                    let logits = self.forward(&seq, mode)?;
                    let next = argmax(logits.row(seq.len() - 1));
                    out.push(next);
                    seq.push(next);
                }
            }
        }
        Ok(out)
    }
}

impl ToyModel {
    /// Largest absolute difference between the last-position logits of two
    /// equal-length inputs. A paired-input probe of how far a token reaches.
    pub fn last_logit_difference(&self, a: &[u32], b: &[u32], mode: AttentionMode) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::invalid(format!(
                "paired inputs differ in length: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        let (la, lb) = (self.forward(a, mode)?, self.forward(b, mode)?);
        let n = a.len() - 1;
        Ok(la
            .row(n)
            .iter()
            .zip(lb.row(n))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }
}

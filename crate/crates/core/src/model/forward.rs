//! Full-sequence forward pass, activation traces and backpropagation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::{LayerParams, Params, ToyModel};
use crate::attention::{attend, attend_backward, attend_dense, AttentionMode, AttentionOutput};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Which attention implementation the forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKernel {
    /// Softmax over the allowed key ranges only.
    Ranged,
    /// Dense logit matrices with an additive mask.
    Dense,
}

pub(crate) struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

/// Activations of one block, kept for backpropagation and diagnostics.
pub struct LayerTrace {
    pub x_in: Array2<f64>,
    ln1: LayerNormCache,
    pub h1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn: AttentionOutput,
    pub x_mid: Array2<f64>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    /// Residual stream after the block.
    pub x_out: Array2<f64>,
}

pub struct ForwardTrace {
    pub tokens: Vec<u32>,
    pub mode: AttentionMode,
    pub layers: Vec<LayerTrace>,
    lnf: LayerNormCache,
    hf: Array2<f64>,
    pub logits: Array2<f64>,
}

pub(crate) fn layer_norm(
    x: ArrayView2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let s = *r;
        row.mapv_inplace(|v| (v - mean) * s);
    }
    let y = &xhat * gain + bias;
    (y, LayerNormCache { xhat, rstd })
}

pub(crate) fn layer_norm_vec(x: &[f64], gain: &Array1<f64>, bias: &Array1<f64>) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| (v - mean) * rstd * g + b)
        .collect()
}

/// Returns `dx`, accumulating gain/bias gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(cache.xhat.rows())
        .and(&cache.rstd)
        .for_each(|mut out, g, xh, &r| {
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| {
                    *o = r / d * (d * gi - sum_g - xi * sum_gx);
                });
        });
    dx
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn check_rows(x: &Array2<f64>, context: impl Fn() -> String) -> Result<()> {
    for (i, row) in x.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: context(),
                position: i,
            });
        }
    }
    Ok(())
}

fn with_layer(err: Error, layer: usize) -> Error {
    match err {
        Error::NonFinite { context, position } => Error::NonFinite {
            context: format!("layer {layer} {context}"),
            position,
        },
        other => other,
    }
}

/// Numerically stable `log(softmax(row))[target]`.
pub(crate) fn log_prob(row: ArrayView1<f64>, target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

impl ToyModel {
    fn embed(&self, tokens: &[u32]) -> Array2<f64> {
        let d = self.config.d_model;
        let mut x = Array2::zeros((tokens.len(), d));
        for (mut row, &t) in x.rows_mut().into_iter().zip(tokens) {
            row.assign(&self.params.embed.row(t as usize));
        }
        x
    }

    fn block(
        &self,
        l: usize,
        layer: &LayerParams,
        x: Array2<f64>,
        mode: AttentionMode,
        kernel: AttentionKernel,
        retain_weights: bool,
    ) -> Result<LayerTrace> {
        let config = self.attention_config(mode);
        let (h1, ln1) = layer_norm(x.view(), &layer.ln1_gain, &layer.ln1_bias);
        let q = h1.dot(&layer.wq);
        let k = h1.dot(&layer.wk);
        let v = h1.dot(&layer.wv);
        let attn = match kernel {
            AttentionKernel::Ranged => {
                attend(q.view(), k.view(), v.view(), &config, retain_weights)
            }
            AttentionKernel::Dense => {
                attend_dense(q.view(), k.view(), v.view(), &config).map(|values| AttentionOutput {
                    values,
                    weights: None,
                })
            }
        }
        .map_err(|e| with_layer(e, l))?;
        let x_mid = &x + &attn.values.dot(&layer.wo);
        let (h2, ln2) = layer_norm(x_mid.view(), &layer.ln2_gain, &layer.ln2_bias);
        let pre = h2.dot(&layer.w1) + &layer.b1;
        let act = pre.mapv(gelu);
        let x_out = &x_mid + &(act.dot(&layer.w2) + &layer.b2);
        check_rows(&x_out, || format!("layer {l} output"))?;
        Ok(LayerTrace {
            x_in: x,
            ln1,
            h1,
            q,
            k,
            v,
            attn,
            x_mid,
            ln2,
            h2,
            pre,
            act,
            x_out,
        })
    }

    /// Forward pass keeping every intermediate activation.
    pub fn trace(
        &self,
        tokens: &[u32],
        mode: AttentionMode,
        retain_weights: bool,
    ) -> Result<ForwardTrace> {
        self.trace_with(tokens, mode, AttentionKernel::Ranged, retain_weights)
    }

    pub fn trace_with(
        &self,
        tokens: &[u32],
        mode: AttentionMode,
        kernel: AttentionKernel,
        retain_weights: bool,
    ) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for (l, layer) in self.params.layers.iter().enumerate() {
            let trace = self.block(l, layer, x, mode, kernel, retain_weights)?;
            x = trace.x_out.clone();
            layers.push(trace);
        }
        let (hf, lnf) = layer_norm(x.view(), &self.params.lnf_gain, &self.params.lnf_bias);
        let logits = hf.dot(&self.params.head);
        check_rows(&logits, || "logits".to_string())?;
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            mode,
            layers,
            lnf,
            hf,
            logits,
        })
    }

    /// Per-position logits, `seq_len x vocab_size`.
    pub fn forward(&self, tokens: &[u32], mode: AttentionMode) -> Result<Array2<f64>> {
        self.forward_with(tokens, mode, AttentionKernel::Ranged)
    }

    pub fn forward_with(
        &self,
        tokens: &[u32],
        mode: AttentionMode,
        kernel: AttentionKernel,
    ) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        for (l, layer) in self.params.layers.iter().enumerate() {
            x = self.block(l, layer, x, mode, kernel, false)?.x_out;
        }
        let (hf, _) = layer_norm(x.view(), &self.params.lnf_gain, &self.params.lnf_bias);
        let logits = hf.dot(&self.params.head);
        check_rows(&logits, || "logits".to_string())?;
        Ok(logits)
    }

    /// Negative log-likelihood of each next token: entry `t` scores
    /// `tokens[t + 1]` given `tokens[..=t]`.
    pub fn token_nll(&self, tokens: &[u32], mode: AttentionMode) -> Result<Vec<f64>> {
        if tokens.len() < 2 {
            return Err(Error::invalid("need at least two tokens to score"));
        }
        let logits = self.forward(&tokens[..tokens.len() - 1], mode)?;
        Ok(logits
            .rows()
            .into_iter()
            .zip(&tokens[1..])
            .map(|(row, &t)| -log_prob(row, t as usize))
            .collect())
    }

    /// Mean next-token NLL over a whole sequence.
    pub fn mean_nll(&self, tokens: &[u32], mode: AttentionMode) -> Result<f64> {
        let nll = self.token_nll(tokens, mode)?;
        Ok(nll.iter().sum::<f64>() / nll.len() as f64)
    }

    /// Summed next-token NLL of `tokens` and its gradient.
    pub fn loss_and_grad(
        &self,
        tokens: &[u32],
        mode: AttentionMode,
    ) -> Result<(f64, usize, Params)> {
        if tokens.len() < 2 {
            return Err(Error::invalid("need at least two tokens to score"));
        }
        let inputs = &tokens[..tokens.len() - 1];
        let trace = self.trace(inputs, mode, true)?;
        let mut d_logits = trace.logits.clone();
        let mut loss = 0.0;
        for (mut row, &t) in d_logits.rows_mut().into_iter().zip(&tokens[1..]) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
            loss -= row[t as usize].ln();
            row[t as usize] -= 1.0;
        }
        let grads = self.backward(&trace, &d_logits)?;
        Ok((loss, inputs.len(), grads))
    }

    /// Gradient of `sum(logits * d_logits)` with respect to every parameter.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &Array2<f64>) -> Result<Params> {
        let p = &self.params;
        let mut g = p.zeros_like();
        g.head = trace.hf.t().dot(d_logits);
        let dhf = d_logits.dot(&p.head.t());
        let mut dx = layer_norm_backward(
            &dhf,
            &trace.lnf,
            &p.lnf_gain,
            &mut g.lnf_gain,
            &mut g.lnf_bias,
        );

        for (l, (layer, lt)) in p.layers.iter().zip(&trace.layers).enumerate().rev() {
            let gl = &mut g.layers[l];
            // MLP branch.
            gl.w2 += &lt.act.t().dot(&dx);
            gl.b2 += &dx.sum_axis(Axis(0));
            let mut d_pre = dx.dot(&layer.w2.t());
            Zip::from(&mut d_pre)
                .and(&lt.pre)
                .for_each(|d, &x| *d *= gelu_grad(x));
            gl.w1 += &lt.h2.t().dot(&d_pre);
            gl.b1 += &d_pre.sum_axis(Axis(0));
            let dh2 = d_pre.dot(&layer.w1.t());
            let dx_mid = dx
                + layer_norm_backward(
                    &dh2,
                    &lt.ln2,
                    &layer.ln2_gain,
                    &mut gl.ln2_gain,
                    &mut gl.ln2_bias,
                );

            // Attention branch.
            gl.wo += &lt.attn.values.t().dot(&dx_mid);
            let d_attn = dx_mid.dot(&layer.wo.t());
            let weights = lt
                .attn
                .weights
                .as_ref()
                .ok_or_else(|| Error::state("backward needs retained attention weights"))?;
            let config = self.attention_config(trace.mode);
            let ag = attend_backward(
                lt.q.view(),
                lt.k.view(),
                lt.v.view(),
                &config,
                weights,
                d_attn.view(),
            )?;
            gl.wq += &lt.h1.t().dot(&ag.d_query);
            gl.wk += &lt.h1.t().dot(&ag.d_key);
            gl.wv += &lt.h1.t().dot(&ag.d_value);
            let dh1 = ag.d_query.dot(&layer.wq.t())
                + ag.d_key.dot(&layer.wk.t())
                + ag.d_value.dot(&layer.wv.t());
            dx = dx_mid
                + layer_norm_backward(
                    &dh1,
                    &lt.ln1,
                    &layer.ln1_gain,
                    &mut gl.ln1_gain,
                    &mut gl.ln1_bias,
                );
        }

        for (row, &t) in dx.rows().into_iter().zip(&trace.tokens) {
            let mut dst = g.embed.row_mut(t as usize);
            dst += &row;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskParams;
    use crate::model::ToyModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> ToyModel {
        let cfg = ToyModelConfig::rope(13, 16, 2, 2, 8, seed)
            .unwrap()
            .with_mask(MaskParams::new(2, 6, 8).unwrap())
            .unwrap();
        let mut m = ToyModel::init(cfg).unwrap();
        m.perturb(&mut ChaCha8Rng::seed_from_u64(seed), 0.2);
        m
    }

    #[test]
    fn shapes_and_errors() {
        let m = model(1);
        let logits = m
            .forward(&[1, 2, 3, 4, 5, 6, 7], AttentionMode::Lambda)
            .unwrap();
        assert_eq!(logits.dim(), (7, 13));
        assert!(m.forward(&[], AttentionMode::Lambda).is_err());
        assert!(matches!(
            m.forward(&[1, 13], AttentionMode::Lambda),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn nan_parameters_are_reported_with_layer() {
        let mut m = model(2);
        m.params.layers[1].w1[[0, 0]] = f64::NAN;
        match m.forward(&[1, 2, 3], AttentionMode::Lambda) {
            Err(Error::NonFinite { context, position }) => {
                assert!(context.contains("layer 1"), "{context}");
                assert_eq!(position, 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dense_kernel_matches_ranged() {
        let m = model(3);
        let tokens: Vec<u32> = (0..20).map(|i| (i * 7 % 13) as u32).collect();
        for mode in [AttentionMode::Lambda, AttentionMode::VanillaCausal] {
            let a = m
                .forward_with(&tokens, mode, AttentionKernel::Ranged)
                .unwrap();
            let b = m
                .forward_with(&tokens, mode, AttentionKernel::Dense)
                .unwrap();
            let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
            assert!(diff < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tokens: Vec<u32> = (0..15).map(|_| rng.random_range(0..13)).collect();
        for mode in [AttentionMode::Lambda, AttentionMode::VanillaCausal] {
            let (_, _, grads) = m.loss_and_grad(&tokens, mode).unwrap();
            let analytic: Vec<(String, Vec<f64>)> = grads
                .tensors()
                .into_iter()
                .map(|t| (t.name, t.data.to_vec()))
                .collect();
            for (ti, (name, g)) in analytic.iter().enumerate() {
                for _ in 0..3 {
                    let idx = rng.random_range(0..g.len());
                    let h = 1e-5;
                    let eval = |delta: f64| {
                        let mut mm = m.clone();
                        mm.params.tensors_mut()[ti].data[idx] += delta;
                        mm.token_nll(&tokens, mode).unwrap().iter().sum::<f64>()
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let err = (numeric - g[idx]).abs() / (numeric.abs() + g[idx].abs()).max(1e-6);
                    assert!(
                        err < 1e-4,
                        "{name}[{idx}] {mode}: numeric {numeric} analytic {}",
                        g[idx]
                    );
                }
            }
        }
    }
}

//! Minimal training loop: random windows, mean next-token NLL, Adam.

use rand::Rng;
use rayon::prelude::*;

use super::{Params, ToyModel};
use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::rng::{substream, DATA_ORDER_STREAM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Tokens of context per training window; windows hold one extra target token.
    pub seq_len: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip, if any.
    pub grad_clip: Option<f64>,
    pub mode: AttentionMode,
    /// Seed of the data-order stream.
    pub seed: u64,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64, batch_size: usize, seq_len: usize) -> Self {
        Self {
            steps,
            lr,
            batch_size,
            seq_len,
            adam: AdamConfig::default(),
            grad_clip: Some(1.0),
            mode: AttentionMode::VanillaCausal,
            seed: 0,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// `(step, mean batch NLL)` at every logged step.
    pub losses: Vec<(usize, f64)>,
}

struct Adam {
    config: AdamConfig,
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    fn new(params: &Params, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((p, g), m), v) in p
                .data
                .iter_mut()
                .zip(g.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

impl ToyModel {
    /// Trains in place on random `seq_len + 1` windows drawn from `corpus`.
    ///
    /// Per-sequence gradients may be computed in parallel; they are summed in
    /// batch order so results do not depend on the thread count.
    pub fn train(&mut self, corpus: &[Vec<u32>], config: &TrainConfig) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        if config.steps == 0 {
            return Ok(report);
        }
        if config.batch_size == 0 || config.seq_len == 0 {
            return Err(Error::invalid("batch_size and seq_len must be positive"));
        }
        if config.seq_len > self.config.train_len {
            return Err(Error::invalid(format!(
                "training windows of {} exceed train_len {}",
                config.seq_len, self.config.train_len
            )));
        }
        let window = config.seq_len + 1;
        let usable: Vec<&Vec<u32>> = corpus.iter().filter(|s| s.len() >= window).collect();
        let total: usize = usable.iter().map(|s| s.len()).sum();
        let needed = config.steps * config.batch_size * config.seq_len;
        if usable.is_empty() || total < needed {
            return Err(Error::invalid(format!(
                "corpus has {total} tokens in sequences of at least {window}, training needs {needed}"
            )));
        }
        for s in &usable {
            self.check_tokens(s)?;
        }

        let mut rng = substream(config.seed, DATA_ORDER_STREAM);
        let mut adam = Adam::new(&self.params, config.adam);
        for step in 0..config.steps {
            let batch: Vec<&[u32]> = (0..config.batch_size)
                .map(|_| {
                    let seq = usable[rng.random_range(0..usable.len())];
                    let start = rng.random_range(0..=seq.len() - window);
                    &seq[start..start + window]
                })
                .collect();
            let results: Vec<Result<(f64, usize, Params)>> = batch
                .par_iter()
                .map(|w| self.loss_and_grad(w, config.mode))
                .collect();
            let mut grads = self.params.zeros_like();
            let mut loss = 0.0;
            let mut count = 0;
            for r in results {
                let (l, c, g) = r.map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        step,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
                loss += l;
                count += c;
                grads.add_scaled(&g, 1.0);
            }
            let mean = loss / count as f64;
            if !mean.is_finite() {
                return Err(Error::Diverged { step, loss: mean });
            }
            grads.scale(1.0 / count as f64);
            if let Some(clip) = config.grad_clip {
                let norm = grads.l2_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam.step(&mut self.params, &grads, config.lr);
            if !self.params.all_finite() {
                return Err(Error::Diverged { step, loss: mean });
            }
            if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
                report.losses.push((step, mean));
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{unigram_entropy, SyntheticLanguage};
    use crate::model::ToyModelConfig;

    fn tiny() -> ToyModel {
        ToyModel::init(ToyModelConfig::rope(8, 16, 1, 2, 8, 1).unwrap()).unwrap()
    }

    #[test]
    fn zero_steps_leaves_model_unchanged() {
        let mut m = tiny();
        let before = m.clone();
        let report = m.train(&[], &TrainConfig::new(0, 1e-2, 4, 8)).unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn learns_a_cycle() {
        let mut m = tiny();
        let corpus: Vec<Vec<u32>> = (0..40)
            .map(|s| (0..64).map(|i| ((i + s) % 5) as u32).collect())
            .collect();
        let before = m
            .mean_nll(&corpus[0], AttentionMode::VanillaCausal)
            .unwrap();
        let report = m.train(&corpus, &TrainConfig::new(60, 1e-2, 4, 8)).unwrap();
        let after = m
            .mean_nll(&corpus[0], AttentionMode::VanillaCausal)
            .unwrap();
        assert!(report.losses.iter().all(|(_, l)| l.is_finite()));
        assert!(after < before * 0.5, "{before} -> {after}");
    }

    #[test]
    fn synthetic_language_beats_unigram_baseline() {
        let lang = SyntheticLanguage {
            vocab_size: 16,
            motifs: 4,
            ..SyntheticLanguage::default()
        };
        let mut groups = lang.generate_groups(7, &[(8000, 17), (8, 64)]).unwrap();
        let held_out = groups.pop().unwrap();
        let train = groups.pop().unwrap();
        let mut m = ToyModel::init(ToyModelConfig::rope(16, 16, 1, 2, 16, 2).unwrap()).unwrap();
        let report = m
            .train(&train, &TrainConfig::new(2000, 3e-3, 4, 16))
            .unwrap();
        assert!(report.losses.iter().all(|(_, l)| l.is_finite()));
        let baseline = unigram_entropy(&held_out);
        let nll: f64 = held_out
            .iter()
            .map(|s| m.mean_nll(&s[..16], AttentionMode::VanillaCausal).unwrap())
            .sum::<f64>()
            / held_out.len() as f64;
        assert!(
            nll < baseline,
            "held-out NLL {nll} vs unigram entropy {baseline}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let corpus: Vec<Vec<u32>> = (0..10)
            .map(|s| (0..40).map(|i| ((i * s + 1) % 8) as u32).collect())
            .collect();
        let cfg = TrainConfig::new(5, 1e-2, 3, 8);
        let mut a = tiny();
        let mut b = tiny();
        assert_eq!(
            a.train(&corpus, &cfg).unwrap(),
            b.train(&corpus, &cfg).unwrap()
        );
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_corpus_rejected() {
        let mut m = tiny();
        let corpus = vec![vec![1u32; 20]];
        assert!(matches!(
            m.train(&corpus, &TrainConfig::new(10, 1e-2, 4, 8)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn divergence_reports_step() {
        let mut m = tiny();
        let corpus: Vec<Vec<u32>> = (0..10)
            .map(|_| (0..40).map(|i| (i % 8) as u32).collect())
            .collect();
        let mut cfg = TrainConfig::new(3, f64::INFINITY, 2, 8);
        cfg.grad_clip = None;
        assert!(matches!(
            m.train(&corpus, &cfg),
            Err(Error::Diverged { step: 0, .. })
        ));
    }
}

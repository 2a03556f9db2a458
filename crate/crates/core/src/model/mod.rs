//! Small decoder-only transformer used to exercise the attention variants.
//!
//! Architecture: token embedding, `n_layers` pre-norm residual blocks
//! (multi-head attention, then a 4x GeLU MLP), a final layer norm and an
//! untied LM head. There is no absolute position embedding; position enters
//! only through the attention encoding.

mod checkpoint;
mod forward;
mod generate;
mod params;
mod train;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{AttentionKernel, ForwardTrace, LayerTrace};
pub(crate) use generate::argmax;
pub use generate::ModelCache;
pub use params::{LayerParams, Params};
pub use train::{AdamConfig, TrainConfig, TrainReport};

use crate::attention::{AttentionConfig, AttentionMode};
use crate::error::{Error, Result};
use crate::mask::MaskParams;
use crate::pos_encoding::{AlibiParams, PositionEncoding, RopeParams, DEFAULT_ROPE_BASE};
use crate::rng::{substream, INIT_STREAM};

pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Training sequence length, the model's pretraining limit.
    pub train_len: usize,
    pub attention: AttentionConfig,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self::rope(256, 128, 4, 4, 128, 0).expect("default config is valid")
    }
}

impl ToyModelConfig {
    /// RoPE model with `n_local = l_pretrain = train_len` and the default pinned prefix.
    pub fn rope(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        train_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        let attention = AttentionConfig::rope(
            n_heads,
            d_model / n_heads,
            MaskParams::for_pretrain_length(train_len)?,
            AttentionMode::VanillaCausal,
        )?;
        let config = Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            train_len,
            attention,
            seed,
            init_std: DEFAULT_INIT_STD,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn with_mask(mut self, mask: MaskParams) -> Result<Self> {
        self.attention.mask_params = mask;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be at least 2"));
        }
        if self.n_layers == 0 {
            return Err(Error::invalid("n_layers must be at least 1"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.train_len < 8 {
            return Err(Error::invalid("train_len must be at least 8"));
        }
        if self.attention.n_heads != self.n_heads || self.attention.head_dim != self.head_dim() {
            return Err(Error::invalid(
                "attention config does not match model heads",
            ));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::invalid("init_std must be positive"));
        }
        self.attention.validate()
    }

    /// Flat `key=value` representation, one pair per line.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mask = &self.attention.mask_params;
        let mut out = vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("train_len".into(), self.train_len.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("init_std".into(), self.init_std.to_string()),
            ("n_global".into(), mask.n_global.to_string()),
            ("n_local".into(), mask.n_local.to_string()),
            ("l_pretrain".into(), mask.l_pretrain.to_string()),
            ("mode".into(), self.attention.mode.to_string()),
            (
                "encoding".into(),
                self.attention.encoding.name().to_string(),
            ),
        ];
        match &self.attention.encoding {
            PositionEncoding::Rope(r) => out.push(("rope_base".into(), r.base().to_string())),
            PositionEncoding::Alibi(a) => {
                let slopes: Vec<String> = a.slopes().iter().map(f64::to_string).collect();
                out.push(("alibi_slopes".into(), slopes.join(",")));
            }
        }
        out
    }

    /// Builds a config from `key=value` pairs; missing keys take the defaults.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(
            map: &BTreeMap<String, String>,
            key: &str,
            default: T,
        ) -> Result<T> {
            match map.get(key) {
                None => Ok(default),
                Some(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`"))),
            }
        }
        let vocab_size = get(map, "vocab_size", 256usize)?;
        let d_model = get(map, "d_model", 128usize)?;
        let n_layers = get(map, "n_layers", 4usize)?;
        let n_heads = get(map, "n_heads", 4usize)?;
        let train_len = get(map, "train_len", 128usize)?;
        let seed = get(map, "seed", 0u64)?;
        let init_std = get(map, "init_std", DEFAULT_INIT_STD)?;
        let n_global = get(map, "n_global", crate::mask::DEFAULT_N_GLOBAL)?;
        let n_local = get(map, "n_local", train_len)?;
        let l_pretrain = get(map, "l_pretrain", train_len)?;
        let mode: AttentionMode = map
            .get("mode")
            .map_or(Ok(AttentionMode::VanillaCausal), |m| m.trim().parse())?;
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        let head_dim = d_model / n_heads;
        let encoding = match map.get("encoding").map(|s| s.trim()).unwrap_or("rope") {
            "rope" => PositionEncoding::Rope(RopeParams::new(
                head_dim,
                get(map, "rope_base", DEFAULT_ROPE_BASE)?,
            )?),
            "alibi" => PositionEncoding::Alibi(match map.get("alibi_slopes") {
                Some(list) => AlibiParams::new(
                    list.split(',')
                        .map(|s| {
                            s.trim()
                                .parse::<f64>()
                                .map_err(|_| Error::invalid(format!("bad Alibi slope `{s}`")))
                        })
                        .collect::<Result<_>>()?,
                )?,
                None => AlibiParams::geometric(n_heads)?,
            }),
            other => return Err(Error::invalid(format!("unknown encoding `{other}`"))),
        };
        let attention = AttentionConfig::new(
            n_heads,
            head_dim,
            MaskParams::new(n_global, n_local, l_pretrain)?,
            encoding,
            mode,
        )?;
        let config = Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            train_len,
            attention,
            seed,
            init_std,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub params: Params,
}

impl ToyModel {
    /// Seeded initialization: weight matrices ~ N(0, init_std), layer-norm
    /// gains 1, biases 0, drawn from the `init` sub-stream of the config seed.
    pub fn init(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, INIT_STREAM);
        let normal =
            Normal::new(0.0, config.init_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut params = Params::zeros(&config);
        params.for_each_weight_mut(|w| {
            for x in w.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        });
        params.reset_norms();
        Ok(Self { config, params })
    }

    /// Zeroes the LM head so every position predicts the uniform distribution.
    pub fn zero_head(&mut self) {
        self.params.head.fill(0.0);
    }

    pub fn num_params(&self) -> usize {
        self.params.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn attention_config(&self, mode: AttentionMode) -> AttentionConfig {
        self.config.attention.with_mode(mode)
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if let Some((pos, &t)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= self.config.vocab_size)
        {
            return Err(Error::invalid(format!(
                "token id {t} at position {pos} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Random perturbation helper for tests: adds N(0, std) noise to every parameter.
    pub fn perturb<R: Rng>(&mut self, rng: &mut R, std: f64) {
        let normal = Normal::new(0.0, std).expect("finite std");
        for t in self.params.tensors_mut() {
            for x in t.data.iter_mut() {
                *x += normal.sample(rng);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyModelConfig {
        ToyModelConfig::rope(11, 16, 2, 2, 8, 3).unwrap()
    }

    #[test]
    fn same_seed_same_params() {
        let a = ToyModel::init(small()).unwrap();
        let b = ToyModel::init(small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 4;
        assert_ne!(a.params, ToyModel::init(other).unwrap().params);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let mut cfg = small();
        cfg.attention = AttentionConfig::alibi(
            2,
            8,
            MaskParams::new(2, 6, 8).unwrap(),
            AttentionMode::Lambda,
        )
        .unwrap();
        let map: BTreeMap<String, String> = cfg.to_kv().into_iter().collect();
        assert_eq!(ToyModelConfig::from_kv(&map).unwrap(), cfg);
        let default = ToyModelConfig::from_kv(&BTreeMap::new()).unwrap();
        assert_eq!(default, ToyModelConfig::default());
    }

    #[test]
    fn invalid_configs() {
        assert!(ToyModelConfig::rope(10, 15, 2, 2, 8, 0).is_err());
        assert!(ToyModelConfig::rope(10, 16, 2, 2, 4, 0).is_err());
        let mut cfg = small();
        cfg.n_layers = 0;
        assert!(ToyModel::init(cfg).is_err());
    }

    #[test]
    fn default_shape() {
        let cfg = ToyModelConfig::default();
        assert_eq!(
            (
                cfg.vocab_size,
                cfg.d_model,
                cfg.n_layers,
                cfg.n_heads,
                cfg.train_len
            ),
            (256, 128, 4, 4, 128)
        );
        assert_eq!(cfg.head_dim(), 32);
        assert_eq!(
            cfg.attention.mask_params,
            MaskParams::new(16, 128, 128).unwrap()
        );
    }
}

use ndarray::{Array1, Array2};

use super::ToyModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    /// `d_model x 4 d_model`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `4 d_model x d_model`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All model parameters. Also used as the gradient and optimizer-moment
/// container, since those share its shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `vocab x d_model`.
    pub embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    /// `d_model x vocab`.
    pub head: Array2<f64>,
}

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

macro_rules! layer_fields {
    ($mac:ident) => {
        $mac!(ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, b1, w2, b2)
    };
}

impl Params {
    pub fn zeros(config: &ToyModelConfig) -> Self {
        let (v, d) = (config.vocab_size, config.d_model);
        let layer = LayerParams {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w1: Array2::zeros((d, 4 * d)),
            b1: Array1::zeros(4 * d),
            w2: Array2::zeros((4 * d, d)),
            b2: Array1::zeros(d),
        };
        Self {
            embed: Array2::zeros((v, d)),
            layers: vec![layer; config.n_layers],
            lnf_gain: Array1::zeros(d),
            lnf_bias: Array1::zeros(d),
            head: Array2::zeros((d, v)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.fill(0.0);
        }
        out
    }

    pub(crate) fn reset_norms(&mut self) {
        for layer in &mut self.layers {
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
            layer.ln1_bias.fill(0.0);
            layer.ln2_bias.fill(0.0);
            layer.b1.fill(0.0);
            layer.b2.fill(0.0);
        }
        self.lnf_gain.fill(1.0);
        self.lnf_bias.fill(0.0);
    }

    /// Visits every weight matrix (not gains or biases) in a fixed order.
    pub(crate) fn for_each_weight_mut(&mut self, mut f: impl FnMut(&mut Array2<f64>)) {
        f(&mut self.embed);
        for layer in &mut self.layers {
            for w in [
                &mut layer.wq,
                &mut layer.wk,
                &mut layer.wv,
                &mut layer.wo,
                &mut layer.w1,
                &mut layer.w2,
            ] {
                f(w);
            }
        }
        f(&mut self.head);
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![TensorRef {
            name: "embed".into(),
            shape: self.embed.shape().to_vec(),
            data: self.embed.as_slice().expect("standard layout"),
        }];
        for (l, layer) in self.layers.iter().enumerate() {
            macro_rules! push {
                ($($field:ident),*) => {
                    $(out.push(TensorRef {
                        name: format!("layers.{l}.{}", stringify!($field)),
                        shape: layer.$field.shape().to_vec(),
                        data: layer.$field.as_slice().expect("standard layout"),
                    });)*
                };
            }
            layer_fields!(push);
        }
        for (name, t) in [("lnf_gain", &self.lnf_gain), ("lnf_bias", &self.lnf_bias)] {
            out.push(TensorRef {
                name: name.into(),
                shape: t.shape().to_vec(),
                data: t.as_slice().expect("standard layout"),
            });
        }
        out.push(TensorRef {
            name: "head".into(),
            shape: self.head.shape().to_vec(),
            data: self.head.as_slice().expect("standard layout"),
        });
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        out.push(TensorMut {
            name: "embed".into(),
            shape: self.embed.shape().to_vec(),
            data: self.embed.as_slice_mut().expect("standard layout"),
        });
        for (l, layer) in self.layers.iter_mut().enumerate() {
            macro_rules! push {
                ($($field:ident),*) => {
                    $(out.push(TensorMut {
                        name: format!("layers.{l}.{}", stringify!($field)),
                        shape: layer.$field.shape().to_vec(),
                        data: layer.$field.as_slice_mut().expect("standard layout"),
                    });)*
                };
            }
            layer_fields!(push);
        }
        out.push(TensorMut {
            name: "lnf_gain".into(),
            shape: self.lnf_gain.shape().to_vec(),
            data: self.lnf_gain.as_slice_mut().expect("standard layout"),
        });
        out.push(TensorMut {
            name: "lnf_bias".into(),
            shape: self.lnf_bias.shape().to_vec(),
            data: self.lnf_bias.as_slice_mut().expect("standard layout"),
        });
        out.push(TensorMut {
            name: "head".into(),
            shape: self.head.shape().to_vec(),
            data: self.head.as_slice_mut().expect("standard layout"),
        });
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

//! Small parameterized building blocks shared by every model in the crate.

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::rng::Sampler;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Sampler) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), rng.gaussian_tensor(&[d_in, d_out], std));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out])));
        Self { weight, bias, d_in, d_out }
    }

    /// Same as [`Linear::new`] but with all weights zero.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(vec![d_in, d_out]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out])));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Plain-slice forward used by cache-based inference paths.
    pub fn apply(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.d_out];
        if let Some(b) = self.bias {
            let bd = store.tensor(b).data();
            for r in 0..rows {
                out[r * self.d_out..(r + 1) * self.d_out].copy_from_slice(bd);
            }
        }
        super::tensor::gemm(rows, self.d_in, self.d_out, x, false, store.tensor(self.weight).data(), false, 1.0, &mut out);
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(vec![dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layernorm(x, gain, bias)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64], dim: usize) -> Vec<f64> {
        let gain = store.tensor(self.gain).data();
        let bias = store.tensor(self.bias).data();
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(dim).zip(out.chunks_mut(dim)) {
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + 1e-5).sqrt();
            for j in 0..dim {
                o[j] = (row[j] - mean) * rs * gain[j] + bias[j];
            }
        }
        out
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Sampler) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = self.fc1.apply(store, x, rows);
        h.iter_mut().for_each(|v| *v = gelu(*v));
        self.fc2.apply(store, &h, rows)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

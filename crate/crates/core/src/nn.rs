//! Small layer building blocks shared by the codecs, the combiner and the head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{quantize_f32, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Identity => x,
        }
    }
}

/// Registers freshly initialised parameters. Every value is rounded to the
/// `f32` lattice so that checkpoints store it exactly.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = shape.iter().product();
        let mut data: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        quantize_f32(&mut data);
        self.store.add(name, Tensor::from_vec(shape, data))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let mut t = Tensor::full(shape, v);
        quantize_f32(t.data_mut());
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.full(name, shape, 0.0)
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.normal(&format!("{name}.w"), &[din, dout], 1.0 / (din as f64).sqrt()),
            b: self.zeros(&format!("{name}.b"), &[dout]),
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm { g: self.full(&format!("{name}.g"), &[d], 1.0), b: self.zeros(&format!("{name}.b"), &[d]) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.g);
        let b = tape.param(self.b);
        tape.layer_norm(x, g, b)
    }
}

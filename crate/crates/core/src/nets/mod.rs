//! Predictor networks.
//!
//! Weights are drawn from `U(-sqrt(1/fan_in), sqrt(1/fan_in))`; biases
//! start at zero.

mod dense;
mod fnn;
mod lstm;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use dense::{Activation, Dense, Mlp};
pub use fnn::{FnnConfig, FnnPredictor};
pub use lstm::{LstmConfig, LstmPredictor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Fnn(FnnConfig),
    Lstm(LstmConfig),
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        match self {
            ModelConfig::Fnn(c) => c.input_dim,
            ModelConfig::Lstm(c) => c.input_dim,
        }
    }

    /// Timesteps per sample; 1 for the feed-forward net.
    pub fn window(&self) -> usize {
        match self {
            ModelConfig::Fnn(_) => 1,
            ModelConfig::Lstm(c) => c.window,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ModelConfig::Fnn(c) => c.param_count(),
            ModelConfig::Lstm(c) => c.param_count(),
        }
    }

    pub fn build<R: Rng>(&self, rng: &mut R) -> Result<Predictor> {
        Ok(match self {
            ModelConfig::Fnn(c) => Predictor::Fnn(FnnPredictor::new(c.clone(), rng)?),
            ModelConfig::Lstm(c) => Predictor::Lstm(LstmPredictor::new(c.clone(), rng)?),
        })
    }
}

/// Either predictor architecture behind one interface.
#[derive(Clone, Debug)]
pub enum Predictor {
    Fnn(FnnPredictor),
    Lstm(LstmPredictor),
}

impl Predictor {
    pub fn config(&self) -> ModelConfig {
        match self {
            Predictor::Fnn(m) => ModelConfig::Fnn(m.config().clone()),
            Predictor::Lstm(m) => ModelConfig::Lstm(m.config().clone()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Predictor::Fnn(m) => m.params(),
            Predictor::Lstm(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Predictor::Fnn(m) => m.params_mut(),
            Predictor::Lstm(m) => m.params_mut(),
        }
    }

    /// `x` is `(batch, d)` for the FNN and `(batch, W, d)` for the LSTM;
    /// the output is `(batch, 1)`.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, x: &Tensor) -> Result<Var<'t>> {
        match self {
            Predictor::Fnn(m) => m.forward(p, tape.constant(x.clone())),
            Predictor::Lstm(m) => m.forward(tape, p, x),
        }
    }

    /// Forward pass without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let mut frozen = self.params().clone();
        frozen.set_trainable(false);
        let p = frozen.bind(&tape);
        Ok(self.forward(&tape, &p, x)?.to_vec())
    }
}

pub(crate) fn check_dim(op: &'static str, got: &[usize], expected: &[usize]) -> Result<()> {
    if got != expected {
        return Err(Error::shape(op, got, expected));
    }
    Ok(())
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_dim, Activation, Mlp};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnnConfig {
    pub input_dim: usize,
    /// Widths of the ReLU hidden layers; a single linear unit follows.
    pub hidden: Vec<usize>,
}

impl FnnConfig {
    pub fn new(input_dim: usize) -> Self {
        FnnConfig {
            input_dim,
            hidden: vec![256, 256, 256],
        }
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim];
        s.extend(&self.hidden);
        s.push(1);
        s
    }

    pub fn param_count(&self) -> usize {
        Mlp::param_count(&self.sizes())
    }
}

#[derive(Clone, Debug)]
pub struct FnnPredictor {
    config: FnnConfig,
    store: ParamStore,
    mlp: Mlp,
}

impl FnnPredictor {
    pub fn new<R: Rng>(config: FnnConfig, rng: &mut R) -> Result<Self> {
        if config.input_dim == 0 {
            return Err(Error::config("FNN input dimension must be positive"));
        }
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "fnn", &config.sizes(), Activation::Relu, rng);
        Ok(FnnPredictor { config, store, mlp })
    }

    pub fn config(&self) -> &FnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layers(&self) -> &Mlp {
        &self.mlp
    }

    /// `(batch, d) -> (batch, 1)`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::shape(
                "fnn_forward",
                &shape,
                &[0, self.config.input_dim],
            ));
        }
        check_dim("fnn_forward", &shape[1..], &[self.config.input_dim])?;
        self.mlp.forward(p, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_matches_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = FnnConfig::new(4);
        let net = FnnPredictor::new(cfg.clone(), &mut rng).unwrap();
        assert_eq!(net.params().count(), cfg.param_count());
        assert_eq!(
            cfg.param_count(),
            4 * 256 + 256 + 2 * (256 * 256 + 256) + 256 + 1
        );
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = FnnPredictor::new(FnnConfig::new(3), &mut rng).unwrap();
        net.params_mut()
            .iter_mut()
            .for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let tape = Tape::new();
        let p = net.params().bind(&tape);
        let x =
            tape.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap());
        let y = net.forward(&p, x).unwrap();
        assert_eq!(y.shape(), vec![2, 1]);
        assert_eq!(y.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_path_is_affine() {
        // Only neuron 0 of every hidden layer is active:
        // h1 = relu(2 x0 - x1 + 0.5), h2 = relu(3 h1), h3 = relu(h2 + 1), y = -0.5 h3 + 2
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = FnnPredictor::new(FnnConfig::new(2), &mut rng).unwrap();
        let layers = net.layers().layers.clone();
        let store = net.params_mut();
        for l in &layers {
            store.get_mut(l.weight).data_mut().fill(0.0);
            store.get_mut(l.bias).data_mut().fill(0.0);
        }
        let w = |s: &mut ParamStore, l: &crate::nets::Dense, i: usize, j: usize, v: f64| {
            let cols = l.fan_out;
            s.get_mut(l.weight).data_mut()[i * cols + j] = v;
        };
        w(store, &layers[0], 0, 0, 2.0);
        w(store, &layers[0], 1, 0, -1.0);
        store.get_mut(layers[0].bias).data_mut()[0] = 0.5;
        w(store, &layers[1], 0, 0, 3.0);
        w(store, &layers[2], 0, 0, 1.0);
        store.get_mut(layers[2].bias).data_mut()[0] = 1.0;
        w(store, &layers[3], 0, 0, -0.5);
        store.get_mut(layers[3].bias).data_mut()[0] = 2.0;

        let x = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.25, 3.0]).unwrap();
        let out = crate::nets::Predictor::Fnn(net).predict(&x).unwrap();
        // row 0: h1 = 2.0, h2 = 6, h3 = 7, y = -1.5
        // row 1: h1 = relu(-2) = 0, h2 = 0, h3 = 1, y = 1.5
        assert_eq!(out, vec![-1.5, 1.5]);
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = FnnPredictor::new(FnnConfig::new(4), &mut rng).unwrap();
        let tape = Tape::new();
        let p = net.params().bind(&tape);
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(net.forward(&p, x), Err(Error::Shape { .. })));
    }
}

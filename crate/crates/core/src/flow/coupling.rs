use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Activation, Mlp};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bound on the log-scale outputs before exponentiation. Values inside
/// `LOG_SCALE_LINEAR` pass unchanged; beyond it they saturate smoothly
/// towards the bound with a tanh, so saturated units keep a gradient.
pub const LOG_SCALE_CLAMP: f64 = 5.0;
pub const LOG_SCALE_LINEAR: f64 = 4.0;

/// Two-step affine coupling on the halves `(u1, u2)` of a `k`-vector:
///
/// ```text
/// v1 = u1 * exp(s2(u2)) + t2(u2)
/// v2 = u2 * exp(s1(v1)) + t1(v1)
/// ```
///
/// With `swap` set, `u1` is the second half of the input instead of the
/// first; outputs go back to the positions their inputs came from.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    pub dim: usize,
    pub swap: bool,
    pub s1: Mlp,
    pub t1: Mlp,
    pub s2: Mlp,
    pub t2: Mlp,
}

impl CouplingLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        swap: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "coupling layers need an even dimension >= 2, got {dim}"
            )));
        }
        let h = dim / 2;
        let sizes = [h, hidden, h];
        // Output layers start at zero so every layer begins as the identity.
        let mut sub = |s: &str| {
            let net = Mlp::new(store, &format!("{name}.{s}"), &sizes, Activation::Tanh, rng);
            let last = net.layers.last().expect("two layers");
            store.get_mut(last.weight).data_mut().fill(0.0);
            net
        };
        Ok(CouplingLayer {
            dim,
            swap,
            s1: sub("s1"),
            t1: sub("t1"),
            s2: sub("s2"),
            t2: sub("t2"),
        })
    }

    fn halves<'t>(&self, u: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = self.dim / 2;
        let shape = u.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape("coupling", &shape, &[0, self.dim]));
        }
        let parts = u.split_cols(&[h, h])?;
        Ok(if self.swap {
            (parts[1], parts[0])
        } else {
            (parts[0], parts[1])
        })
    }

    fn join<'t>(&self, tape: &'t Tape, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        if self.swap {
            tape.concat_cols(&[b, a])
        } else {
            tape.concat_cols(&[a, b])
        }
    }

    fn log_scale<'t>(net: &Mlp, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (a, w) = (LOG_SCALE_LINEAR, LOG_SCALE_CLAMP - LOG_SCALE_LINEAR);
        let s = net.forward(p, x)?;
        let inner = s.clamp(-a, a);
        let excess = s.sub(inner)?.scale(1.0 / w).tanh().scale(w);
        inner.add(excess)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, u: Var<'t>) -> Result<Var<'t>> {
        let (u1, u2) = self.halves(u)?;
        let s2 = Self::log_scale(&self.s2, p, u2)?;
        let v1 = u1.mul(s2.exp())?.add(self.t2.forward(p, u2)?)?;
        let s1 = Self::log_scale(&self.s1, p, v1)?;
        let v2 = u2.mul(s1.exp())?.add(self.t1.forward(p, v1)?)?;
        self.join(tape, v1, v2)
    }

    pub fn inverse<'t>(&self, tape: &'t Tape, p: &Bound<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let (v1, v2) = self.halves(v)?;
        let s1 = Self::log_scale(&self.s1, p, v1)?;
        let u2 = v2.sub(self.t1.forward(p, v1)?)?.mul(s1.neg().exp())?;
        let s2 = Self::log_scale(&self.s2, p, u2)?;
        let u1 = v1.sub(self.t2.forward(p, u2)?)?.mul(s2.neg().exp())?;
        self.join(tape, u1, u2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            dim: 4,
            layers: 7,
            hidden: 256,
        }
    }
}

/// Coupling layers applied in order; every other layer swaps the halves so
/// that all coordinates get transformed.
#[derive(Clone, Debug)]
pub struct CouplingChain {
    config: ChainConfig,
    store: ParamStore,
    layers: Vec<CouplingLayer>,
}

impl CouplingChain {
    pub fn new<R: Rng>(config: ChainConfig, rng: &mut R) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 {
            return Err(Error::config(
                "a coupling chain needs at least one layer and hidden unit",
            ));
        }
        let mut store = ParamStore::new();
        let layers = (0..config.layers)
            .map(|i| {
                CouplingLayer::new(
                    &mut store,
                    &format!("coupling.{i}"),
                    config.dim,
                    config.hidden,
                    i % 2 == 1,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(CouplingChain {
            config,
            store,
            layers,
        })
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, u: Var<'t>) -> Result<Var<'t>> {
        self.layers.iter().try_fold(u, |h, l| l.forward(tape, p, h))
    }

    pub fn inverse<'t>(&self, tape: &'t Tape, p: &Bound<'t>, v: Var<'t>) -> Result<Var<'t>> {
        self.layers
            .iter()
            .rev()
            .try_fold(v, |h, l| l.inverse(tape, p, h))
    }

    /// Forward map of a `(batch, k)` tensor without gradient tracking.
    pub fn forward_values(&self, u: &Tensor) -> Result<Tensor> {
        self.frozen(u, |tape, p, x| self.forward(tape, p, x))
    }

    pub fn inverse_values(&self, v: &Tensor) -> Result<Tensor> {
        self.frozen(v, |tape, p, x| self.inverse(tape, p, x))
    }

    fn frozen<F>(&self, x: &Tensor, f: F) -> Result<Tensor>
    where
        F: for<'t> Fn(&'t Tape, &Bound<'t>, Var<'t>) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        let mut store = self.store.clone();
        store.set_trainable(false);
        let p = store.bind(&tape);
        let out = f(&tape, &p, tape.constant(x.clone()))?;
        Tensor::new(out.shape(), out.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Sets a subnet to the constant map `c` (zero weights, bias `c`).
    fn constant(store: &mut ParamStore, net: &Mlp, c: f64) {
        for l in &net.layers {
            store.get_mut(l.weight).data_mut().fill(0.0);
            store.get_mut(l.bias).data_mut().fill(0.0);
        }
        let last = net.layers.last().unwrap();
        store.get_mut(last.bias).data_mut().fill(c);
    }

    fn hand_layer() -> (ParamStore, CouplingLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = CouplingLayer::new(&mut store, "l", 2, 8, false, &mut rng).unwrap();
        constant(&mut store, &layer.s2, 2f64.ln());
        constant(&mut store, &layer.t2, 1.0);
        constant(&mut store, &layer.s1, 0.0);
        constant(&mut store, &layer.t1, 2.0);
        (store, layer)
    }

    #[test]
    fn constant_subnets_by_hand() {
        let (store, layer) = hand_layer();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = layer
            .forward(
                &tape,
                &p,
                tape.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap()),
            )
            .unwrap();
        let v = v.to_vec();
        assert!(
            (v[0] - 3.0).abs() < 1e-12 && (v[1] - 5.0).abs() < 1e-12,
            "{v:?}"
        );
        let u = layer
            .inverse(
                &tape,
                &p,
                tape.constant(Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap()),
            )
            .unwrap()
            .to_vec();
        assert!(
            (u[0] - 1.0).abs() < 1e-12 && (u[1] - 3.0).abs() < 1e-12,
            "{u:?}"
        );
    }

    #[test]
    fn zero_subnets_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut chain = CouplingChain::new(
            ChainConfig {
                dim: 4,
                layers: 3,
                hidden: 5,
            },
            &mut rng,
        )
        .unwrap();
        chain
            .params_mut()
            .iter_mut()
            .for_each(|p| p.value.data_mut().fill(0.0));
        let x = Tensor::new(vec![2, 4], vec![1.0, -2.0, 3.0, 0.5, 7.0, 8.0, -9.0, 1.0]).unwrap();
        assert_eq!(chain.forward_values(&x).unwrap(), x);
        assert_eq!(chain.inverse_values(&x).unwrap(), x);
    }

    #[test]
    fn odd_dimension_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ChainConfig {
            dim: 3,
            layers: 2,
            hidden: 4,
        };
        assert!(matches!(
            CouplingChain::new(cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn swapped_layer_transforms_second_half_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = CouplingLayer::new(&mut store, "l", 2, 4, true, &mut rng).unwrap();
        constant(&mut store, &layer.s2, 2f64.ln());
        constant(&mut store, &layer.t2, 1.0);
        constant(&mut store, &layer.s1, 0.0);
        constant(&mut store, &layer.t1, 2.0);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = layer
            .forward(
                &tape,
                &p,
                tape.constant(Tensor::new(vec![1, 2], vec![3.0, 1.0]).unwrap()),
            )
            .unwrap();
        assert_eq!(v.to_vec(), vec![5.0, 3.0]);
    }

    #[test]
    fn chain_inverse_is_reversed_layer_inverses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chain = CouplingChain::new(
            ChainConfig {
                dim: 4,
                layers: 4,
                hidden: 6,
            },
            &mut rng,
        )
        .unwrap();
        let v = Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let tape = Tape::new();
        let p = chain.params().bind(&tape);
        let mut h = tape.constant(v.clone());
        for l in chain.layers().iter().rev() {
            h = l.inverse(&tape, &p, h).unwrap();
        }
        assert_eq!(h.to_vec(), chain.inverse_values(&v).unwrap().data());
    }
}

#[cfg(test)]
mod grad_tests {
    use super::*;
    use crate::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chain_parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut chain = CouplingChain::new(
            ChainConfig {
                dim: 4,
                layers: 3,
                hidden: 5,
            },
            &mut rng,
        )
        .unwrap();
        // Move off the identity initialisation.
        for p in chain.params_mut().iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.3 * rand::Rng::gen_range(&mut rng, -1.0..1.0);
            }
        }
        let x = Tensor::new(
            vec![3, 4],
            (0..12).map(|i| (i as f64 * 0.7).sin()).collect(),
        )
        .unwrap();
        let t = Tensor::new(
            vec![3, 4],
            (0..12).map(|i| (i as f64 * 1.3).cos()).collect(),
        )
        .unwrap();
        for inverse in [false, true] {
            let err = check_params(chain.params(), 50, &mut rng, |tape, p| {
                let xv = tape.constant(x.clone());
                let y = if inverse {
                    chain.inverse(tape, p, xv)?
                } else {
                    chain.forward(tape, p, xv)?
                };
                Ok(y.sub(tape.constant(t.clone()))?.square().mean())
            })
            .unwrap();
            assert!(err < 1e-5, "inverse={inverse}: {err}");
        }
    }
}

//! Stacked bidirectional LSTM with a fully connected head.
//!
//! Gates use the logistic sigmoid, the cell candidate uses `tanh`. Gate
//! blocks inside the fused weight matrices are ordered input, forget,
//! candidate, output. Layer `l > 0` consumes `[h_fwd, h_bwd]` of layer
//! `l - 1` at every timestep; the head consumes the last forward state
//! concatenated with the last backward state (i.e. the one at `t = 0`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Dense, Mlp};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub window: usize,
    pub hidden: usize,
    pub layers: usize,
    /// ReLU widths between the recurrent stack and the output unit.
    pub head: Vec<usize>,
}

impl LstmConfig {
    pub fn new(input_dim: usize) -> Self {
        LstmConfig {
            input_dim,
            window: 8,
            hidden: 256,
            layers: 3,
            head: vec![1024, 128],
        }
    }

    fn head_sizes(&self) -> Vec<usize> {
        let mut s = vec![2 * self.hidden];
        s.extend(&self.head);
        s.push(1);
        s
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let cell = |input: usize| input * 4 * h + h * 4 * h + 4 * h;
        let mut total = 0;
        for l in 0..self.layers {
            let input = if l == 0 { self.input_dim } else { 2 * h };
            total += 2 * cell(input);
        }
        total + Mlp::param_count(&self.head_sizes())
    }
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bi = (1.0 / input as f64).sqrt();
        let bh = (1.0 / hidden as f64).sqrt();
        LstmCell {
            w_input: store.add_uniform(format!("{name}.w_input"), &[input, 4 * hidden], bi, rng),
            w_hidden: store.add_uniform(format!("{name}.w_hidden"), &[hidden, 4 * hidden], bh, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }

    /// One step; returns `(h, c)`.
    pub fn step<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let z = x
            .matmul(p[self.w_input])?
            .add(h.matmul(p[self.w_hidden])?)?
            .add(p[self.bias])?;
        let n = self.hidden;
        let gates = z.split_cols(&[n, n, n, n])?;
        let i = gates[0].sigmoid();
        let f = gates[1].sigmoid();
        let g = gates[2].tanh();
        let o = gates[3].sigmoid();
        let c = f.mul(c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh())?;
        Ok((h, c))
    }

    fn run<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        xs: &[Var<'t>],
        batch: usize,
        reverse: bool,
    ) -> Result<Vec<Var<'t>>> {
        let mut h = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        let mut c = h;
        let mut out = vec![h; xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            (h, c) = self.step(p, xs[t], h, c)?;
            out[t] = h;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct LstmPredictor {
    config: LstmConfig,
    store: ParamStore,
    /// `(forward, backward)` cell per layer.
    cells: Vec<(LstmCell, LstmCell)>,
    head: Mlp,
}

impl LstmPredictor {
    pub fn new<R: Rng>(config: LstmConfig, rng: &mut R) -> Result<Self> {
        if config.window == 0 {
            return Err(Error::config("LSTM window must be at least 1"));
        }
        if config.layers == 0 || config.hidden == 0 || config.input_dim == 0 {
            return Err(Error::config(
                "LSTM needs positive input, hidden and layer sizes",
            ));
        }
        let mut store = ParamStore::new();
        let mut cells = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let input = if l == 0 {
                config.input_dim
            } else {
                2 * config.hidden
            };
            let f = LstmCell::new(
                &mut store,
                &format!("lstm.{l}.fwd"),
                input,
                config.hidden,
                rng,
            );
            let b = LstmCell::new(
                &mut store,
                &format!("lstm.{l}.bwd"),
                input,
                config.hidden,
                rng,
            );
            cells.push((f, b));
        }
        let head = Mlp::new(
            &mut store,
            "head",
            &config.head_sizes(),
            Activation::Relu,
            rng,
        );
        Ok(LstmPredictor {
            config,
            store,
            cells,
            head,
        })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn cells(&self) -> &[(LstmCell, LstmCell)] {
        &self.cells
    }

    pub fn head(&self) -> &[Dense] {
        &self.head.layers
    }

    /// `(batch, W, d) -> (batch, 1)`.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, x: &Tensor) -> Result<Var<'t>> {
        let shape = x.shape();
        let expected = [
            shape.first().copied().unwrap_or(0),
            self.config.window,
            self.config.input_dim,
        ];
        if shape.len() != 3 || shape[1] == 0 || shape[1..] != expected[1..] {
            if shape.len() == 3 && shape[1] == 0 {
                return Err(Error::config("LSTM input window is empty"));
            }
            return Err(Error::shape("lstm_forward", shape, &expected));
        }
        let (batch, w, d) = (shape[0], shape[1], shape[2]);
        let mut xs = Vec::with_capacity(w);
        for t in 0..w {
            let mut step = Vec::with_capacity(batch * d);
            for b in 0..batch {
                let off = (b * w + t) * d;
                step.extend_from_slice(&x.data()[off..off + d]);
            }
            xs.push(tape.constant(Tensor::new(vec![batch, d], step)?));
        }
        let mut last = (xs[w - 1], xs[0]);
        for (fwd, bwd) in &self.cells {
            let hf = fwd.run(tape, p, &xs, batch, false)?;
            let hb = bwd.run(tape, p, &xs, batch, true)?;
            last = (hf[w - 1], hb[0]);
            xs = hf
                .iter()
                .zip(&hb)
                .map(|(a, b)| tape.concat_cols(&[*a, *b]))
                .collect::<Result<_>>()?;
        }
        let features = tape.concat_cols(&[last.0, last.1])?;
        self.head.forward(p, features)
    }
}

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ChainConfig, CouplingChain};
use crate::error::{Error, Result};
use crate::nets::{Activation, Mlp};
use crate::norm::Standardizer;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Bound, ParamRecord, ParamStore};
use crate::sim::MechanisticModel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHAIN_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainTrainConfig {
    pub chain: ChainConfig,
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Fraction of the supplied states held out for evaluation.
    pub holdout: f64,
    /// Extra training states drawn uniformly from the simulator's physical
    /// bounds, so the surrogate covers regimes absent from the supplied
    /// states. They never enter the held-out set.
    pub prior_samples: usize,
    pub seed: u64,
}

impl Default for ChainTrainConfig {
    fn default() -> Self {
        ChainTrainConfig {
            chain: ChainConfig::default(),
            epochs: 50,
            batch: 8,
            // lr0 = 1e-2 makes the 7 x 256 chain diverge within the first
            // epoch; the decay schedule is kept.
            adam: AdamConfig {
                lr0: 1e-3,
                ..AdamConfig::default()
            },
            holdout: 0.2,
            prior_samples: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TrainStatus {
    Completed,
    /// Training hit a non-finite loss; parameters are those of the last
    /// epoch that finished with finite values.
    Aborted {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    /// Pooled RMSE of the forward map on held-out observations; absent
    /// without a holdout.
    pub forward_rmse: Option<f64>,
    /// Per-coordinate RMSE of the inverse map on held-out states.
    pub inverse_rmse: Option<Vec<f64>>,
    pub epoch_losses: Vec<f64>,
    pub status: TrainStatus,
}

impl ChainReport {
    /// Held-out RMSE of the recovered temperature.
    pub fn temperature_rmse(&self) -> f64 {
        self.inverse_rmse
            .as_ref()
            .and_then(|v| v.first().copied())
            .unwrap_or(f64::NAN)
    }
}

/// A fitted chain together with the affine maps between physical units and
/// the standardised space it was trained in.
#[derive(Clone, Debug)]
pub struct TrainedChain {
    pub simulator: String,
    pub chain: CouplingChain,
    pub y_norm: Standardizer,
    pub x_norm: Standardizer,
    pub train_config: ChainTrainConfig,
    pub report: ChainReport,
}

/// On-disk form of a [`TrainedChain`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainCheckpoint {
    pub schema_version: u32,
    pub kind: String,
    pub simulator: String,
    pub train_config: ChainTrainConfig,
    pub y_norm: Standardizer,
    pub x_norm: Standardizer,
    pub report: ChainReport,
    pub params: Vec<ParamRecord>,
}

impl TrainedChain {
    pub fn dim(&self) -> usize {
        self.chain.dim()
    }

    /// Simulator surrogate: physical states to observations.
    pub fn forward(&self, ys: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let u = self.pack(ys, &self.y_norm)?;
        let v = self.chain.forward_values(&u)?;
        Ok(unpack(&v, &self.x_norm))
    }

    /// Observations to physical states.
    pub fn inverse(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let v = self.pack(xs, &self.x_norm)?;
        let u = self.chain.inverse_values(&v)?;
        Ok(unpack(&u, &self.y_norm))
    }

    /// First coordinate of the inverse: the simulated temperature label.
    pub fn simulated_labels(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.inverse(xs)?.into_iter().map(|y| y[0]).collect())
    }

    fn pack(&self, rows: &[Vec<f64>], norm: &Standardizer) -> Result<Tensor> {
        let k = self.dim();
        let mut data = Vec::with_capacity(rows.len() * k);
        for r in rows {
            if r.len() != k {
                return Err(Error::shape("chain_input", &[r.len()], &[k]));
            }
            data.extend(norm.apply(r));
        }
        Tensor::new(vec![rows.len(), k], data)
    }

    pub fn to_checkpoint(&self) -> ChainCheckpoint {
        ChainCheckpoint {
            schema_version: CHAIN_SCHEMA_VERSION,
            kind: "coupling_chain".into(),
            simulator: self.simulator.clone(),
            train_config: self.train_config.clone(),
            y_norm: self.y_norm.clone(),
            x_norm: self.x_norm.clone(),
            report: self.report.clone(),
            params: self.chain.params().to_records(),
        }
    }

    pub fn from_checkpoint(ck: ChainCheckpoint) -> Result<Self> {
        if ck.schema_version != CHAIN_SCHEMA_VERSION || ck.kind != "coupling_chain" {
            return Err(Error::Checkpoint(format!(
                "expected a coupling_chain checkpoint v{CHAIN_SCHEMA_VERSION}, found {} v{}",
                ck.kind, ck.schema_version
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut chain = CouplingChain::new(ck.train_config.chain.clone(), &mut rng)?;
        chain.params_mut().load_records(&ck.params)?;
        chain.params_mut().set_trainable(false);
        Ok(TrainedChain {
            simulator: ck.simulator,
            chain,
            y_norm: ck.y_norm,
            x_norm: ck.x_norm,
            train_config: ck.train_config,
            report: ck.report,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint(serde_json::from_slice(&bytes)?)
    }
}

fn unpack(t: &Tensor, norm: &Standardizer) -> Vec<Vec<f64>> {
    let k = t.shape()[1];
    t.data().chunks(k).map(|r| norm.invert(r)).collect()
}

/// Training and held-out pairs shared by the surrogate and the swap study.
struct Pairs {
    ys: Vec<Vec<f64>>,
    xs: Vec<Vec<f64>>,
    train: Vec<usize>,
    holdout: Vec<usize>,
}

fn prepare_pairs(
    sim: &dyn MechanisticModel,
    states: &[Vec<f64>],
    cfg: &ChainTrainConfig,
) -> Result<Pairs> {
    let k = sim.dim();
    if cfg.chain.dim != k {
        return Err(Error::config(format!(
            "chain dimension {} does not match simulator `{}` dimension {k}",
            cfg.chain.dim,
            sim.name()
        )));
    }
    if let Some(bad) = states.iter().find(|s| s.len() != k) {
        return Err(Error::config(format!(
            "state vectors have length {}, simulator `{}` needs {k}",
            bad.len(),
            sim.name()
        )));
    }
    if !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::config("holdout fraction must lie in [0, 1)"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c4a1);
    let mut ys: Vec<Vec<f64>> = states.to_vec();
    let mut order: Vec<usize> = (0..ys.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = (cfg.holdout * ys.len() as f64).round() as usize;
    let holdout = order[..n_hold].to_vec();
    let mut train = order[n_hold..].to_vec();
    let bounds = sim.state_bounds();
    for _ in 0..cfg.prior_samples {
        train.push(ys.len());
        ys.push(
            bounds
                .iter()
                .map(|&(lo, hi)| rng.gen_range(lo..=hi))
                .collect(),
        );
    }
    if train.is_empty() {
        return Err(Error::config("no training pairs for the coupling chain"));
    }
    let xs = ys
        .iter()
        .map(|y| sim.simulate(y))
        .collect::<Result<Vec<_>>>()?;
    Ok(Pairs {
        ys,
        xs,
        train,
        holdout,
    })
}

fn rows_tensor(rows: &[Vec<f64>], idx: &[usize], norm: &Standardizer) -> Tensor {
    let k = norm.dim();
    let mut data = Vec::with_capacity(idx.len() * k);
    for &i in idx {
        data.extend(norm.apply(&rows[i]));
    }
    Tensor::new(vec![idx.len(), k], data).expect("rows share one width")
}

fn rmse_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    Ok(pred.sub(target)?.square().mean().add_scalar(1e-12).sqrt())
}

/// Mini-batch Adam over `n` examples. `loss` receives the batch indices.
/// On a non-finite loss the parameters roll back to the last finished epoch.
fn fit<F>(
    store: &mut ParamStore,
    n: usize,
    cfg: &ChainTrainConfig,
    rng: &mut ChaCha8Rng,
    loss: F,
) -> Result<(Vec<f64>, TrainStatus)>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>, &[usize]) -> Result<Var<'t>>,
{
    store.set_trainable(true);
    let mut adam = AdamState::new(cfg.adam, store);
    let mut snapshot = store.clone();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (step, idx) in order.chunks(cfg.batch).enumerate() {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let l = loss(&tape, &p, idx)?;
            let value = l.item();
            if !value.is_finite() {
                *store = snapshot;
                store.set_trainable(false);
                let detail = format!("chain training loss is {value}");
                return Ok((
                    losses,
                    TrainStatus::Aborted {
                        epoch,
                        step,
                        detail,
                    },
                ));
            }
            let grads = tape.backward(l)?;
            store.accumulate(&p, &grads)?;
            adam.step(store)?;
            total += value;
            batches += 1;
        }
        losses.push(total / batches.max(1) as f64);
        snapshot = store.clone();
    }
    store.set_trainable(false);
    Ok((losses, TrainStatus::Completed))
}

fn fit_chain(
    sim_name: &str,
    pairs: &Pairs,
    cfg: &ChainTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainedChain> {
    let train_y: Vec<&Vec<f64>> = pairs.train.iter().map(|&i| &pairs.ys[i]).collect();
    let train_x: Vec<&Vec<f64>> = pairs.train.iter().map(|&i| &pairs.xs[i]).collect();
    let y_norm = Standardizer::fit(&train_y)?;
    let x_norm = Standardizer::fit(&train_x)?;
    let u_all = rows_tensor(&pairs.ys, &pairs.train, &y_norm);
    let v_all = rows_tensor(&pairs.xs, &pairs.train, &x_norm);
    let k = cfg.chain.dim;

    let mut chain = CouplingChain::new(cfg.chain.clone(), rng)?;
    let model = chain.clone();
    let mut store = chain.params().clone();
    let (epoch_losses, status) = fit(&mut store, pairs.train.len(), cfg, rng, |tape, p, idx| {
        let u = tape.constant(gather(&u_all, idx, k));
        let v = tape.constant(gather(&v_all, idx, k));
        rmse_loss(model.forward(tape, p, u)?, v)
    })?;
    *chain.params_mut() = store;

    let mut trained = TrainedChain {
        simulator: sim_name.to_string(),
        chain,
        y_norm,
        x_norm,
        train_config: cfg.clone(),
        report: ChainReport {
            train_pairs: pairs.train.len(),
            holdout_pairs: pairs.holdout.len(),
            forward_rmse: None,
            inverse_rmse: None,
            epoch_losses,
            status,
        },
    };
    if !pairs.holdout.is_empty() {
        let ys: Vec<Vec<f64>> = pairs.holdout.iter().map(|&i| pairs.ys[i].clone()).collect();
        let xs: Vec<Vec<f64>> = pairs.holdout.iter().map(|&i| pairs.xs[i].clone()).collect();
        trained.report.forward_rmse = Some(pooled_rmse(&trained.forward(&ys)?, &xs));
        let inv = trained.inverse(&xs)?;
        trained.report.inverse_rmse = Some(
            (0..k)
                .map(|j| {
                    let a: Vec<f64> = inv.iter().map(|r| r[j]).collect();
                    let b: Vec<f64> = ys.iter().map(|r| r[j]).collect();
                    rmse(&a, &b)
                })
                .collect(),
        );
    }
    Ok(trained)
}

fn gather(all: &Tensor, idx: &[usize], k: usize) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * k);
    for &i in idx {
        data.extend_from_slice(&all.data()[i * k..(i + 1) * k]);
    }
    Tensor::new(vec![idx.len(), k], data).expect("gathered rows")
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

fn pooled_rmse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let fa: Vec<f64> = a.iter().flatten().copied().collect();
    let fb: Vec<f64> = b.iter().flatten().copied().collect();
    rmse(&fa, &fb)
}

/// Fits the chain so that `F(y) ≈ M(y)` on simulator pairs built from
/// `states` (plus prior draws, see [`ChainTrainConfig::prior_samples`]),
/// minimising the RMSE between `F(y)` and `M(y)` in standardised units.
pub fn train_inverse_surrogate(
    sim: &dyn MechanisticModel,
    states: &[Vec<f64>],
    cfg: &ChainTrainConfig,
) -> Result<TrainedChain> {
    let pairs = prepare_pairs(sim, states, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fit_chain(sim.name(), &pairs, cfg, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapSample {
    pub truth: f64,
    pub swap: f64,
    pub inverse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub schema_version: u32,
    pub simulator: String,
    pub seed: u64,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    /// Held-out temperature RMSE of the MLP trained on swapped pairs.
    pub swap_rmse: f64,
    /// Held-out temperature RMSE of the inverted chain.
    pub inverse_rmse: f64,
    pub chain: ChainReport,
    pub swap_epoch_losses: Vec<f64>,
    pub samples: Vec<SwapSample>,
}

/// Trains a plain MLP on swapped pairs `X -> Y` and the coupling chain on
/// `Y -> X`, both on the same pairs, and compares their held-out
/// temperature errors.
pub fn swap_study(
    sim: &dyn MechanisticModel,
    states: &[Vec<f64>],
    cfg: &ChainTrainConfig,
) -> Result<SwapReport> {
    let pairs = prepare_pairs(sim, states, cfg)?;
    if pairs.holdout.is_empty() {
        return Err(Error::config("the swap study needs a non-empty holdout"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trained = fit_chain(sim.name(), &pairs, cfg, &mut rng)?;
    let k = cfg.chain.dim;

    let (y_norm, x_norm) = (&trained.y_norm, &trained.x_norm);
    let x_all = rows_tensor(&pairs.xs, &pairs.train, x_norm);
    let y_all = rows_tensor(&pairs.ys, &pairs.train, y_norm);
    let mut store = ParamStore::new();
    let h = cfg.chain.hidden;
    let mlp = Mlp::new(
        &mut store,
        "swap",
        &[k, h, h, h, k],
        Activation::Relu,
        &mut rng,
    );
    let (swap_epoch_losses, _) = fit(
        &mut store,
        pairs.train.len(),
        cfg,
        &mut rng,
        |tape, p, idx| {
            let x = tape.constant(gather(&x_all, idx, k));
            let y = tape.constant(gather(&y_all, idx, k));
            rmse_loss(mlp.forward(p, x)?, y)
        },
    )?;

    let xs: Vec<Vec<f64>> = pairs.holdout.iter().map(|&i| pairs.xs[i].clone()).collect();
    let truth: Vec<f64> = pairs.holdout.iter().map(|&i| pairs.ys[i][0]).collect();
    let inverse = trained.simulated_labels(&xs)?;
    let swap = {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(rows_tensor(&xs, &(0..xs.len()).collect::<Vec<_>>(), x_norm));
        let out = mlp.forward(&p, x)?.to_vec();
        out.chunks(k)
            .map(|r| y_norm.invert(r)[0])
            .collect::<Vec<f64>>()
    };
    Ok(SwapReport {
        schema_version: CHAIN_SCHEMA_VERSION,
        simulator: sim.name().to_string(),
        seed: cfg.seed,
        train_pairs: pairs.train.len(),
        holdout_pairs: pairs.holdout.len(),
        swap_rmse: rmse(&swap, &truth),
        inverse_rmse: rmse(&inverse, &truth),
        chain: trained.report.clone(),
        swap_epoch_losses,
        samples: truth
            .iter()
            .zip(swap.iter().zip(&inverse))
            .map(|(&t, (&s, &i))| SwapSample {
                truth: t,
                swap: s,
                inverse: i,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `M(y) = A y + b` with a well-conditioned `A`.
    struct Linear;

    impl MechanisticModel for Linear {
        fn name(&self) -> &'static str {
            "linear"
        }
        fn dim(&self) -> usize {
            4
        }
        fn state_names(&self) -> Vec<&'static str> {
            vec!["temperature", "a", "b", "c"]
        }
        fn state_bounds(&self) -> Vec<(f64, f64)> {
            vec![(250.0, 310.0), (0.0, 1.0), (0.0, 2.0), (-1.0, 1.0)]
        }
        fn simulate(&self, y: &[f64]) -> Result<Vec<f64>> {
            // every state coordinate moves the output by a comparable
            // amount over its range, so the map is well conditioned
            Ok(vec![
                0.5 * y[0] + 20.0 * y[1] + 3.0,
                0.4 * y[0] - 12.0 * y[2],
                0.3 * y[0] + 12.0 * y[3] - 15.0 * y[1],
                0.6 * y[0] + 9.0 * y[2] - 10.0 * y[3],
            ])
        }
    }

    struct Identity;

    impl MechanisticModel for Identity {
        fn name(&self) -> &'static str {
            "identity"
        }
        fn dim(&self) -> usize {
            2
        }
        fn state_names(&self) -> Vec<&'static str> {
            vec!["temperature", "a"]
        }
        fn state_bounds(&self) -> Vec<(f64, f64)> {
            vec![(250.0, 310.0), (0.0, 1.0)]
        }
        fn simulate(&self, y: &[f64]) -> Result<Vec<f64>> {
            Ok(y.to_vec())
        }
    }

    fn small(dim: usize, epochs: usize) -> ChainTrainConfig {
        ChainTrainConfig {
            chain: ChainConfig {
                dim,
                layers: 3,
                hidden: 16,
            },
            epochs,
            batch: 16,
            prior_samples: 400,
            ..ChainTrainConfig::default()
        }
    }

    #[test]
    fn identity_simulator_is_nearly_exact_both_ways() {
        let cfg = small(2, 8);
        let report = swap_study(
            &Identity,
            &[],
            &ChainTrainConfig {
                holdout: 0.0,
                ..cfg.clone()
            },
        );
        assert!(report.is_err(), "empty holdout must be rejected");
        let states: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![250.0 + 0.3 * i as f64, (i % 10) as f64 / 10.0])
            .collect();
        let r = swap_study(&Identity, &states, &cfg).unwrap();
        assert!(r.inverse_rmse < 0.5, "{}", r.inverse_rmse);
        assert!(r.swap_rmse < 1.5, "{}", r.swap_rmse);
        assert_eq!(r.samples.len(), r.holdout_pairs);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cfg = small(2, 1);
        assert!(matches!(
            train_inverse_surrogate(&Linear, &[], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = ChainTrainConfig {
            prior_samples: 64,
            ..small(4, 1)
        };
        let t = train_inverse_surrogate(&Linear, &[], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.json");
        t.save(&path).unwrap();
        let back = TrainedChain::load(&path).unwrap();
        assert_eq!(
            back.chain.params().to_records(),
            t.chain.params().to_records()
        );
        let x = vec![vec![260.0, 200.0, 140.0, 270.0]];
        assert_eq!(back.inverse(&x).unwrap(), t.inverse(&x).unwrap());
    }

    #[test]
    fn non_finite_loss_keeps_last_finite_parameters() {
        let cfg = ChainTrainConfig {
            prior_samples: 32,
            ..small(4, 2)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0]));
        let before = store.clone();
        let (losses, status) = fit(&mut store, 10, &cfg, &mut rng, |tape, p, _| {
            p[crate::params::ParamId(0)]
                .sum()
                .mul(tape.scalar(f64::NAN))
        })
        .unwrap();
        assert!(losses.is_empty());
        assert!(matches!(
            status,
            TrainStatus::Aborted {
                epoch: 0,
                step: 0,
                ..
            }
        ));
        assert_eq!(
            store.get(crate::params::ParamId(0)).data(),
            before.get(crate::params::ParamId(0)).data()
        );
    }

    #[test]
    fn linear_simulator_inverse_recovers_temperature() {
        let states: Vec<Vec<f64>> = (0..300)
            .map(|i| {
                let f = i as f64;
                vec![
                    250.0 + (f * 0.2) % 60.0,
                    (f * 0.37) % 1.0,
                    (f * 0.11) % 2.0,
                    ((f * 0.53) % 2.0) - 1.0,
                ]
            })
            .collect();
        let cfg = ChainTrainConfig {
            epochs: 50,
            prior_samples: 3000,
            ..ChainTrainConfig::default()
        };
        let t = train_inverse_surrogate(&Linear, &states, &cfg).unwrap();
        assert_eq!(t.report.status, TrainStatus::Completed);
        assert!(t.report.temperature_rmse() < 0.1, "{:?}", t.report);
    }
}

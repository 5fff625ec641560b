use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batches::{BatchStream, StratifiedBatches};
use super::metrics::{compute_metrics, Metrics};
use super::strategy::{FairnessTerm, StrategySpec};
use crate::data::{windows, StDataset, TestFeatures};
use crate::error::{Error, Result};
use crate::flow::TrainedChain;
use crate::losses::{
    consistency, fairness_surrogate, mse_loss, phy_loss_pm1, phy_loss_pm2, pm1_bounds, total_loss,
    ConsistencyForm, Groups, LocationId, LossParts, LossReport, LossWeights, Pm1LossForm,
};
use crate::nets::{FnnConfig, LstmConfig, ModelConfig, Predictor};
use crate::norm::Standardizer;
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamRecord;
use crate::sim::{EnergyBalanceInputs, SimKind, STEFAN_BOLTZMANN};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Emitted longwave per kelvin near 288 K (W m^-2 K^-1); turns energy
/// residuals into temperature-like units.
fn pm2_residual_scale() -> f64 {
    4.0 * STEFAN_BOLTZMANN * 288f64.powi(3)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fnn,
    Lstm,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fnn" => Ok(ModelKind::Fnn),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(Error::config(format!(
                "unknown model `{other}` (fnn or lstm)"
            ))),
        }
    }
}

/// Where the pooled RMSE inside the fairness surrogate comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalTerm {
    /// Recomputed from the current mini-batch, with gradient.
    #[default]
    Batch,
    /// Fixed per epoch from the full train (RegFair) or test (SimFair) set.
    Epoch,
}

impl std::str::FromStr for GlobalTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "batch" => Ok(GlobalTerm::Batch),
            "epoch" => Ok(GlobalTerm::Epoch),
            other => Err(Error::config(format!(
                "unknown global term `{other}` (batch or epoch)"
            ))),
        }
    }
}

/// Rows the physics loss is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhysicsRows {
    /// Train and test batch rows, weighted by row count.
    #[default]
    All,
    /// Unlabelled test rows only.
    Test,
}

impl std::str::FromStr for PhysicsRows {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(PhysicsRows::All),
            "test" => Ok(PhysicsRows::Test),
            other => Err(Error::config(format!(
                "unknown physics rows `{other}` (all or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Replaces the default architecture of `model`; its input dimension
    /// must match the data.
    pub arch: Option<ModelConfig>,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch: usize,
    pub rows_per_location: usize,
    pub adam: AdamConfig,
    pub pm1_loss: Pm1LossForm,
    pub consistency: ConsistencyForm,
    pub global_term: GlobalTerm,
    pub physics_rows: PhysicsRows,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Fnn,
            arch: None,
            epochs: 50,
            pretrain_epochs: 10,
            batch: 64,
            rows_per_location: 8,
            adam: AdamConfig::default(),
            pm1_loss: Pm1LossForm::Hinge,
            consistency: ConsistencyForm::Hinge,
            global_term: GlobalTerm::Batch,
            physics_rows: PhysicsRows::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.rows_per_location == 0 {
            return Err(Error::config(
                "epochs, batch and rows_per_location must be positive",
            ));
        }
        if !(self.adam.lr0 > 0.0 && self.adam.lr0.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.adam.lr0
            )));
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize) -> Result<ModelConfig> {
        let arch = match &self.arch {
            Some(a) => a.clone(),
            None => match self.model {
                ModelKind::Fnn => ModelConfig::Fnn(FnnConfig::new(input_dim)),
                ModelKind::Lstm => ModelConfig::Lstm(LstmConfig::new(input_dim)),
            },
        };
        let kind_matches = matches!(
            (&arch, self.model),
            (ModelConfig::Fnn(_), ModelKind::Fnn) | (ModelConfig::Lstm(_), ModelKind::Lstm)
        );
        if !kind_matches {
            return Err(Error::config(
                "architecture override does not match the model kind",
            ));
        }
        if arch.input_dim() != input_dim {
            return Err(Error::config(format!(
                "architecture expects {} features, data has {input_dim}",
                arch.input_dim()
            )));
        }
        Ok(arch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Step losses averaged over the epoch; row counts summed.
    pub losses: LossReport,
    /// Training-set RMSE (K) at the end of the epoch.
    pub train_rmse: f64,
    /// Digest of the pseudo labels used during the epoch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pseudo_digest: Option<u64>,
    /// Digest of the test predictions at the end of the epoch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_pred_digest: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn train_records(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Train)
    }
}

/// FNV-1a over the bit patterns of `v`.
pub fn digest(v: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in v {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub spec: StrategySpec,
    pub config: TrainConfig,
    pub predictor: Predictor,
    pub x_norm: Standardizer,
    pub y_norm: Standardizer,
    pub simulator: Option<SimKind>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub schema_version: u32,
    pub kind: String,
    pub spec: StrategySpec,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub x_norm: Standardizer,
    pub y_norm: Standardizer,
    pub simulator: Option<SimKind>,
    pub seed: u64,
    pub params: Vec<ParamRecord>,
}

impl TrainedModel {
    pub fn predict(&self, f: &TestFeatures) -> Result<Vec<f64>> {
        self.predict_rows(&f.location, &f.x, f.dim())
    }

    /// Predictions for every row of `data`, from its features only.
    pub fn predict_dataset(&self, data: &StDataset) -> Result<Vec<f64>> {
        self.predict_rows(data.locations(), data.features(), data.dim())
    }

    fn predict_rows(&self, locations: &[LocationId], x: &[f64], d: usize) -> Result<Vec<f64>> {
        let cfg = self.predictor.config();
        if d != cfg.input_dim() {
            return Err(Error::config(format!(
                "model expects {} features, data has {d}",
                cfg.input_dim()
            )));
        }
        let inputs = model_inputs(&cfg, &self.x_norm, locations, x, d)?;
        let s = predict_standardized(&self.predictor, &inputs)?;
        let (mu, sd) = (self.y_norm.mean[0], self.y_norm.std[0]);
        Ok(s.into_iter().map(|v| v * sd + mu).collect())
    }

    pub fn evaluate(&self, test: &StDataset) -> Result<Metrics> {
        let preds = self.predict_dataset(test)?;
        compute_metrics(test.locations(), &preds, test.labels())
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            schema_version: MODEL_SCHEMA_VERSION,
            kind: "predictor".into(),
            spec: self.spec.clone(),
            config: self.config.clone(),
            model: self.predictor.config(),
            x_norm: self.x_norm.clone(),
            y_norm: self.y_norm.clone(),
            simulator: self.simulator,
            seed: self.seed,
            params: self.predictor.params().to_records(),
        }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<Self> {
        if ck.schema_version != MODEL_SCHEMA_VERSION || ck.kind != "predictor" {
            return Err(Error::Checkpoint(format!(
                "expected a version {MODEL_SCHEMA_VERSION} predictor checkpoint, got kind `{}` version {}",
                ck.kind, ck.schema_version
            )));
        }
        let mut predictor = ck.model.build(&mut ChaCha8Rng::seed_from_u64(0))?;
        predictor.params_mut().load_records(&ck.params)?;
        predictor.params_mut().set_trainable(false);
        Ok(TrainedModel {
            spec: ck.spec,
            config: ck.config,
            predictor,
            x_norm: ck.x_norm,
            y_norm: ck.y_norm,
            simulator: ck.simulator,
            seed: ck.seed,
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

fn as_rows(x: &[f64], d: usize) -> Vec<&[f64]> {
    x.chunks(d).collect()
}

/// Standardised model inputs: `(n, d)` for the FNN, `(n, W, d)` windows for
/// the LSTM.
fn model_inputs(
    cfg: &ModelConfig,
    x_norm: &Standardizer,
    locations: &[LocationId],
    x: &[f64],
    d: usize,
) -> Result<Tensor> {
    let mut xs = x.to_vec();
    x_norm.apply_flat(&mut xs);
    match cfg {
        ModelConfig::Fnn(_) => Tensor::new(vec![locations.len(), d], xs),
        ModelConfig::Lstm(c) => windows(locations, &xs, d, c.window),
    }
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let n = t.shape()[0];
    let width = t.numel().checked_div(n).unwrap_or(0);
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gathered rows keep their width")
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

fn predict_standardized(predictor: &Predictor, inputs: &Tensor) -> Result<Vec<f64>> {
    let n = inputs.shape()[0];
    let mut out = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(2048) {
        out.extend(predictor.predict(&gather(inputs, chunk))?);
    }
    Ok(out)
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64).sqrt()
}

enum Physics {
    Pm1 { x: Tensor, eps: Tensor, eta: Tensor },
    Pm2 { inputs: Vec<EnergyBalanceInputs> },
}

impl Physics {
    fn build(
        kind: SimKind,
        x: &[f64],
        d: usize,
        sim_labels: &[f64],
        energy: Option<Vec<EnergyBalanceInputs>>,
    ) -> Result<Self> {
        Ok(match kind {
            SimKind::Pm1 => {
                let n = sim_labels.len();
                let (mut eps, mut eta) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
                for (row, &ym) in as_rows(x, d).into_iter().zip(sim_labels) {
                    let (e, h) = pm1_bounds(row, ym);
                    eps.extend(e);
                    eta.extend(h);
                }
                Physics::Pm1 {
                    x: Tensor::new(vec![n, d], x.to_vec())?,
                    eps: Tensor::new(vec![n, d], eps)?,
                    eta: Tensor::new(vec![n, d], eta)?,
                }
            }
            SimKind::Pm2 => Physics::Pm2 {
                inputs: energy.ok_or_else(|| {
                    Error::config("the energy-balance loss needs energy inputs for every row")
                })?,
            },
        })
    }

    /// Loss on rows `idx` in label-standard-deviation units.
    fn loss<'t>(
        &self,
        tape: &'t Tape,
        pred_s: Var<'t>,
        idx: &[usize],
        mu: f64,
        sd: f64,
        form: Pm1LossForm,
    ) -> Result<Var<'t>> {
        let y = pred_s.scale(sd).add_scalar(mu);
        Ok(match self {
            Physics::Pm1 { x, eps, eta } => phy_loss_pm1(
                tape,
                &gather(x, idx),
                y,
                &gather(eps, idx),
                &gather(eta, idx),
                form,
            )?
            .scale(1.0 / sd),
            Physics::Pm2 { inputs } => {
                phy_loss_pm2(tape, y, &pick(inputs, idx))?.scale(1.0 / (pm2_residual_scale() * sd))
            }
        })
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Default)]
struct EpochAcc {
    sum: LossReport,
    steps: usize,
}

impl EpochAcc {
    fn add(&mut self, r: &LossReport) {
        self.sum.l_p += r.l_p;
        self.sum.l_f_pre += r.l_f_pre;
        self.sum.l_c += r.l_c;
        self.sum.l_phy += r.l_phy;
        self.sum.total += r.total;
        self.sum.weights = r.weights;
        self.sum.n_train += r.n_train;
        self.sum.n_test += r.n_test;
        self.steps += 1;
    }

    fn mean(&self) -> LossReport {
        let k = self.steps.max(1) as f64;
        LossReport {
            l_p: self.sum.l_p / k,
            l_f_pre: self.sum.l_f_pre / k,
            l_c: self.sum.l_c / k,
            l_phy: self.sum.l_phy / k,
            total: self.sum.total / k,
            ..self.sum
        }
    }
}

fn non_finite(epoch: usize, step: usize, report: &LossReport) -> Error {
    Error::NonFinite {
        epoch,
        step,
        detail: serde_json::to_string(report).unwrap_or_else(|_| format!("{report:?}")),
    }
}

/// Trains one strategy. `test` holds the unlabelled test rows; true test
/// labels are not reachable from here.
pub fn train(
    spec: &StrategySpec,
    train: &StDataset,
    test: &TestFeatures,
    chain: Option<&TrainedChain>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TrainedModel, History)> {
    spec.validate()?;
    cfg.validate()?;
    let d = train.dim();
    if train.is_empty() || test.is_empty() {
        return Err(Error::config(
            "training needs non-empty train and test sets",
        ));
    }
    if test.dim() != d {
        return Err(Error::config(format!(
            "train has {d} features, test has {}",
            test.dim()
        )));
    }
    let chain = match (spec.needs_chain(), chain) {
        (true, None) => {
            return Err(Error::config(format!(
                "{} needs a trained inverse chain",
                spec.strategy
            )))
        }
        (true, Some(c)) => Some(c),
        (false, _) => None,
    };
    if let Some(c) = chain {
        if c.dim() != d {
            return Err(Error::config(format!(
                "chain has dimension {}, data has {d} features",
                c.dim()
            )));
        }
        if let Some(sim) = train.sim {
            if c.simulator != sim.as_str() {
                return Err(Error::config(format!(
                    "chain approximates `{}` but the data come from `{}`",
                    c.simulator,
                    sim.as_str()
                )));
            }
        }
    }
    let simulator = train
        .sim
        .or_else(|| chain.and_then(|c| c.simulator.parse().ok()));
    let arch = cfg.architecture(d)?;

    let x_norm = Standardizer::fit(&as_rows(train.features(), d))?;
    let labels = train.labels().to_vec();
    let y_norm = Standardizer::fit(&labels.iter().map(|v| [*v]).collect::<Vec<_>>())?;
    let (mu, sd) = (y_norm.mean[0], y_norm.std[0]);
    let y_s: Vec<f64> = labels.iter().map(|v| (v - mu) / sd).collect();
    let xin_tr = model_inputs(&arch, &x_norm, train.locations(), train.features(), d)?;
    let xin_te = model_inputs(&arch, &x_norm, &test.location, &test.x, d)?;

    let sim_raw = |x: &[f64]| -> Result<Option<Vec<f64>>> {
        chain
            .map(|c| {
                c.simulated_labels(
                    &as_rows(x, d)
                        .into_iter()
                        .map(<[f64]>::to_vec)
                        .collect::<Vec<_>>(),
                )
            })
            .transpose()
    };
    let sim_tr = sim_raw(train.features())?;
    let sim_te = sim_raw(&test.x)?;
    let standardize = |v: &Vec<f64>| v.iter().map(|y| (y - mu) / sd).collect::<Vec<f64>>();
    let sim_tr_s = sim_tr.as_ref().map(standardize);
    let sim_te_s = sim_te.as_ref().map(standardize);

    let physics = if spec.physics {
        let kind =
            simulator.ok_or_else(|| Error::config("physics loss needs to know the simulator"))?;
        let (str_, ste) = (
            sim_tr.as_deref().unwrap_or(&[]),
            sim_te.as_deref().unwrap_or(&[]),
        );
        Some((
            Physics::build(kind, train.features(), d, str_, train.energy_inputs())?,
            Physics::build(kind, &test.x, d, ste, test.energy.clone())?,
        ))
    } else {
        None
    };

    let mut predictor = arch.build(&mut seeded(seed, 1))?;
    let mut batch_rng = seeded(seed, 2);
    let train_batches = StratifiedBatches::new(train.locations(), cfg.batch, cfg.rows_per_location);
    let mut test_stream = BatchStream::new(
        StratifiedBatches::new(&test.location, cfg.batch, cfg.rows_per_location),
        seeded(seed, 3),
    );
    let needs_test = matches!(
        spec.fairness,
        FairnessTerm::Pseudo | FairnessTerm::Simulated
    ) || spec.physics;
    let mut history = History::default();

    let train_rmse =
        |p: &Predictor| -> Result<f64> { Ok(rmse(&predict_standardized(p, &xin_tr)?, &y_s) * sd) };

    if spec.pretrain {
        let target = sim_tr_s
            .as_ref()
            .expect("pretraining strategies need the chain");
        let mut adam = AdamState::new(cfg.adam, predictor.params());
        let weights = LossWeights {
            p: 1.0,
            f: 0.0,
            c: 0.0,
            phy: 0.0,
        };
        for epoch in 0..cfg.pretrain_epochs {
            let mut acc = EpochAcc::default();
            for (step, idx) in train_batches.epoch(&mut batch_rng).into_iter().enumerate() {
                let tape = Tape::new();
                let p = predictor.params().bind(&tape);
                let pred = predictor.forward(&tape, &p, &gather(&xin_tr, &idx))?;
                let parts = LossParts {
                    p: Some(mse_loss(&tape, pred, &pick(target, &idx))?),
                    ..LossParts::default()
                };
                let (total, mut report) = total_loss(&tape, &parts, &weights)?;
                report.n_train = idx.len();
                if !report.total.is_finite() {
                    return Err(non_finite(epoch, step, &report));
                }
                let grads = tape.backward(total)?;
                predictor.params_mut().accumulate(&p, &grads)?;
                adam.step(predictor.params_mut())?;
                acc.add(&report);
            }
            history.records.push(EpochRecord {
                phase: Phase::Pretrain,
                epoch,
                steps: acc.steps,
                lr: adam.current_lr(),
                losses: acc.mean(),
                train_rmse: train_rmse(&predictor)?,
                pseudo_digest: None,
                test_pred_digest: None,
            });
        }
    }

    let mut adam = AdamState::new(cfg.adam, predictor.params());
    let mut pseudo: Option<Vec<f64>> = None;
    for epoch in 0..cfg.epochs {
        let global = match (cfg.global_term, spec.fairness) {
            (GlobalTerm::Batch, _) => None,
            (GlobalTerm::Epoch, f) => match f {
                FairnessTerm::Train => {
                    Some(rmse(&predict_standardized(&predictor, &xin_tr)?, &y_s))
                }
                FairnessTerm::Simulated => Some(rmse(
                    &predict_standardized(&predictor, &xin_te)?,
                    sim_te_s.as_ref().expect("checked with the chain"),
                )),
                FairnessTerm::Pseudo | FairnessTerm::None => None,
            },
        };
        if spec.fairness == FairnessTerm::Pseudo && epoch % spec.pseudo_refresh == 0 {
            pseudo = Some(predict_standardized(&predictor, &xin_te)?);
        }
        let mut acc = EpochAcc::default();
        for (step, idx) in train_batches.epoch(&mut batch_rng).into_iter().enumerate() {
            let tidx = if needs_test {
                Some(test_stream.next_batch())
            } else {
                None
            };
            let tape = Tape::new();
            let p = predictor.params().bind(&tape);
            let pred = predictor.forward(&tape, &p, &gather(&xin_tr, &idx))?;
            let y_b = pick(&y_s, &idx);
            let pred_te = match &tidx {
                Some(t) => Some(predictor.forward(&tape, &p, &gather(&xin_te, t))?),
                None => None,
            };
            let mut parts = LossParts {
                p: Some(mse_loss(&tape, pred, &y_b)?),
                ..LossParts::default()
            };
            parts.f = match spec.fairness {
                FairnessTerm::None => None,
                FairnessTerm::Train => {
                    let groups = Groups::from_ids(&pick(train.locations(), &idx));
                    Some(fairness_surrogate(&tape, pred, &y_b, &groups, global)?)
                }
                FairnessTerm::Pseudo | FairnessTerm::Simulated => {
                    let t = tidx.as_ref().expect("test batch drawn");
                    let labels = match spec.fairness {
                        FairnessTerm::Pseudo => pseudo.as_ref().expect("refreshed at epoch 0"),
                        _ => sim_te_s.as_ref().expect("checked with the chain"),
                    };
                    let groups = Groups::from_ids(&pick(&test.location, t));
                    let pt = pred_te.expect("test batch predicted");
                    Some(fairness_surrogate(
                        &tape,
                        pt,
                        &pick(labels, t),
                        &groups,
                        global,
                    )?)
                }
            };
            if spec.consistency {
                let ym = pick(sim_tr_s.as_ref().expect("checked with the chain"), &idx);
                parts.c = Some(consistency(&tape, cfg.consistency, &y_b, pred, &ym)?);
            }
            if let Some((ph_tr, ph_te)) = &physics {
                let t = tidx.as_ref().expect("test batch drawn");
                let l_te = ph_te.loss(
                    &tape,
                    pred_te.expect("test batch predicted"),
                    t,
                    mu,
                    sd,
                    cfg.pm1_loss,
                )?;
                parts.phy = Some(match cfg.physics_rows {
                    PhysicsRows::Test => l_te,
                    PhysicsRows::All => {
                        let (a, b) = (idx.len() as f64, t.len() as f64);
                        let l_tr = ph_tr.loss(&tape, pred, &idx, mu, sd, cfg.pm1_loss)?;
                        l_tr.scale(a / (a + b)).add(l_te.scale(b / (a + b)))?
                    }
                });
            }
            let (total, mut report) = total_loss(&tape, &parts, &spec.weights)?;
            report.n_train = idx.len();
            report.n_test = tidx.as_ref().map_or(0, Vec::len);
            if !report.total.is_finite() {
                return Err(non_finite(epoch, step, &report));
            }
            let grads = tape.backward(total)?;
            predictor.params_mut().accumulate(&p, &grads)?;
            adam.step(predictor.params_mut())?;
            acc.add(&report);
        }
        let test_pred_digest = if spec.fairness == FairnessTerm::Pseudo {
            Some(digest(&predict_standardized(&predictor, &xin_te)?))
        } else {
            None
        };
        history.records.push(EpochRecord {
            phase: Phase::Train,
            epoch,
            steps: acc.steps,
            lr: adam.current_lr(),
            losses: acc.mean(),
            train_rmse: train_rmse(&predictor)?,
            pseudo_digest: pseudo.as_deref().map(digest),
            test_pred_digest,
        });
    }
    predictor.params_mut().set_trainable(false);
    Ok((
        TrainedModel {
            spec: spec.clone(),
            config: cfg.clone(),
            predictor,
            x_norm,
            y_norm,
            simulator,
            seed,
        },
        history,
    ))
}

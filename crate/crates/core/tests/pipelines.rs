use simfair::data::{generate_world, split, SplitKind, StDataset, WorldConfig};
use simfair::flow::{train_inverse_surrogate, ChainConfig, ChainTrainConfig, TrainedChain};
use simfair::losses::LossWeights;
use simfair::pipelines::{
    train, FairnessTerm, ModelKind, Phase, Strategy, StrategySpec, TrainConfig, TrainedModel,
};
use simfair::sim::SimKind;

fn world(sim: SimKind) -> (StDataset, StDataset) {
    let cfg = WorldConfig {
        stations: 24,
        days: 40,
        time_stride: 2,
        sim,
        ..WorldConfig::default()
    };
    let w = generate_world(&cfg, 3).unwrap();
    split(&w, &SplitKind::GeoRegion.default_spec()).unwrap()
}

fn small_chain(sim: SimKind, tr: &StDataset) -> TrainedChain {
    let model = sim.model();
    let states = tr.sim_states(&model.state_names()).unwrap();
    let cfg = ChainTrainConfig {
        chain: ChainConfig {
            hidden: 16,
            ..ChainConfig::default()
        },
        epochs: 2,
        batch: 32,
        prior_samples: 50,
        ..ChainTrainConfig::default()
    };
    train_inverse_surrogate(model.as_ref(), &states, &cfg).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        pretrain_epochs: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_weight_simfair_matches_basenet_bitwise() {
    let (tr, te) = world(SimKind::Pm1);
    let chain = small_chain(SimKind::Pm1, &tr);
    let tf = te.test_features();
    let (base, _) = train(
        &StrategySpec::new(Strategy::BaseNet),
        &tr,
        &tf,
        None,
        &quick(),
        5,
    )
    .unwrap();
    let spec = StrategySpec::new(Strategy::SimFair).with_weights(LossWeights {
        p: 1.0,
        f: 0.0,
        c: 0.0,
        phy: 0.0,
    });
    let (sf, _) = train(&spec, &tr, &tf, Some(&chain), &quick(), 5).unwrap();
    let (a, b) = (base.predict(&tf).unwrap(), sf.predict(&tf).unwrap());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn no_strategy_reads_test_labels() {
    let (tr, te) = world(SimKind::Pm1);
    let chain = small_chain(SimKind::Pm1, &tr);
    let tf = te.test_features();
    for s in Strategy::ALL {
        train(&StrategySpec::new(s), &tr, &tf, Some(&chain), &quick(), 0).unwrap();
        assert_eq!(te.label_reads(), 0, "{s}");
    }
}

#[test]
fn missing_or_mismatched_chain_is_named() {
    let (tr, te) = world(SimKind::Pm1);
    let tf = te.test_features();
    let err = train(
        &StrategySpec::new(Strategy::SimFair),
        &tr,
        &tf,
        None,
        &quick(),
        0,
    )
    .unwrap_err();
    assert!(err.to_string().contains("inverse chain"), "{err}");
    let (tr2, _) = world(SimKind::Pm2);
    let pm2_chain = small_chain(SimKind::Pm2, &tr2);
    let err = train(
        &StrategySpec::new(Strategy::Sim),
        &tr,
        &tf,
        Some(&pm2_chain),
        &quick(),
        0,
    )
    .unwrap_err();
    assert!(err.to_string().contains("pm2"), "{err}");
}

#[test]
fn same_seed_same_model_and_checkpoint_round_trip() {
    let (tr, te) = world(SimKind::Pm1);
    let chain = small_chain(SimKind::Pm1, &tr);
    let tf = te.test_features();
    let spec = StrategySpec::new(Strategy::SimFairP);
    let (a, ha) = train(&spec, &tr, &tf, Some(&chain), &quick(), 9).unwrap();
    let (b, hb) = train(&spec, &tr, &tf, Some(&chain), &quick(), 9).unwrap();
    assert_eq!(a.predict(&tf).unwrap(), b.predict(&tf).unwrap());
    assert_eq!(ha.to_jsonl().unwrap(), hb.to_jsonl().unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    a.save(&path).unwrap();
    let back = TrainedModel::load(&path).unwrap();
    assert_eq!(back.predict(&tf).unwrap(), a.predict(&tf).unwrap());
    assert_eq!(back.spec, spec);
}

#[test]
fn history_records_every_epoch() {
    let (tr, te) = world(SimKind::Pm1);
    let chain = small_chain(SimKind::Pm1, &tr);
    let tf = te.test_features();
    let (_, h) = train(
        &StrategySpec::new(Strategy::Sim),
        &tr,
        &tf,
        Some(&chain),
        &quick(),
        0,
    )
    .unwrap();
    let phases: Vec<Phase> = h.records.iter().map(|r| r.phase).collect();
    assert_eq!(
        phases,
        [
            Phase::Pretrain,
            Phase::Pretrain,
            Phase::Train,
            Phase::Train,
            Phase::Train
        ]
    );
    assert_eq!(h.to_jsonl().unwrap().lines().count(), 5);
    assert!(h
        .records
        .iter()
        .all(|r| r.losses.total.is_finite() && r.steps > 0));
}

#[test]
fn self_reg_refreshes_pseudo_labels_from_previous_epoch() {
    let (tr, te) = world(SimKind::Pm1);
    let tf = te.test_features();
    let spec = StrategySpec::new(Strategy::SelfReg);
    assert_eq!(spec.fairness, FairnessTerm::Pseudo);
    let (_, h) = train(&spec, &tr, &tf, None, &quick(), 0).unwrap();
    let r = &h.records;
    // labels used in epoch e are the predictions at the end of epoch e - 1
    for e in 1..r.len() {
        assert_eq!(r[e].pseudo_digest, r[e - 1].test_pred_digest);
    }
}

#[test]
fn lstm_and_energy_balance_paths_train() {
    let (tr, te) = world(SimKind::Pm2);
    let chain = small_chain(SimKind::Pm2, &tr);
    let tf = te.test_features();
    assert!(tf.energy.is_some());
    let cfg = TrainConfig {
        model: ModelKind::Lstm,
        epochs: 2,
        ..TrainConfig::default()
    };
    let (m, h) = train(
        &StrategySpec::new(Strategy::SimFairP),
        &tr,
        &tf,
        Some(&chain),
        &cfg,
        0,
    )
    .unwrap();
    assert!(h
        .records
        .iter()
        .all(|r| r.losses.l_phy.is_finite() && r.losses.l_phy > 0.0));
    let metrics = m.evaluate(&te).unwrap();
    assert!(metrics.rmse.is_finite());
}

#[test]
fn wrong_feature_count_is_rejected() {
    let (tr, te) = world(SimKind::Pm1);
    let mut tf = te.test_features();
    tf.x.truncate(tf.len() * 3);
    tf.feature_names.truncate(3);
    let err = train(
        &StrategySpec::new(Strategy::BaseNet),
        &tr,
        &tf,
        None,
        &quick(),
        0,
    )
    .unwrap_err();
    assert!(err.to_string().contains("features"), "{err}");
}

use synreg_core::sampling::{default_params, GenParams, RngStream};
use synreg_net::train::{synth_sample, train_with};
use synreg_net::{train, train_step, LossKind, NetState, TrainOptions, TrainSettings, UNetConfig};

fn small() -> (GenParams, UNetConfig) {
    let mut p = default_params(&[32, 32]);
    p.j = 4;
    let cfg = UNetConfig {
        levels: 2,
        width: 4,
        ..UNetConfig::desk()
    };
    (p, cfg)
}

fn opts(iterations: u64, kind: LossKind, prefetch: bool) -> TrainOptions {
    TrainOptions {
        iterations,
        kind,
        settings: TrainSettings::default(),
        prefetch,
    }
}

#[test]
fn zero_iterations_keep_initial_weights() {
    let (p, cfg) = small();
    let root = RngStream::from_seed(3);
    let out = train(&root, &p, cfg.clone(), &opts(0, LossKind::Dice, false)).unwrap();
    let init = NetState::init(
        cfg,
        out.state.train.clone(),
        &mut root.split(synreg_net::train::INIT_STREAM),
    )
    .unwrap();
    assert_eq!(out.state, init);
    assert!(out.trace.is_empty());
}

#[test]
fn same_seed_same_weights_and_trace() {
    let (p, cfg) = small();
    let root = RngStream::from_seed(11);
    for kind in [LossKind::Dice, LossKind::SupDef] {
        let a = train(&root, &p, cfg.clone(), &opts(12, kind, false)).unwrap();
        let b = train(&root, &p, cfg.clone(), &opts(12, kind, false)).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 12);
    }
    let c = train(
        &RngStream::from_seed(12),
        &p,
        cfg.clone(),
        &opts(12, LossKind::Dice, false),
    )
    .unwrap();
    let a = train(&root, &p, cfg, &opts(12, LossKind::Dice, false)).unwrap();
    assert_ne!(a.state, c.state);
}

#[test]
fn prefetch_does_not_change_results() {
    let (p, cfg) = small();
    let root = RngStream::from_seed(5);
    let a = train(&root, &p, cfg.clone(), &opts(10, LossKind::ImageMse, false)).unwrap();
    let b = train(&root, &p, cfg, &opts(10, LossKind::ImageMse, true)).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn observer_sees_every_step() {
    let (p, cfg) = small();
    let mut seen = Vec::new();
    let out = train_with(
        &RngStream::from_seed(2),
        &p,
        cfg,
        &opts(5, LossKind::Dice, false),
        |s, row| seen.push((s.train.iteration, row.iteration)),
    )
    .unwrap();
    assert_eq!(seen, (0..5).map(|i| (i + 1, i)).collect::<Vec<_>>());
    assert!(out
        .trace
        .iter()
        .all(|r| r.lr == 1e-4 && r.total.is_finite()));
}

#[test]
fn tiny_frozen_pair_loss_decreases() {
    let mut p = default_params(&[16, 16]);
    p.j = 4;
    let cfg = UNetConfig {
        levels: 2,
        width: 4,
        ..UNetConfig::desk()
    };
    let sample = synth_sample(&mut RngStream::from_seed(8), &p, LossKind::Dice).unwrap();
    let settings = TrainSettings {
        lambda_reg: p.lambda_reg,
        ..TrainSettings::default()
    };
    let mut st = NetState::init(cfg, settings, &mut RngStream::from_seed(9)).unwrap();
    let losses: Vec<f64> = (0..200)
        .map(|_| train_step(&mut st, &sample, LossKind::Dice).unwrap().total)
        .collect();
    let window = |r: std::ops::Range<usize>| losses[r].iter().sum::<f64>() / 50.0;
    assert!(window(150..200) < window(0..50), "{losses:?}");
    assert!(losses[199] < losses[0]);
}

//! Engine contracts checked through the public API on small synthetic pairs.

use elastoreg_core::engine::{
    pair_loss, pair_loss_and_gradients, register, train_population, train_single_pair, LossConfig,
    OptimizerKind, PairExtras,
};
use elastoreg_core::network::{init_model, Arch};
use elastoreg_core::synthdata::{generate, Scenario};
use elastoreg_core::{PointSet, TrainConfig};

fn subject(index: usize) -> (PointSet, PointSet) {
    let (s, t, _) = generate(&Scenario::population_subject(index, 3, 24)).unwrap();
    (s, t)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        arch: Arch::micro(),
        steps: 6,
        epochs: 3,
        zero_init_heads: false,
        seed: 17,
        ..Default::default()
    }
}

#[test]
fn one_full_batch_step_descends_along_the_mean_gradient() {
    let subjects: Vec<_> = (0..3).map(subject).collect();
    let mut cfg = small_config();
    cfg.epochs = 1;
    cfg.subjects_per_step = 3;
    cfg.optimizer.kind = OptimizerKind::Sgd;
    cfg.optimizer.lr = 1e-7;
    let trained = train_population(&subjects, &cfg).unwrap().model;

    let start = init_model(cfg.seed, &cfg.arch).unwrap();
    let lc = cfg.loss_config();
    let mut mean = start.params.zeros_like();
    for (s, t) in &subjects {
        mean.accumulate(
            &pair_loss_and_gradients(&start, s, t, &lc, &PairExtras::default())
                .unwrap()
                .1,
        );
    }
    mean.scale(1.0 / 3.0);
    for ((before, after), g) in start
        .params
        .slots()
        .iter()
        .zip(trained.params.slots())
        .zip(mean.iter())
    {
        for ((b, a), g) in before.value.iter().zip(after.value.iter()).zip(g.iter()) {
            let expected = b - cfg.optimizer.lr * g;
            assert!(
                (a - expected).abs() <= 1e-12 * expected.abs().max(1e-3),
                "{}: {a} vs {expected}",
                before.name
            );
        }
    }
}

#[test]
fn epoch_loss_is_the_mean_of_subject_losses() {
    let subjects: Vec<_> = (0..4).map(subject).collect();
    let mut cfg = small_config();
    cfg.epochs = 1;
    cfg.subjects_per_step = 4;
    let result = train_population(&subjects, &cfg).unwrap();
    let start = init_model(cfg.seed, &cfg.arch).unwrap();
    let losses: Vec<f64> = subjects
        .iter()
        .map(|(s, t)| {
            pair_loss(&start, s, t, &cfg.loss_config(), &PairExtras::default())
                .unwrap()
                .total
        })
        .collect();
    let mean = losses.iter().sum::<f64>() / 4.0;
    let got = result.epochs[0].mean_loss.total;
    assert!((got - mean).abs() <= 1e-10 * mean, "{got} vs {mean}");
}

#[test]
fn identical_subjects_reduce_to_single_pair_training() {
    let pair = subject(0);
    let mut cfg = small_config();
    cfg.epochs = 4;
    let pop = train_population(&[pair.clone(), pair.clone()], &cfg).unwrap();
    let mut single_cfg = cfg.clone();
    single_cfg.steps = 8;
    let single = train_single_pair(&pair.0, &pair.1, &single_cfg, &PairExtras::default()).unwrap();
    let pop_loss = pair_loss(
        &pop.model,
        &pair.0,
        &pair.1,
        &cfg.loss_config(),
        &PairExtras::default(),
    )
    .unwrap()
    .total;
    let single_loss = single.metrics.pair_loss.total;
    assert!(
        (pop_loss - single_loss).abs() <= 0.1 * single_loss,
        "{pop_loss} vs {single_loss}"
    );
}

#[test]
fn population_needs_two_subjects() {
    assert!(train_population(&[subject(0)], &small_config()).is_err());
}

#[test]
fn register_is_pure_and_zero_heads_leave_source_in_place() {
    let (s, t) = subject(1);
    let lc: LossConfig = small_config().loss_config();
    let model = init_model(2, &Arch::micro()).unwrap();
    let a = register(&model, &s, &t, &lc, &PairExtras::default()).unwrap();
    let b = register(&model, &s, &t, &lc, &PairExtras::default()).unwrap();
    assert_eq!(a, b);
    let zero = model.with_zero_heads();
    let r = register(&zero, &s, &t, &lc, &PairExtras::default()).unwrap();
    assert_eq!(r.warped_points.points, s.points);
    assert!(r.loss_history.is_empty());
}

#[test]
fn loss_history_is_seed_deterministic() {
    let (s, t) = subject(2);
    let cfg = small_config();
    let a = train_single_pair(&s, &t, &cfg, &PairExtras::default()).unwrap();
    let b = train_single_pair(&s, &t, &cfg, &PairExtras::default()).unwrap();
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.loss_history.len(), cfg.steps);
    let mut other = cfg.clone();
    other.seed += 1;
    let c = train_single_pair(&s, &t, &other, &PairExtras::default()).unwrap();
    assert_ne!(a.loss_history, c.loss_history);
}

#[test]
fn doubling_w_doubles_the_alignment_contribution() {
    let (s, t) = subject(3);
    let model = init_model(4, &Arch::micro()).unwrap();
    let mut lc = small_config().loss_config();
    let one = pair_loss(&model, &s, &t, &lc, &PairExtras::default()).unwrap();
    lc.weight_w *= 2.0;
    let two = pair_loss(&model, &s, &t, &lc, &PairExtras::default()).unwrap();
    let pde = one.l_s + one.l_c + one.l_e;
    assert_eq!(two.l_r, one.l_r);
    assert!(((two.total - pde) - 2.0 * (one.total - pde)).abs() <= 1e-12 * one.total);
}

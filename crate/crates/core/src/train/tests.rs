use super::*;
use crate::checkpoint::save_checkpoint;
use proptest::prelude::*;

fn small_task() -> (ToyTask, MotionDataset) {
    let mut t = ToyTask::motion(1);
    t.train = 64;
    t.val = 32;
    let d = motion_dataset(&t).unwrap();
    (t, d)
}

#[test]
fn composite_loss_examples() {
    let zero = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        latency_weight: 0.0,
    };
    assert_eq!(composite_loss(0.7, 12.0, 3.0, &zero).unwrap(), 0.7);
    let cfg = LossConfig {
        lambda1: 0.01,
        lambda2: 0.02,
        latency_weight: 0.0,
    };
    assert!((composite_loss(1.0, 10.0, 5.0, &cfg).unwrap() - 1.2).abs() < 1e-6);
    assert_eq!(composite_loss(0.4, 0.0, 0.0, &cfg).unwrap(), 0.4);
}

#[test]
fn composite_loss_names_the_non_finite_term() {
    let cfg = LossConfig::default();
    match composite_loss(1.0, f32::NAN, 0.0, &cfg) {
        Err(Error::Numeric(term)) => assert_eq!(term, "token surrogate"),
        other => panic!("{other:?}"),
    }
    match composite_loss(1.0, 0.0, f32::INFINITY, &cfg) {
        Err(Error::Numeric(term)) => assert_eq!(term, "gate surrogate"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn negative_lambda_rejected() {
    let cfg = LossConfig {
        lambda1: -0.1,
        ..LossConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn report_total_is_the_weighted_sum_exactly() {
    let (_, d) = small_task();
    let model = JointToyModel::new(32, 8, 2).unwrap();
    let cfg = TrainConfig::default();
    let batch: Vec<&MotionSample> = d.train[..4].iter().collect();
    let mut g = Graph::inference();
    let (loss, r) = model.loss(&mut g, &batch, &cfg).unwrap();
    assert_eq!(r.total, r.task_loss + cfg.loss.lambda1 * r.token_l0_relaxed + cfg.loss.lambda2 * r.gate_l0_relaxed);
    assert_eq!(g.value(loss).item(), r.total);
    assert!(r.token_l0_relaxed >= 0.0 && r.token_l0_relaxed <= model.patches() as f32);
    assert!(r.gate_l0_relaxed >= 0.0 && r.gate_l0_relaxed <= JointToyModel::HIDDEN as f32);
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let (_, d) = small_task();
    let mut model = JointToyModel::new(32, 8, 3).unwrap();
    let before = save_checkpoint(&model.state_dict()).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        steps: 3,
        ..TrainConfig::default()
    };
    train(&mut model, &d.train, &cfg).unwrap();
    assert_eq!(save_checkpoint(&model.state_dict()).unwrap(), before);
}

#[test]
fn training_is_deterministic() {
    let (_, d) = small_task();
    let cfg = TrainConfig {
        steps: 10,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = JointToyModel::new(32, 8, 4).unwrap();
        let rec = train(&mut m, &d.train, &cfg).unwrap();
        (save_checkpoint(&m.state_dict()).unwrap(), rec)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn divergence_reports_the_step() {
    let (_, d) = small_task();
    let mut model = JointToyModel::new(32, 8, 5).unwrap();
    model.head.weight.data_mut()[0] = f32::NAN;
    let batch: Vec<&MotionSample> = d.train[..2].iter().collect();
    match train_step(&mut model, &batch, &TrainConfig::default(), 17) {
        Err(Error::Training { step, .. }) => assert_eq!(step, 17),
        other => panic!("{other:?}"),
    }
}

#[test]
fn motion_task_loss_halves_in_200_steps() {
    let task = ToyTask::motion(0);
    let d = motion_dataset(&task).unwrap();
    let mut model = JointToyModel::new(32, 8, 0).unwrap();
    let cfg = TrainConfig {
        loss: LossConfig {
            lambda1: 0.0,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let rec = train(&mut model, &d.train, &cfg).unwrap();
    let drop = loss_drop(&rec).unwrap();
    let acc = evaluate(&model, &d.val, 1.0).unwrap().accuracy;
    assert!(drop >= 0.5, "loss drop {drop}");
    assert!(acc > 0.5, "val accuracy {acc}");
}

#[test]
fn tau_policy_step_lowers_its_loss() {
    let mut rng = crate::rng::Rng::new(8);
    let mut policy = TauPolicy::new(&mut rng);
    let cos: Vec<f32> = (0..32).map(|_| rng.range(0.5, 1.0)).collect();
    let first = tau_policy_step(&mut policy, &cos, 0.5, 0.2, 0.05).unwrap();
    let mut last = first;
    for _ in 0..50 {
        last = tau_policy_step(&mut policy, &cos, 0.5, 0.2, 0.05).unwrap();
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn echo_task_learns() {
    let task = ToyTask::echo(2);
    let (train_set, _) = echo_dataset(&task, 12).unwrap();
    let mut rng = crate::rng::Rng::new(2);
    let mut dec = MicroDecoder::new("echo", 12, task.size, 16, 1, &mut rng);
    let first = echo_step(&mut dec, &train_set[..8], 0.1).unwrap();
    let mut last = first;
    for k in 1..60 {
        let s = (k * 8) % (train_set.len() - 8);
        last = echo_step(&mut dec, &train_set[s..s + 8], 0.1).unwrap();
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_loss_is_linear_in_lambdas(task in 0.0f32..5.0, tok in 0.0f32..50.0, gate in 0.0f32..20.0,
                                           l1 in 0.0f32..1.0, l2 in 0.0f32..1.0) {
        let at = |l1: f32, l2: f32| composite_loss(task, tok, gate, &LossConfig { lambda1: l1, lambda2: l2, latency_weight: 0.0 }).unwrap() as f64;
        let (base, d1, d2) = (at(0.0, 0.0), at(1.0, 0.0) - at(0.0, 0.0), at(0.0, 1.0) - at(0.0, 0.0));
        let lin = base + l1 as f64 * d1 + l2 as f64 * d2;
        prop_assert!((at(l1, l2) - lin).abs() <= 1e-5 * (1.0 + lin.abs()));
    }
}


mod common;

use common::random_demo;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use teamtraj::autodiff::Graph;
use teamtraj::data::{generate_synthetic, split_by_index, Demonstration, Scenario, SyntheticSpec};
use teamtraj::model::{sidecar_path, ModelConfig, PredictionTask, TrainedModel};
use teamtraj::optim::Adam;
use teamtraj::tcn::TcnConfig;
use teamtraj::train::{batch_gradient, train};
use teamtraj::{Error, Execution};

fn small(agents: usize) -> ModelConfig {
    ModelConfig {
        agents,
        embed_dim: 8,
        tcn: TcnConfig {
            levels: 2,
            kernel_size: 3,
            channels: 8,
            dropout: 0.1,
        },
        learning_rate: 5e-3,
        max_epochs: 5,
        ..ModelConfig::default()
    }
}

fn leader_follower(n: usize, frames: usize, seed: u64) -> Vec<Demonstration> {
    let spec = SyntheticSpec {
        agents: 5,
        frames,
        ..SyntheticSpec::basketball(Scenario::LeaderFollower, n, seed)
    };
    generate_synthetic(&spec).unwrap()
}

#[test]
fn single_demo_overfits() {
    let demo = leader_follower(1, 20, 3);
    let cfg = ModelConfig {
        max_epochs: 200,
        patience: 1000,
        ..small(5)
    };
    let out = train(&demo, &[], &cfg).unwrap();
    let first = out.history.records[0].train_loss;
    let last = out.history.records.last().unwrap().train_loss;
    assert!(last < 0.1 * first, "first {first}, last {last}");
}

#[test]
fn leader_follower_validation_loss_is_positive_and_finite() {
    let demos = leader_follower(12, 20, 4);
    let split = split_by_index(&demos, 8, 4);
    let out = train(&split.train, &split.val, &small(5)).unwrap();
    assert!(out.best_val_loss > 0.0 && out.best_val_loss.is_finite());
    assert!(out.best.params.is_finite());
    assert_eq!(out.history.records[out.best_epoch].val_loss, out.best_val_loss);
}

#[test]
fn constant_schedule_when_decay_is_one() {
    let demos = leader_follower(2, 10, 5);
    let cfg = ModelConfig {
        lr_decay: 1.0,
        learning_rate: 0.002,
        max_epochs: 4,
        ..small(5)
    };
    let out = train(&demos, &[], &cfg).unwrap();
    assert!(out.history.records.iter().all(|r| r.lr == 0.002));
}

#[test]
fn early_stopping_keeps_best_snapshot() {
    let demos = leader_follower(6, 12, 6);
    let split = split_by_index(&demos, 4, 2);
    let cfg = ModelConfig {
        learning_rate: 0.5,
        max_epochs: 60,
        patience: 3,
        ..small(5)
    };
    let out = train(&split.train, &split.val, &cfg).unwrap();
    let n = out.history.records.len();
    if out.stopped_early {
        assert_eq!(n, out.best_epoch + 4);
    }
    let best = teamtraj::train::mean_loss(&out.best, &split.val).unwrap();
    assert_eq!(best, out.best_val_loss);
}

#[test]
fn exploding_run_reports_numerical_failure() {
    let demos = leader_follower(2, 10, 7);
    let cfg = ModelConfig {
        learning_rate: 1e300,
        max_epochs: 5,
        ..small(5)
    };
    match train(&demos, &[], &cfg) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("epoch"), "{msg}"),
        other => panic!("expected numerical failure, got {other:?}"),
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let demos = leader_follower(10, 15, 8);
    let split = split_by_index(&demos, 7, 3);
    let a = train(&split.train, &split.val, &small(5)).unwrap();
    let b = train(&split.train, &split.val, &small(5)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.params, b.best.params);
}

#[test]
fn sequential_and_parallel_execution_agree() {
    let demos = leader_follower(10, 15, 9);
    let seq = ModelConfig {
        execution: Execution::Sequential,
        ..small(5)
    };
    let par = ModelConfig {
        execution: Execution::Parallel,
        ..small(5)
    };
    let a = train(&demos, &[], &seq).unwrap();
    let b = train(&demos, &[], &par).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.params, b.best.params);
}

#[test]
fn batch_gradient_is_mean_of_demo_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let demos: Vec<_> = (0..3).map(|i| random_demo(&format!("d{i}"), 3, 6, &mut rng)).collect();
    let cfg = ModelConfig {
        tcn: TcnConfig {
            dropout: 0.0,
            ..small(3).tcn
        },
        ..small(3)
    };
    let model = TrainedModel::init(cfg).unwrap();
    let (loss, grad) = batch_gradient(&model, &demos, &[0, 1, 2], 0).unwrap();
    let parts: Vec<_> = demos
        .iter()
        .map(|d| model.loss_and_grad(d, true, &mut rng).unwrap())
        .collect();
    let mean_loss = parts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    assert!((loss - mean_loss).abs() < 1e-15);
    let mut expected = Vec::new();
    parts[0].1.for_each(|_, t| expected.push(t.data().to_vec()));
    for p in &parts[1..] {
        let mut i = 0;
        p.1.for_each(|_, t| {
            expected[i].iter_mut().zip(t.data()).for_each(|(e, v)| *e += v);
            i += 1;
        });
    }
    let mut i = 0;
    grad.for_each(|_, t| {
        for (a, e) in t.data().iter().zip(&expected[i]) {
            assert!((a - e / 3.0).abs() < 1e-14);
        }
        i += 1;
    });
}

#[test]
fn weight_norm_direction_stays_unit_after_steps() {
    let demos = leader_follower(4, 12, 11);
    let mut model = TrainedModel::init(small(5)).unwrap();
    let mut adam = Adam::default();
    for step in 0..5 {
        let (_, grad) = batch_gradient(&model, &demos, &[0, 1, 2, 3], step).unwrap();
        adam.step(&mut model.params, &grad, 0.01);
        for block in &model.params.tcn.blocks {
            for conv in [&block.conv1, &block.conv2] {
                let mut g = Graph::new();
                let v = g.constant(conv.v.clone());
                let gain = g.constant(conv.g.clone());
                let w = g.weight_norm(v, gain).unwrap();
                let inner = conv.v.len() / conv.g.len();
                for (row, gv) in g.value(w).data().chunks(inner).zip(conv.g.data()) {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((norm / gv.abs() - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn uniform_variant_never_moves_attention_vector() {
    let demos = leader_follower(4, 12, 12);
    let out = train(&demos, &[], &small(5).uniform_variant()).unwrap();
    assert!(out.best.params.spatial.a.data().iter().all(|v| *v == 0.0));
}

#[test]
fn rollout_never_reads_future_truth() {
    let demo = &leader_follower(1, 30, 13)[0];
    let model = TrainedModel::init(small(5)).unwrap();
    let task = PredictionTask::from_demo(demo, 20, 10).unwrap();
    let pred = model.rollout(&task).unwrap();
    let mut tampered = demo.clone();
    for f in &mut tampered.frames[20..] {
        for s in &mut f.states {
            s.x = -s.x;
            s.y = 0.9;
        }
    }
    let task2 = PredictionTask::from_demo(&tampered, 20, 10).unwrap();
    assert_ne!(task.ground_truth, task2.ground_truth);
    assert_eq!(pred, model.rollout(&task2).unwrap());
    let blind = PredictionTask {
        ground_truth: None,
        ..task
    };
    assert_eq!(pred, model.rollout(&blind).unwrap());
}

#[test]
fn first_rollout_step_is_one_step_prediction() {
    let demo = &leader_follower(1, 12, 14)[0];
    let model = TrainedModel::init(small(5)).unwrap();
    let task = PredictionTask::from_demo(demo, 8, 4).unwrap();
    let pred = model.rollout(&task).unwrap();
    let next = model.predict_next(&task.observed).unwrap();
    assert_eq!(pred[0].flat(), next.column(7));
    let short = PredictionTask {
        horizon: 1,
        ..task.clone()
    };
    assert_eq!(model.rollout(&short).unwrap()[0], pred[0]);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tjf");
    let demos = leader_follower(3, 12, 15);
    let mut cfg = small(5);
    cfg.spatial.velocity_features = true;
    let model = train(&demos, &[], &cfg).unwrap().best;
    model.save(&path).unwrap();
    assert!(sidecar_path(&path).exists());
    let back = TrainedModel::load(&path).unwrap();
    assert_eq!(back, model);
    let task = PredictionTask::from_demo(&demos[0], 8, 4).unwrap();
    assert_eq!(back.rollout(&task).unwrap(), model.rollout(&task).unwrap());
}

#[test]
fn checkpoint_with_foreign_config_is_incompatible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tjf");
    TrainedModel::init(small(5)).unwrap().save(&path).unwrap();
    let other = small(7).to_kv().render();
    std::fs::write(sidecar_path(&path), other).unwrap();
    assert!(matches!(TrainedModel::load(&path), Err(Error::Incompatible(_))));
}

#[test]
fn model_rejects_demo_with_other_agent_count() {
    let model = TrainedModel::init(small(5)).unwrap();
    let demo = random_demo("x", 4, 8, &mut ChaCha8Rng::seed_from_u64(0));
    let task = PredictionTask::from_demo(&demo, 5, 3).unwrap();
    assert!(matches!(model.rollout(&task), Err(Error::Incompatible(_))));
}

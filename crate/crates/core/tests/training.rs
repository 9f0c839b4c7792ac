use ccl::data::{generate_synthetic, SyntheticConfig};
use ccl::eval::top1_accuracy;
use ccl::gradcheck::random_case;
use ccl::losses::LossConfig;
use ccl::model::{save_checkpoint, ModelParams};
use ccl::trainer::{
    epoch_batches, fit, group_trained, model_dims, objective_values, stream_gradients, train_step, TrainConfig,
};
use ccl::{Dataset64, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset(seed: u64) -> Dataset64 {
    generate_synthetic(&SyntheticConfig {
        num_classes: 4,
        train_per_class: 6,
        test_per_class: 2,
        input_dim: 6,
        audio_dim: 5,
        image_dim: 5,
        semantic_dim: 3,
        frac_high: 0.5,
        frac_weak: 0.25,
        frac_none: 0.25,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        learning_rate: 0.05,
        ..Default::default()
    }
}

fn values(p: &ModelParams<f64>) -> Vec<f64> {
    p.blocks()
        .iter()
        .flat_map(|(_, _, a)| a.weight.data().iter().chain(a.bias.data()).copied().collect::<Vec<_>>())
        .collect()
}

#[test]
fn zero_learning_rate_is_a_null_step() {
    for seed in 0..5 {
        let case = random_case(seed).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            loss: case.loss,
            ..Default::default()
        };
        let (next, _) = train_step(&case.params, &case.batch, &cfg).unwrap();
        assert_eq!(values(&next), values(&case.params));
    }
}

#[test]
fn weight_decay_alone_shrinks_trained_blocks() {
    let case = random_case(4).unwrap();
    // no loss weight anywhere: gradients vanish and only decay remains
    let loss = LossConfig {
        lambda_cls: 0.0,
        ..LossConfig::baseline()
    };
    let cfg = TrainConfig {
        learning_rate: 0.1,
        weight_decay: 0.01,
        loss,
        ..Default::default()
    };
    let (next, _) = train_step(&case.params, &case.batch, &cfg).unwrap();
    let factor = 1.0 - 0.1 * 0.01;
    for ((name, group, before), (_, _, after)) in case.params.blocks().into_iter().zip(next.blocks()) {
        let pairs = before.weight.data().iter().zip(after.weight.data());
        for (&b, &a) in pairs.chain(before.bias.data().iter().zip(after.bias.data())) {
            if group_trained(group, &loss) {
                assert!((a - b * factor).abs() <= 1e-15 * b.abs().max(1.0), "{name}: {a} vs {}", b * factor);
            } else {
                assert_eq!(a, b, "{name} should be frozen");
            }
        }
    }
}

#[test]
fn one_step_matches_hand_stepped_oracle() {
    for seed in [0, 1, 2, 5] {
        let case = random_case(seed).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            weight_decay: 0.001,
            loss: case.loss,
            ..Default::default()
        };
        let (next, _) = train_step(&case.params, &case.batch, &cfg).unwrap();

        // oracle: central differences of each stream objective, then plain SGD
        let h = 1e-6;
        let mut expected = case.params.clone();
        let names: Vec<_> = case.params.blocks().iter().map(|(n, g, _)| (*n, *g)).collect();
        for (b, &(_, group)) in names.iter().enumerate() {
            if !group_trained(group, &cfg.loss) {
                continue;
            }
            let stream = if group.in_video_stream() { 1 } else { 2 };
            for bias in [false, true] {
                let len = {
                    let a = case.params.blocks()[b].2;
                    if bias { a.bias.len() } else { a.weight.len() }
                };
                for k in 0..len {
                    let shifted = |d: f64| {
                        let mut p = case.params.clone();
                        let mut i = 0;
                        p.for_each_block_mut(|_, _, a| {
                            if i == b {
                                let m = if bias { &mut a.bias } else { &mut a.weight };
                                m.data_mut()[k] += d;
                            }
                            i += 1;
                        });
                        objective_values(&p, &case.batch, &cfg.loss).unwrap()[stream]
                    };
                    let g = (shifted(h) - shifted(-h)) / (2.0 * h);
                    let mut i = 0;
                    expected.for_each_block_mut(|_, _, a| {
                        if i == b {
                            let m = if bias { &mut a.bias } else { &mut a.weight };
                            let p = &mut m.data_mut()[k];
                            *p -= cfg.learning_rate * (g + cfg.weight_decay * *p);
                        }
                        i += 1;
                    });
                }
            }
        }
        for (a, e) in values(&next).iter().zip(values(&expected)) {
            assert!((a - e).abs() <= 1e-6, "seed {seed}: {a} vs {e}");
        }
    }
}

#[test]
fn fit_is_deterministic() {
    let ds = small_dataset(3);
    let cfg = small_config();
    let (p1, h1) = fit(&ds, &cfg).unwrap();
    let (p2, h2) = fit(&ds, &cfg).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(h1.to_jsonl(), h2.to_jsonl());
    assert_eq!(values(&p1), values(&p2));

    let dir = tempfile::tempdir().unwrap();
    let a = save_checkpoint(&p1, dir.path().join("a"), false).unwrap();
    let b = save_checkpoint(&p2, dir.path().join("b"), false).unwrap();
    for name in std::fs::read_dir(dir.path().join("a")).unwrap() {
        let name = name.unwrap().file_name();
        let x = std::fs::read(dir.path().join("a").join(&name)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(x, y, "{name:?} differs");
    }
    assert_ne!(a, b);
}

#[test]
fn zero_iterations_return_the_initialisation() {
    let ds = small_dataset(1);
    let cfg = TrainConfig {
        max_iter: Some(0),
        ..small_config()
    };
    let (params, history) = fit(&ds, &cfg).unwrap();
    assert!(history.iterations.is_empty());
    let init = ModelParams::init(model_dims(&ds, &cfg), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    assert_eq!(values(&params), values(&init));
}

#[test]
fn history_indices_are_monotone_and_finite() {
    let ds = small_dataset(2);
    let (_, history) = fit(&ds, &small_config()).unwrap();
    // 24 rows in steps of 8
    assert_eq!(history.iterations.len(), 9);
    for (i, r) in history.iterations.iter().enumerate() {
        assert_eq!(r.iteration, i);
        assert!(r.loss.first_non_finite().is_none());
    }
    assert_eq!(history.epoch_seconds.len(), 3);
}

#[test]
fn separable_data_is_learned() {
    for seed in 0..5 {
        let ds: Dataset64 = generate_synthetic(&SyntheticConfig {
            num_classes: 8,
            noise_scale: 0.1,
            seed,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            seed,
            loss: LossConfig::baseline(),
            ..Default::default()
        };
        let (params, _) = fit(&ds, &cfg).unwrap();
        let acc = top1_accuracy(&params, &ds.train).unwrap();
        assert!(acc >= 0.95, "seed {seed}: train top-1 {acc}");
    }
}

#[test]
fn heads_stay_frozen_without_classification_weight() {
    let ds = small_dataset(5);
    let mut cfg = TrainConfig {
        epochs: 100,
        max_iter: Some(100),
        loss: LossConfig {
            lambda_cls: 0.0,
            ..Default::default()
        },
        ..small_config()
    };
    cfg.model.shared_classifier = false;
    let init = ModelParams::init(model_dims(&ds, &cfg), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let (params, history) = fit(&ds, &cfg).unwrap();
    assert_eq!(history.iterations.len(), 100);
    assert_eq!(params.compose_audio, init.compose_audio);
    assert_eq!(params.compose_image, init.compose_image);
    assert_eq!(params.classifier_audio, init.classifier_audio);
    assert_eq!(params.classifier_image, init.classifier_image);
    assert_ne!(params.student_hidden, init.student_hidden);
}

#[test]
fn contrastive_and_jsd_terms_never_reach_the_heads() {
    for seed in 0..10 {
        let case = random_case(seed).unwrap();
        let loss = LossConfig {
            lambda_cls: 0.0,
            ..case.loss
        };
        let grads = stream_gradients(&case.params, &case.batch, &loss).unwrap();
        for (name, group, block) in grads.composition.blocks() {
            if !group.in_video_stream() {
                assert!(block.weight.data().iter().chain(block.bias.data()).all(|&v| v == 0.0), "{name}");
            }
        }
    }
}

#[test]
fn baseline_training_never_moves_heads() {
    let ds = small_dataset(6);
    let cfg = TrainConfig {
        loss: LossConfig::baseline(),
        ..small_config()
    };
    let init = ModelParams::init(model_dims(&ds, &cfg), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let (params, _) = fit(&ds, &cfg).unwrap();
    assert_eq!(params.compose_audio, init.compose_audio);
    assert_eq!(params.compose_image, init.compose_image);
}

#[test]
fn teacher_tables_are_untouched() {
    let ds = small_dataset(7);
    let before = ds.clone();
    fit(&ds, &small_config()).unwrap();
    assert_eq!(ds, before);
}

#[test]
fn non_finite_input_names_the_term() {
    let mut case = random_case(2).unwrap();
    case.batch.video_inputs.data_mut()[0] = f64::NAN;
    let err = train_step(&case.params, &case.batch, &TrainConfig::default()).unwrap_err();
    match err {
        Error::NonFinite { term } => assert_eq!(term, "ce_v"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn epoch_partition_covers_every_row_once() {
    let order: Vec<usize> = (0..37).rev().collect();
    let batches = epoch_batches(&order, 16);
    assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 5]);
    let mut seen: Vec<usize> = batches.concat();
    seen.sort();
    assert_eq!(seen, (0..37).collect::<Vec<_>>());
    // a lone trailing row joins the previous step
    assert_eq!(epoch_batches(&order[..33], 16).last().unwrap().len(), 17);
}

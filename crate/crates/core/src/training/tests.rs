use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::frontend::{FeatureSequence, Stage};
use crate::model::{FrontendMode, ModelConfig, PenaltyMode};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        n_enc: 2,
        n_dec: 2,
        d_model: 8,
        d_head: 4,
        heads: 2,
        d_ff: 8,
        vocab_size: 7,
        penalty_mode: PenaltyMode::Log,
        max_distance: 8,
        dropout: 0.0,
        ds_init_alpha: 0.5,
        frontend_mode: FrontendMode::Filterbank,
        nafm_d_ff: 8,
        pre_ln: false,
    }
}

fn example(id: usize, frames: usize, target: Vec<usize>, rng: &mut ChaCha8Rng) -> Example {
    let data = (0..frames * 360).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Example {
        id: format!("ex{id}"),
        source: FeatureSequence::new(Stage::Stacked360, data).unwrap(),
        target,
        fbank: None,
    }
}

fn toy_set(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=3);
            let target = (0..len).map(|_| rng.gen_range(3..7)).collect();
            let frames = rng.gen_range(4..=7);
            example(i, frames, target, &mut rng)
        })
        .collect()
}

#[test]
fn mle_examples() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(vec![1, 2, 4]));
    let loss = mle_loss(&mut g, logits, &[3, 1], 0.1).unwrap();
    assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);

    let mut peaked = vec![0.0; 4];
    peaked[2] = 60.0;
    let logits = g.constant(Tensor::new(vec![1, 1, 4], peaked).unwrap());
    let loss = mle_loss(&mut g, logits, &[2], 0.0).unwrap();
    assert!(g.value(loss).item() < 1e-20);

    let logits = g.constant(Tensor::zeros(vec![1, 2, 4]));
    assert!(matches!(mle_loss(&mut g, logits, &[0, 0], 0.1), Err(TensorError::Contract(_))));
}

#[test]
fn mle_ignores_padding_and_matches_hand_value() {
    // logits row [0, ln 3] with gold 1: p = [1/4, 3/4].
    let mut g = Graph::new();
    let l3 = 3f64.ln();
    let logits = g.constant(Tensor::new(vec![1, 2, 2], vec![0.0, l3, 5.0, -2.0]).unwrap());
    let loss = mle_loss(&mut g, logits, &[1, crate::data::PAD], 0.2).unwrap();
    let expected = -(0.9 * (0.75f64).ln() + 0.1 * (0.25f64).ln());
    assert!((g.value(loss).item() - expected).abs() < 1e-12);
}

#[test]
fn schedule_values() {
    let lr = lr_schedule(4000, 256, 4000).unwrap();
    assert!((lr - 9.88e-4).abs() < 1e-6, "{lr}");
    assert!((lr - 1.0 / (256f64.sqrt() * 4000f64.sqrt())).abs() < 1e-15);
    assert!(lr_schedule(1, 256, 4000).unwrap() < lr);
    assert!(lr_schedule(40_000, 256, 4000).unwrap() < lr);
    assert!(lr_schedule(0, 256, 4000).is_err());
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let before = store.clone();
    let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
    adam.step(&mut store, &[Some(&[0.0, 0.0, 0.0])], 0.1).unwrap();
    assert_eq!(store.tensors()[0], before.tensors()[0]);

    let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
    adam.step(&mut store, &[Some(&[3.0, -0.5, 2.0])], 0.01).unwrap();
    let moved: Vec<f64> = store.tensors()[0].data().iter().zip(before.tensors()[0].data()).map(|(a, b)| a - b).collect();
    for (m, sign) in moved.iter().zip([-1.0, 1.0, -1.0]) {
        assert!((m - sign * 0.01).abs() < 1e-9, "{m}");
    }

    let snapshot = store.clone();
    assert!(adam.step(&mut store, &[Some(&[f64::NAN, 0.0, 0.0])], 0.01).is_err());
    assert_eq!(store.tensors()[0], snapshot.tensors()[0]);
    assert_eq!(adam.steps_taken(), 1);
}

#[test]
fn batching_rules() {
    assert_eq!(make_batches(&[40, 40, 40], 100, None), vec![vec![0, 1], vec![2]]);
    let lengths: Vec<usize> = (0..50).map(|i| 1 + (i * 7) % 13).collect();
    let a = make_batches(&lengths, 30, Some(4));
    assert_eq!(a, make_batches(&lengths, 30, Some(4)));
    let mut seen: Vec<usize> = a.iter().flatten().copied().collect();
    seen.sort();
    assert_eq!(seen, (0..50).collect::<Vec<_>>());
    for b in &a {
        let max = b.iter().map(|&i| lengths[i]).max().unwrap();
        assert!(b.len() * max <= 30);
    }
    assert_eq!(make_batches(&[5, 500, 5], 20, None), vec![vec![0, 2], vec![1]]);
}

#[test]
fn batch_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = example(0, 3, vec![4, 5], &mut rng);
    let b = example(1, 5, vec![6], &mut rng);
    let batch = Batch::new(&[&a, &b]).unwrap();
    assert_eq!(batch.u, 3);
    assert_eq!(batch.dec_input, vec![1, 4, 5, 1, 6, 0]);
    assert_eq!(batch.gold, vec![4, 5, 2, 6, 2, 0]);
    assert_eq!(batch.source.frames.shape(), &[2, 5, 360]);
    assert_eq!(batch.source.lengths, vec![3, 5]);
}

fn store_with(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("a", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
    s
}

#[test]
fn averaging_is_exact() {
    let p = store_with(&[0.1, 1.0 / 3.0, -7.25]);
    let q = store_with(&[0.7, 2.0 / 3.0, 1e-3]);
    let same: Vec<CheckpointRecord> = (0..7)
        .map(|s| CheckpointRecord { step: s, dev_score: 1.0, params: p.clone() })
        .collect();
    assert_eq!(average_checkpoints(&same, 7).unwrap().tensors(), p.tensors());

    let two = [
        CheckpointRecord { step: 1, dev_score: 0.5, params: p.clone() },
        CheckpointRecord { step: 2, dev_score: 0.4, params: q.clone() },
    ];
    let avg = average_checkpoints(&two, 2).unwrap();
    let expected: Vec<f64> = p.tensors()[0].data().iter().zip(q.tensors()[0].data()).map(|(a, b)| (a + b) / 2.0).collect();
    assert_eq!(avg.tensors()[0].data(), expected.as_slice());
    // k = 1 picks the lower score; order of the records does not matter.
    let rev = [two[1].clone(), two[0].clone()];
    assert_eq!(average_checkpoints(&two, 1).unwrap().tensors(), q.tensors());
    assert_eq!(average_checkpoints(&rev, 1).unwrap().tensors(), q.tensors());
    // More than available: all of them.
    assert_eq!(average_checkpoints(&two, 10).unwrap().tensors(), avg.tensors());
}

#[test]
fn joint_loss_is_linear_in_lambda() {
    let model = Model::new(tiny_cfg(), 3).unwrap();
    let set = toy_set(4, 1);
    let refs: Vec<&Example> = set.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    let parts = forward_losses(&mut g, &model, &p, &batch, 0.1, true).unwrap();
    assert!(parts.ctc.is_some());
    let at = |g: &mut Graph, l: f64| {
        let v = parts.combine(g, l, 0.0).unwrap();
        g.value(v).item()
    };
    let (j0, j1) = (at(&mut g, 0.0), at(&mut g, 1.0));
    assert_eq!(j0, g.value(parts.mle).item());
    assert_eq!(j1, g.value(parts.ctc.unwrap()).item());
    for l in [0.0, 0.1, 0.3, 0.7, 1.0] {
        assert!((at(&mut g, l) - ((1.0 - l) * j0 + l * j1)).abs() < 1e-6);
        let mut g2 = Graph::new();
        let p2 = model.bind_frozen(&mut g2);
        let direct = joint_loss(&mut g2, &model, &p2, &batch, l, 0.1).unwrap();
        assert!((g2.value(direct).item() - ((1.0 - l) * j0 + l * j1)).abs() < 1e-9);
    }
}

#[test]
fn ctc_term_averages_only_feasible_items() {
    let model = Model::new(tiny_cfg(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ok_a = example(0, 5, vec![3, 4], &mut rng);
    let ok_b = example(1, 6, vec![5], &mut rng);
    // Three identical labels need five frames; two are too few.
    let bad = example(2, 2, vec![4, 4, 4], &mut rng);
    let ctc_of = |items: &[&Example]| {
        let batch = Batch::new(items).unwrap();
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let parts = forward_losses(&mut g, &model, &p, &batch, 0.1, true).unwrap();
        parts.ctc.map(|v| g.value(v).item())
    };
    let a = ctc_of(&[&ok_a]).unwrap();
    let b = ctc_of(&[&ok_b]).unwrap();
    let all = ctc_of(&[&ok_a, &ok_b, &bad]).unwrap();
    assert!((all - (a + b) / 2.0).abs() < 1e-9);
    assert_eq!(ctc_of(&[&bad]), None);
    let batch = Batch::new(&[&bad]).unwrap();
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    let j = joint_loss(&mut g, &model, &p, &batch, 0.3, 0.1).unwrap();
    let mle = {
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let v = joint_loss(&mut g, &model, &p, &batch, 0.0, 0.1).unwrap();
        g.value(v).item()
    };
    assert!((g.value(j).item() - 0.7 * mle).abs() < 1e-12);
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    let model = Model::new(tiny_cfg(), 8).unwrap();
    let set = toy_set(2, 9);
    let refs: Vec<&Example> = set.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    let skip = model.params().id("input_proj.w").unwrap().index();
    let values = model.params().tensors().to_vec();
    let inputs: Vec<Tensor> = values.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, t)| t.clone()).collect();
    let err = grad_check(
        |g, vars| {
            let mut p = Vec::with_capacity(values.len());
            for (i, v) in values.iter().enumerate() {
                p.push(match i.cmp(&skip) {
                    std::cmp::Ordering::Less => vars[i],
                    std::cmp::Ordering::Equal => g.constant(v.clone()),
                    std::cmp::Ordering::Greater => vars[i - 1],
                });
            }
            joint_loss(g, &model, &p, &batch, 0.3, 0.1)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn overfits_a_single_batch() {
    let mut model = Model::new(tiny_cfg(), 1).unwrap();
    let set = toy_set(4, 2);
    let refs: Vec<&Example> = set.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    let mut adam = Adam::new(model.params(), 0.9, 0.98, 1e-9);
    let mut losses = Vec::new();
    for step in 1..=100 {
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let loss = joint_loss(&mut g, &model, &p, &batch, 0.3, 0.1).unwrap();
        losses.push(g.value(loss).item());
        g.backward(loss).unwrap();
        let grads: Vec<Option<&[f64]>> = p.iter().map(|&v| g.grad(v)).collect();
        adam.step(model.params_mut(), &grads, 1e-3 * (step as f64 / 10.0).min(1.0)).unwrap();
    }
    assert!(losses[99] < 0.5 * losses[0], "{} -> {}", losses[0], losses[99]);
    // Smoothed over windows of 10 steps the loss only goes down.
    let windows: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>()).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn training_is_bitwise_reproducible() {
    let set = toy_set(12, 3);
    let (train_set, dev_set) = set.split_at(9);
    let mut cfg = TrainConfig::desk();
    cfg.max_steps = 12;
    cfg.checkpoint_every = 4;
    cfg.keep_best_k = 2;
    cfg.batch_target_tokens = 12;
    cfg.warmup_steps = 4;
    let mut model_cfg = tiny_cfg();
    model_cfg.dropout = 0.1;
    let run = || {
        let mut model = Model::new(model_cfg.clone(), 7).unwrap();
        let mut log = Vec::new();
        let out = train(
            &mut model,
            &cfg,
            train_set,
            dev_set,
            TrainOptions { metrics: Some(&mut log), checkpoint_dir: None },
        )
        .unwrap();
        let mut bytes = Vec::new();
        model.write_checkpoint(&mut bytes).unwrap();
        (bytes, log, out.records)
    };
    let (a, log_a, rec_a) = run();
    let (b, log_b, rec_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(rec_a, rec_b);
    let text = String::from_utf8(log_a).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    assert_eq!(text.lines().count(), 13);
    assert_eq!(rec_a.len(), 3);
}

#[test]
fn config_validation_and_round_trip() {
    let mut cfg = TrainConfig::desk();
    cfg.lambda = 1.5;
    assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { field: "lambda", .. })));
    cfg.lambda = 0.25;
    let text = crate::config::render(&cfg);
    let mut back = TrainConfig::default();
    crate::config::apply(&crate::config::parse_text(&text).unwrap(), &mut [&mut back]).unwrap();
    assert_eq!(back, cfg);
}

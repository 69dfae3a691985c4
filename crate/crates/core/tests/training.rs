mod common;

use common::small_config;
use efr::corpus::{EfrInstance, Emotion};
use efr::demo::shipped;
use efr::model::{TgifConfig, TgifModel};
use efr::taxonomy::{allowed_mask, LabelSpace};
use efr::tensor::Tensor;
use efr::training::{
    binary_cross_entropy, checkpoint_bytes, focal_loss, load_checkpoint, model_from_checkpoint_bytes, save_checkpoint,
    train, CHECKPOINT_MAGIC,
};
use efr::Error;
use proptest::prelude::*;

fn corpus() -> Vec<EfrInstance> {
    shipped::learnability_instances()
        .unwrap()
        .into_iter()
        .take(12)
        .collect()
}

fn quick_config(epochs: usize) -> TgifConfig {
    TgifConfig {
        epochs,
        batch_size: 4,
        ..small_config()
    }
}

fn probs(model: &TgifModel, inst: &EfrInstance) -> Vec<u64> {
    model
        .forward(inst)
        .unwrap()
        .probs
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unmodulated_balanced_focal_is_half_bce(
        p in prop::collection::vec(1e-9f64..1.0 - 1e-9, 12),
        y in prop::collection::vec(any::<bool>(), 12),
        mask in prop::collection::vec(any::<bool>(), 4),
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let p = Tensor::new(vec![3, 4], p).unwrap();
        let y = Tensor::new(vec![3, 4], y.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let focal = focal_loss(&p, &y, &mask, 0.0, 0.5).unwrap();
        let bce = binary_cross_entropy(&p, &y, &mask).unwrap();
        prop_assert!((focal - 0.5 * bce).abs() < 1e-12, "{focal} vs {bce}");
    }

    #[test]
    fn focal_loss_is_non_negative(
        p in prop::collection::vec(0.0f64..=1.0, 8),
        y in prop::collection::vec(any::<bool>(), 8),
        gamma in 0.0f64..5.0,
        alpha in 0.0f64..=1.0,
    ) {
        let p = Tensor::new(vec![2, 4], p).unwrap();
        let y = Tensor::new(vec![2, 4], y.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let loss = focal_loss(&p, &y, &[true; 4], gamma, alpha).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }
}

#[test]
fn perfect_predictions_give_zero_loss() {
    let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!(focal_loss(&p, &p, &[true, true], 2.0, 0.25).unwrap(), 0.0);
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let data = corpus();
    let outcome = train(&data, &data, &quick_config(0), 3).unwrap();
    let fresh = TgifModel::for_training(quick_config(0), &data, 3).unwrap();
    assert!(outcome.log.is_empty());
    assert_eq!(outcome.best_epoch, None);
    assert_eq!(outcome.model.params, fresh.params);
}

#[test]
fn training_is_bit_reproducible_across_thread_counts() {
    let data = corpus();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&data, &data[..4], &quick_config(3), 21).unwrap())
    };
    let a = run(1);
    let b = run(3);
    let log = |o: &efr::training::TrainOutcome| o.log.iter().map(|l| l.to_json_line()).collect::<Vec<_>>();
    assert_eq!(log(&a), log(&b));
    assert_eq!(checkpoint_bytes(&a.model), checkpoint_bytes(&b.model));
    let c = run(1);
    assert_eq!(checkpoint_bytes(&a.model), checkpoint_bytes(&c.model));
}

#[test]
fn never_allowed_labels_keep_their_initial_head_bias() {
    let data: Vec<EfrInstance> = shipped::learnability_instances()
        .unwrap()
        .into_iter()
        .filter(|i| i.target_emotion == Emotion::Joy)
        .collect();
    let outcome = train(&data, &[], &quick_config(4), 2).unwrap();
    let space = &outcome.model.space;
    let mut ever = vec![false; space.dim()];
    for inst in &data {
        let mask = allowed_mask(
            inst.source_emotion,
            inst.target_emotion,
            space,
            outcome.model.config.mask_mode,
        )
        .unwrap();
        for (e, m) in ever.iter_mut().zip(mask) {
            *e |= m;
        }
    }
    assert!(ever.iter().any(|e| !e), "fixture should leave some label unused");
    let fresh = TgifModel::for_training(quick_config(4), &data, 2).unwrap();
    let before = fresh.params.require("head.out.bias").unwrap();
    let after = outcome.model.params.require("head.out.bias").unwrap();
    let w0 = fresh.params.require("head.out.weight").unwrap();
    let w1 = outcome.model.params.require("head.out.weight").unwrap();
    for k in (0..space.dim()).filter(|&k| !ever[k]) {
        assert_eq!(before.data()[k], after.data()[k]);
        for r in 0..w0.rows() {
            assert_eq!(w0.get(r, k), w1.get(r, k));
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let data = corpus();
    let model = train(&data, &[], &quick_config(2), 5).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    for inst in &data {
        assert_eq!(probs(&model, inst), probs(&loaded, inst));
    }
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert!(std::fs::read(&path).unwrap().starts_with(CHECKPOINT_MAGIC));
}

/// Byte offset of the rank field of tensor `name`.
fn rank_offset(bytes: &[u8], name: &str) -> usize {
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as usize;
    let u64_at = |p: usize| u64::from_le_bytes(bytes[p..p + 8].try_into().unwrap()) as usize;
    let mut pos = CHECKPOINT_MAGIC.len() + 4;
    pos += 8 + u64_at(pos);
    let count = u64_at(pos);
    pos += 8;
    for _ in 0..count {
        let len = u32_at(pos);
        let this = std::str::from_utf8(&bytes[pos + 4..pos + 4 + len]).unwrap();
        pos += 4 + len;
        if this == name {
            return pos;
        }
        let rank = u32_at(pos);
        let n: usize = (0..rank).map(|i| u64_at(pos + 4 + 8 * i)).product();
        pos += 4 + 8 * rank + 8 * n;
    }
    panic!("tensor {name} not found");
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let data = corpus();
    let model = TgifModel::for_training(quick_config(0), &data, 1).unwrap();
    let bytes = checkpoint_bytes(&model);

    let mut tampered = bytes.clone();
    let at = rank_offset(&tampered, "fusion.a.weight");
    let (d0, d1) = (at + 4, at + 12);
    let first: [u8; 8] = tampered[d0..d0 + 8].try_into().unwrap();
    let second: [u8; 8] = tampered[d1..d1 + 8].try_into().unwrap();
    tampered[d0..d0 + 8].copy_from_slice(&second);
    tampered[d1..d1 + 8].copy_from_slice(&first);
    let err = model_from_checkpoint_bytes(&tampered).unwrap_err();
    assert!(err.to_string().contains("fusion.a.weight"), "{err}");

    let err = model_from_checkpoint_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");

    let mut longer = bytes.clone();
    longer.push(0);
    assert!(model_from_checkpoint_bytes(&longer).is_err());

    let mut version = bytes.clone();
    version[CHECKPOINT_MAGIC.len()] = 9;
    let err = model_from_checkpoint_bytes(&version).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(model_from_checkpoint_bytes(&magic), Err(Error::Checkpoint(_))));
}

#[test]
fn fine_checkpoint_does_not_serve_a_coarse_evaluation() {
    let data = corpus();
    let model = TgifModel::for_training(quick_config(0), &data, 1).unwrap();
    let err = model.ensure_label_space(&LabelSpace::coarse_defn14()).unwrap_err();
    assert!(err.to_string().contains("label-space mismatch"), "{err}");
    assert!(err.is_validation());
}

#[test]
fn dropout_is_seeded_and_only_active_in_training() {
    let data = corpus();
    let config = TgifConfig {
        dropout: 0.3,
        ..quick_config(2)
    };
    let run = |threads: usize, config: &TgifConfig| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&data, &[], config, 6).unwrap())
    };
    let a = run(1, &config);
    let b = run(2, &config);
    assert_eq!(checkpoint_bytes(&a.model), checkpoint_bytes(&b.model));
    let plain = run(1, &quick_config(2));
    assert_ne!(a.model.params, plain.model.params);
    assert_eq!(probs(&a.model, &data[0]), probs(&a.model, &data[0]));
}

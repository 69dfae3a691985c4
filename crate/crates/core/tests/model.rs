mod common;

use common::{flip_instance, instance, small_config};
use efr::corpus::{EfrInstance, Emotion};
use efr::model::{Module, TgifConfig, TgifModel};
use efr::taxonomy::{allowed_mask, InstigatorLabel, LabelSetup, MaskMode};
use efr::tensor::layers::gru_sequence;
use efr::tensor::{Tape, Tensor};
use efr::training::instance_gradients;
use efr::Error;
use proptest::prelude::*;

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn with_setup(setup: LabelSetup) -> TgifConfig {
    TgifConfig {
        label_setup: setup,
        ..small_config()
    }
}

#[test]
fn disallowed_labels_have_zero_probability_and_gradient() {
    for setup in [LabelSetup::Fine27, LabelSetup::CoarseDefn14] {
        for mode in [MaskMode::Polarity, MaskMode::PairTable] {
            for &source in Emotion::ALL {
                for &target in Emotion::ALL {
                    if source == target {
                        continue;
                    }
                    let mut inst = flip_instance(source, target);
                    // Gold on every label, allowed or not.
                    inst.trigger_flags[2] = true;
                    inst.instigators[2] = InstigatorLabel::ALL.iter().copied().collect();
                    let config = TgifConfig {
                        mask_mode: mode,
                        ..with_setup(setup)
                    };
                    let model = TgifModel::for_training(config, std::slice::from_ref(&inst), 5).unwrap();
                    let mask = allowed_mask(source, target, &model.space, mode).unwrap();
                    let probs = model.forward(&inst).unwrap().probs;
                    let (_, grads) = instance_gradients(&model, &inst).unwrap();
                    let w = &grads["head.out.weight"];
                    let b = &grads["head.out.bias"];
                    let l = model.space.dim();
                    for k in (0..l).filter(|&k| !mask[k]) {
                        for i in 0..inst.len() {
                            assert_eq!(probs.get(i, k).to_bits(), 0, "{setup:?} {source}->{target} p[{i},{k}]");
                        }
                        for r in 0..w.rows() {
                            assert_eq!(w.get(r, k).to_bits(), 0, "{source}->{target} w[{r},{k}]");
                        }
                        assert_eq!(b.data()[k].to_bits(), 0);
                    }
                    assert!((0..l).filter(|&k| mask[k]).all(|k| b.data()[k] != 0.0));
                }
            }
        }
    }
}

fn sample_instance() -> EfrInstance {
    instance(
        "mix",
        &[
            ("Ann", Emotion::Fear),
            ("Bo", Emotion::Neutral),
            ("Cy", Emotion::Joy),
            ("Bo", Emotion::Anger),
            ("Ann", Emotion::Sadness),
            ("Cy", Emotion::Joy),
            ("Ann", Emotion::Joy),
        ],
        &[(3, &[InstigatorLabel::ALL[0]])],
    )
}

#[test]
fn speaker_sequences_match_separate_grus() {
    let inst = sample_instance();
    let model = TgifModel::for_training(small_config(), std::slice::from_ref(&inst), 3).unwrap();
    let mut tape = Tape::with_params(&model.params);
    let out = model.encode_sses(&mut tape, &inst).unwrap();
    let got = tape.value(out).clone();

    let groups = [("Ann", 0), ("Bo", 1), ("Cy", 2)];
    for (speaker, slot) in groups {
        let rows: Vec<usize> = (0..inst.len())
            .filter(|&i| inst.utterances[i].speaker == speaker)
            .collect();
        let onehots: Vec<Vec<f64>> = rows
            .iter()
            .map(|&i| inst.utterances[i].emotion.one_hot().to_vec())
            .collect();
        let mut alone = Tape::with_params(&model.params);
        let x = alone.constant(Tensor::from_rows(&onehots).unwrap());
        let h = gru_sequence(&mut alone, x, &format!("sses.gru{slot}"), model.config.gru_hidden).unwrap();
        for (j, &i) in rows.iter().enumerate() {
            assert_eq!(got.row(i), alone.value(h).row(j), "{speaker} utterance {i}");
        }
    }
}

#[test]
fn renaming_speakers_changes_nothing() {
    let inst = sample_instance();
    let model = TgifModel::for_training(small_config(), std::slice::from_ref(&inst), 8).unwrap();
    let mut renamed = inst.clone();
    for u in renamed.utterances.iter_mut() {
        u.speaker = format!("{}-renamed", u.speaker.to_lowercase());
    }
    renamed.target_speaker = renamed.utterances.last().unwrap().speaker.clone();
    let a = model.forward(&inst).unwrap().probs;
    let b = model.forward(&renamed).unwrap().probs;
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn disabled_modules_neither_read_nor_receive_gradient() {
    let inst = sample_instance();
    let config = TgifConfig {
        enabled_modules: [Module::Gus].into_iter().collect(),
        ..small_config()
    };
    let model = TgifModel::for_training(config, std::slice::from_ref(&inst), 4).unwrap();
    let (_, grads) = instance_gradients(&model, &inst).unwrap();
    for (name, g) in &grads {
        if name.starts_with("ges.") || name.starts_with("sses.") || name.starts_with("gss.") {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    let mut perturbed = TgifModel::new(model.config.clone(), model.space.clone(), model.vocab.clone(), 99).unwrap();
    for (name, t) in perturbed.params.iter_mut() {
        if name.starts_with("gus.") || name.starts_with("fusion.") || name.starts_with("head.") {
            *t = model.params.require(name).unwrap().clone();
        }
    }
    let a = model.forward(&inst).unwrap().probs;
    let b = perturbed.forward(&inst).unwrap().probs;
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn shared_utterances_depend_on_the_target() {
    let turns = [
        ("Ross", Emotion::Fear),
        ("Mona", Emotion::Surprise),
        ("Ross", Emotion::Joy),
        ("Green", Emotion::Anger),
        ("Ross", Emotion::Anger),
    ];
    let first = instance("t1", &turns[..3], &[(1, &[])]);
    let second = instance("t1", &turns, &[]);
    let model = TgifModel::for_training(small_config(), &[first.clone(), second.clone()], 12).unwrap();
    let a = model.forward(&first).unwrap().probs;
    let b = model.forward(&second).unwrap().probs;
    assert_ne!(a.row(1), b.row(1));
}

#[test]
fn too_many_speakers_is_rejected() {
    let turns: Vec<(String, Emotion)> = (0..10)
        .map(|i| (format!("s{i}"), Emotion::ALL[i % 7]))
        .chain([("s0".to_string(), Emotion::Joy)])
        .collect();
    let refs: Vec<(&str, Emotion)> = turns.iter().map(|(s, e)| (s.as_str(), *e)).collect();
    let inst = instance("crowd", &refs, &[]);
    let model = TgifModel::for_training(small_config(), std::slice::from_ref(&inst), 1).unwrap();
    assert!(matches!(model.forward(&inst), Err(Error::Invalid(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn probabilities_are_finite_and_shaped(
        picks in prop::collection::vec((0usize..3, 0usize..7), 1..7),
        last in 0usize..7,
        seed in 0u64..1000,
    ) {
        let mut turns: Vec<(&str, Emotion)> = picks
            .iter()
            .map(|&(s, e)| (["a", "b", "c"][s], Emotion::ALL[e]))
            .collect();
        let speaker = turns[0].0;
        let previous = turns.iter().rev().find(|t| t.0 == speaker).unwrap().1;
        let target = if Emotion::ALL[last] == previous { Emotion::ALL[(last + 1) % 7] } else { Emotion::ALL[last] };
        turns.push((speaker, target));
        let inst = instance("p", &turns, &[]);
        let model = TgifModel::for_training(small_config(), std::slice::from_ref(&inst), seed).unwrap();
        let p = model.forward(&inst).unwrap().probs;
        prop_assert_eq!(p.shape(), &[inst.len(), model.space.dim()][..]);
        prop_assert!(p.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

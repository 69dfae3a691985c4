mod common;

use common::instance;
use efr::corpus::{EfrInstance, Emotion};
use efr::demo::shipped;
use efr::taxonomy::{allowed_mask, InstigatorLabel, LabelSpace, MaskMode, COUNT_MERGE_THRESHOLD, OTHER_LABEL};
use efr::Error;
use proptest::prelude::*;

/// `copies` two-turn instances whose first utterance carries `labels`.
fn labelled(labels: &[InstigatorLabel], copies: usize) -> Vec<EfrInstance> {
    (0..copies)
        .map(|i| {
            instance(
                &format!("c{i}"),
                &[("a", Emotion::Fear), ("a", Emotion::Joy)],
                &[(0, labels)],
            )
        })
        .collect()
}

#[test]
fn all_frequent_labels_drop_the_empty_other_class() {
    let space = LabelSpace::count_based(&labelled(InstigatorLabel::ALL, 300)).unwrap();
    assert_eq!(space.dim(), 27);
    assert!(!space.labels().iter().any(|l| l == OTHER_LABEL));
}

#[test]
fn one_frequent_label_leaves_it_and_other() {
    let annoyance = InstigatorLabel::ALL
        .iter()
        .copied()
        .find(|l| l.as_str() == "annoyance")
        .unwrap();
    let rare: Vec<InstigatorLabel> = InstigatorLabel::ALL
        .iter()
        .copied()
        .filter(|&l| l != annoyance)
        .collect();
    let mut data = labelled(&[annoyance], COUNT_MERGE_THRESHOLD as usize);
    data.extend(labelled(&rare, COUNT_MERGE_THRESHOLD as usize - 1));
    let space = LabelSpace::count_based(&data).unwrap();
    assert_eq!(space.labels(), ["annoyance".to_string(), OTHER_LABEL.to_string()]);
}

#[test]
fn empty_training_set_is_rejected() {
    assert!(matches!(LabelSpace::count_based(&[]), Err(Error::Invalid(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kept_labels_match_a_direct_count(picks in prop::collection::vec(prop::collection::vec(0usize..27, 0..4), 1..40), threshold in 1u64..6) {
        let data: Vec<EfrInstance> = picks
            .iter()
            .map(|p| {
                let set: Vec<InstigatorLabel> = p.iter().map(|&k| InstigatorLabel::ALL[k]).collect();
                labelled(&set, 1).remove(0)
            })
            .collect();
        let mut counts = [0u64; 27];
        for p in &picks {
            let distinct: std::collections::BTreeSet<usize> = p.iter().copied().collect();
            for k in distinct {
                counts[k] += 1;
            }
        }
        let kept: Vec<String> = (0..27).filter(|&k| counts[k] >= threshold).map(|k| InstigatorLabel::ALL[k].as_str().to_string()).collect();
        let space = LabelSpace::count_based_with_threshold(&data, threshold).unwrap();
        let mut expected = kept.clone();
        if kept.len() < 27 {
            expected.push(OTHER_LABEL.to_string());
        }
        prop_assert_eq!(space.labels(), &expected[..]);
        for (k, label) in InstigatorLabel::ALL.iter().enumerate() {
            let class = space.label(space.index_of_fine(*label));
            let own = counts[k] >= threshold;
            prop_assert_eq!(class == label.as_str(), own);
        }
    }
}

#[test]
fn shipped_gold_labels_are_allowed_by_their_polarity_masks() {
    let space = LabelSpace::fine27();
    for inst in shipped::learnability_instances().unwrap() {
        let mask = allowed_mask(inst.source_emotion, inst.target_emotion, &space, MaskMode::Polarity).unwrap();
        for labels in &inst.instigators {
            for l in labels {
                assert!(mask[l.index()], "{} {l:?}", inst.instance_id);
            }
        }
    }
}

#[test]
fn every_label_is_allowed_somewhere() {
    let space = LabelSpace::fine27();
    let mut ever = [false; 27];
    for &s in Emotion::ALL {
        for &t in Emotion::ALL {
            if s != t {
                let mask = allowed_mask(s, t, &space, MaskMode::Polarity).unwrap();
                for (e, m) in ever.iter_mut().zip(mask) {
                    *e |= m;
                }
            }
        }
    }
    assert!(ever.iter().all(|&e| e));
}

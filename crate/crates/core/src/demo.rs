//! Rule-generated corpora that ship with the crate, so every workflow can run
//! offline.
//!
//! * The *learnability* corpus: 64 dialogues that each flip exactly once, at
//!   the last utterance. Trigger utterances carry one cue word per instigator
//!   (the label name itself); labels are drawn from the polarity-allowed set
//!   of the flip. Other utterances hold filler words only.
//! * The *emotion-determined* corpus: filler text carries no signal. An
//!   utterance is a trigger when its emotion differs from the previous
//!   utterance's, and its single instigator is an ambiguous-polarity label
//!   picked by the emotion bigram, so only the emotion encoders can
//!   recover it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    annotation_to_line, dialogue_to_line, instance_to_line, parse_annotations_str, parse_dialogues_str,
    parse_instances_str, AnnotationFile, AnnotationRecord, Dialogue, EfrInstance, Emotion, Utterance,
};
use crate::error::{Error, Result};
use crate::instances::{build_instances, instance_id};
use crate::taxonomy::{label_polarity, polarity_allowed, InstigatorLabel, Polarity};

pub const DEMO_SEED: u64 = 2024;
pub const LEARNABILITY_DIALOGUES: usize = 64;
pub const EMOTION_TRAIN: usize = 160;
pub const EMOTION_DEV: usize = 64;

const SPEAKERS: [&str; 6] = ["Ross", "Rachel", "Monica", "Chandler", "Joey", "Phoebe"];

const FILLER: [&str; 40] = [
    "yeah",
    "okay",
    "so",
    "well",
    "the",
    "coffee",
    "apartment",
    "we",
    "you",
    "i",
    "know",
    "think",
    "really",
    "just",
    "maybe",
    "tonight",
    "again",
    "there",
    "here",
    "what",
    "about",
    "that",
    "this",
    "guy",
    "thing",
    "right",
    "sure",
    "later",
    "call",
    "said",
    "going",
    "out",
    "with",
    "her",
    "him",
    "them",
    "now",
    "then",
    "look",
    "hey",
];

fn filler(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<String> {
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| FILLER.choose(rng).expect("non-empty").to_string())
        .collect()
}

fn random_other(rng: &mut ChaCha8Rng, not: Emotion) -> Emotion {
    loop {
        let e = *Emotion::ALL.choose(rng).expect("non-empty");
        if e != not {
            return e;
        }
    }
}

/// Dialogues and gold annotations of the learnability corpus.
pub fn learnability_dialogues(seed: u64) -> Result<(Vec<Dialogue>, AnnotationFile)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dialogues = Vec::new();
    let mut records = Vec::new();
    for d in 0..LEARNABILITY_DIALOGUES {
        let n_speakers = rng.gen_range(2..=3);
        let mut cast: Vec<&str> = SPEAKERS.to_vec();
        cast.shuffle(&mut rng);
        cast.truncate(n_speakers);
        let t = rng.gen_range(3..=6);
        let mut speakers: Vec<&str> = (0..t - 1).map(|_| *cast.choose(&mut rng).expect("cast")).collect();
        speakers[0] = cast[0];
        let target_speaker = speakers[rng.gen_range(0..t - 1)];
        speakers.push(target_speaker);
        let base: BTreeMap<&str, Emotion> = cast
            .iter()
            .map(|&s| (s, *Emotion::ALL.choose(&mut rng).expect("emotions")))
            .collect();
        let source = base[target_speaker];
        let target = random_other(&mut rng, source);
        let allowed: Vec<InstigatorLabel> = polarity_allowed(source, target)?.into_iter().collect();
        let n_triggers = rng.gen_range(1..=2);
        let mut positions: Vec<usize> = (0..t).collect();
        positions.shuffle(&mut rng);
        let trigger_set: BTreeSet<usize> = positions[..n_triggers].iter().copied().collect();
        let mut instigators = BTreeMap::new();
        let mut utterances = Vec::with_capacity(t);
        for (i, &speaker) in speakers.iter().enumerate() {
            let mut words = filler(&mut rng, 3, 6);
            if trigger_set.contains(&i) {
                let k = if rng.gen_bool(0.3) { 2 } else { 1 };
                let labels: BTreeSet<InstigatorLabel> = allowed.choose_multiple(&mut rng, k).copied().collect();
                for l in &labels {
                    let at = rng.gen_range(0..=words.len());
                    words.insert(at, l.as_str().to_string());
                }
                instigators.insert(i, labels);
            }
            utterances.push(Utterance {
                index: i,
                speaker: speaker.to_string(),
                text: words.join(" "),
                emotion: if i == t - 1 { target } else { base[speaker] },
            });
        }
        let dialogue_id = format!("demo{d:02}");
        records.push(AnnotationRecord {
            instance_id: instance_id(&dialogue_id, t - 1),
            triggers: trigger_set,
            instigators,
        });
        dialogues.push(Dialogue {
            dialogue_id,
            split: Some("train".into()),
            utterances,
        });
    }
    Ok((
        dialogues,
        AnnotationFile {
            annotator_id: "gold".into(),
            records,
        },
    ))
}

pub fn learnability_corpus(seed: u64) -> Result<Vec<EfrInstance>> {
    let (dialogues, gold) = learnability_dialogues(seed)?;
    build_instances(&dialogues, Some(&gold))
}

/// A second annotator that mostly agrees with `gold`: some records lose a
/// label, some gain a spurious trigger, and some swap a label for another
/// label of the same polarity.
pub fn second_annotator(gold: &AnnotationFile, seed: u64) -> AnnotationFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = gold
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            let roll: f64 = rng.gen();
            if roll < 0.15 {
                if let Some((&i, set)) = r.instigators.iter_mut().next() {
                    if set.len() > 1 {
                        let first = *set.iter().next().expect("non-empty");
                        set.remove(&first);
                    } else {
                        r.instigators.remove(&i);
                        r.triggers.remove(&i);
                    }
                }
            } else if roll < 0.30 {
                if let Some(set) = r.instigators.values_mut().next() {
                    let old = *set.iter().next().expect("non-empty");
                    let pol = label_polarity(old);
                    let pool: Vec<InstigatorLabel> = InstigatorLabel::ALL
                        .iter()
                        .copied()
                        .filter(|&l| l != old && label_polarity(l) == pol)
                        .collect();
                    set.remove(&old);
                    set.insert(*pool.choose(&mut rng).expect("same-polarity labels"));
                }
            } else if roll < 0.40 {
                let t: usize = r
                    .instance_id
                    .rsplit_once('#')
                    .and_then(|(_, t)| t.parse().ok())
                    .unwrap_or(0);
                let extra = rng.gen_range(0..=t);
                r.triggers.insert(extra);
            }
            r
        })
        .collect();
    AnnotationFile {
        annotator_id: "annotator_b".into(),
        records,
    }
}

fn ambiguous_labels() -> Vec<InstigatorLabel> {
    InstigatorLabel::ALL
        .iter()
        .copied()
        .filter(|&l| label_polarity(l) == Polarity::Ambiguous)
        .collect()
}

/// Instigator assigned by the emotion-bigram rule.
pub fn bigram_label(previous: Emotion, current: Emotion) -> InstigatorLabel {
    let pool = ambiguous_labels();
    pool[(previous.index() * Emotion::COUNT + current.index()) % pool.len()]
}

/// `count` instances whose labels are a function of the emotion sequence.
pub fn emotion_corpus(count: usize, seed: u64, split: &str) -> Result<Vec<EfrInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for d in 0..count {
        let n_speakers = rng.gen_range(2..=3);
        let mut cast: Vec<&str> = SPEAKERS.to_vec();
        cast.shuffle(&mut rng);
        cast.truncate(n_speakers);
        let t = rng.gen_range(4..=7);
        let mut speakers: Vec<&str> = (0..t - 1).map(|_| *cast.choose(&mut rng).expect("cast")).collect();
        speakers[0] = cast[0];
        let target_speaker = speakers[rng.gen_range(0..t - 1)];
        speakers.push(target_speaker);
        let mut emotions: Vec<Emotion> = (0..t - 1)
            .map(|_| *Emotion::ALL.choose(&mut rng).expect("emotions"))
            .collect();
        let source = *speakers[..t - 1]
            .iter()
            .zip(&emotions)
            .rev()
            .find(|(s, _)| **s == target_speaker)
            .expect("target speaker spoke earlier")
            .1;
        let target = random_other(&mut rng, source);
        emotions.push(target);
        let dialogue_id = format!("emo-{split}{d:03}");
        let utterances: Vec<Utterance> = (0..t)
            .map(|i| Utterance {
                index: i,
                speaker: speakers[i].to_string(),
                text: filler(&mut rng, 3, 6).join(" "),
                emotion: emotions[i],
            })
            .collect();
        let trigger_flags: Vec<bool> = (0..t).map(|i| i > 0 && emotions[i] != emotions[i - 1]).collect();
        let instigators = (0..t)
            .map(|i| {
                if trigger_flags[i] {
                    BTreeSet::from([bigram_label(emotions[i - 1], emotions[i])])
                } else {
                    BTreeSet::new()
                }
            })
            .collect();
        let inst = EfrInstance {
            instance_id: instance_id(&dialogue_id, t - 1),
            dialogue_id,
            split: Some(split.to_string()),
            utterances,
            target_index: t - 1,
            target_speaker: target_speaker.to_string(),
            source_emotion: source,
            target_emotion: target,
            trigger_flags,
            instigators,
        };
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub fn emotion_splits(seed: u64) -> Result<(Vec<EfrInstance>, Vec<EfrInstance>)> {
    Ok((
        emotion_corpus(EMOTION_TRAIN, seed, "train")?,
        emotion_corpus(EMOTION_DEV, seed.wrapping_add(1), "dev")?,
    ))
}

/// File name and contents of every shipped demo file, generated from
/// [`DEMO_SEED`].
pub fn demo_files() -> Result<Vec<(&'static str, String)>> {
    fn lines<T>(items: &[T], f: impl Fn(&T) -> Result<String>) -> Result<String> {
        let mut s = String::new();
        for item in items {
            s.push_str(&f(item)?);
            s.push('\n');
        }
        Ok(s)
    }
    let (dialogues, gold) = learnability_dialogues(DEMO_SEED)?;
    let instances = build_instances(&dialogues, Some(&gold))?;
    let second = second_annotator(&gold, DEMO_SEED);
    let (emo_train, emo_dev) = emotion_splits(DEMO_SEED)?;
    let ann = |f: &AnnotationFile| lines(&f.records, |r| annotation_to_line(&f.annotator_id, r));
    Ok(vec![
        ("learnability.dialogues.jsonl", lines(&dialogues, dialogue_to_line)?),
        ("learnability.gold.jsonl", ann(&gold)?),
        ("learnability.annotator_b.jsonl", ann(&second)?),
        ("learnability.instances.jsonl", lines(&instances, instance_to_line)?),
        ("emotion.train.jsonl", lines(&emo_train, instance_to_line)?),
        ("emotion.dev.jsonl", lines(&emo_dev, instance_to_line)?),
    ])
}

pub fn write_demo_files(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in demo_files()? {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// The shipped files, embedded at compile time.
pub mod shipped {
    use super::*;

    pub const LEARNABILITY_DIALOGUES: &str = include_str!("../data/demo/learnability.dialogues.jsonl");
    pub const LEARNABILITY_GOLD: &str = include_str!("../data/demo/learnability.gold.jsonl");
    pub const LEARNABILITY_ANNOTATOR_B: &str = include_str!("../data/demo/learnability.annotator_b.jsonl");
    pub const LEARNABILITY_INSTANCES: &str = include_str!("../data/demo/learnability.instances.jsonl");
    pub const EMOTION_TRAIN: &str = include_str!("../data/demo/emotion.train.jsonl");
    pub const EMOTION_DEV: &str = include_str!("../data/demo/emotion.dev.jsonl");

    pub fn learnability_dialogues() -> Result<Vec<Dialogue>> {
        parse_dialogues_str(LEARNABILITY_DIALOGUES, "learnability.dialogues.jsonl")
    }

    pub fn learnability_annotations() -> Result<[AnnotationFile; 2]> {
        Ok([
            parse_annotations_str(LEARNABILITY_GOLD, "learnability.gold.jsonl")?,
            parse_annotations_str(LEARNABILITY_ANNOTATOR_B, "learnability.annotator_b.jsonl")?,
        ])
    }

    pub fn learnability_instances() -> Result<Vec<EfrInstance>> {
        parse_instances_str(LEARNABILITY_INSTANCES, "learnability.instances.jsonl")
    }

    pub fn emotion_train() -> Result<Vec<EfrInstance>> {
        parse_instances_str(EMOTION_TRAIN, "emotion.train.jsonl")
    }

    pub fn emotion_dev() -> Result<Vec<EfrInstance>> {
        parse_instances_str(EMOTION_DEV, "emotion.dev.jsonl")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learnability_corpus_has_one_instance_per_dialogue() {
        let instances = learnability_corpus(DEMO_SEED).unwrap();
        assert_eq!(instances.len(), LEARNABILITY_DIALOGUES);
        for inst in &instances {
            let allowed = polarity_allowed(inst.source_emotion, inst.target_emotion).unwrap();
            assert!(inst.instigators.iter().flatten().all(|l| allowed.contains(l)));
            assert!(inst.trigger_flags.iter().any(|&t| t));
        }
    }

    #[test]
    fn bigram_labels_are_ambiguous() {
        for a in Emotion::ALL {
            for b in Emotion::ALL {
                assert_eq!(label_polarity(bigram_label(*a, *b)), Polarity::Ambiguous);
            }
        }
    }
}

#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeSet;

use efr::corpus::{Dialogue, EfrInstance, Emotion, Utterance};
use efr::model::TgifConfig;
use efr::taxonomy::InstigatorLabel;
use rand::Rng;

pub fn utterance(index: usize, speaker: &str, text: &str, emotion: Emotion) -> Utterance {
    Utterance {
        index,
        speaker: speaker.to_string(),
        text: text.to_string(),
        emotion,
    }
}

/// Instance over `(speaker, emotion)` turns whose last turn flips; the
/// source emotion is read from the target speaker's previous turn.
pub fn instance(id: &str, turns: &[(&str, Emotion)], labels: &[(usize, &[InstigatorLabel])]) -> EfrInstance {
    let utterances: Vec<Utterance> = turns
        .iter()
        .enumerate()
        .map(|(i, (s, e))| utterance(i, s, &format!("turn {i} from {s} word{}", i % 3), *e))
        .collect();
    let n = utterances.len();
    let target = &utterances[n - 1];
    let source = utterances[..n - 1]
        .iter()
        .rev()
        .find(|u| u.speaker == target.speaker)
        .map(|u| u.emotion)
        .expect("target speaker has an earlier turn");
    let mut trigger_flags = vec![false; n];
    let mut instigators = vec![BTreeSet::new(); n];
    for (i, set) in labels {
        trigger_flags[*i] = true;
        instigators[*i] = set.iter().copied().collect();
    }
    EfrInstance {
        instance_id: format!("{id}#{}", n - 1),
        dialogue_id: id.to_string(),
        split: None,
        target_index: n - 1,
        target_speaker: target.speaker.clone(),
        source_emotion: source,
        target_emotion: target.emotion,
        utterances,
        trigger_flags,
        instigators,
    }
}

/// Two-speaker, three-turn instance flipping `source -> target`.
pub fn flip_instance(source: Emotion, target: Emotion) -> EfrInstance {
    instance(
        &format!("{source}-{target}"),
        &[("A", source), ("B", Emotion::Neutral), ("A", target)],
        &[],
    )
}

pub fn small_config() -> TgifConfig {
    TgifConfig {
        d_model: 16,
        heads: 2,
        d_ff: 24,
        gru_hidden: 8,
        fusion_hidden: vec![16],
        ..TgifConfig::default()
    }
}

pub fn random_dialogue<R: Rng>(rng: &mut R, id: &str, max_len: usize, max_speakers: usize) -> Dialogue {
    let n = rng.gen_range(1..=max_len);
    let speakers = rng.gen_range(1..=max_speakers);
    let utterances = (0..n)
        .map(|i| {
            let s = format!("s{}", rng.gen_range(0..speakers));
            let e = Emotion::ALL[rng.gen_range(0..Emotion::ALL.len())];
            utterance(i, &s, &format!("u{i}"), e)
        })
        .collect();
    Dialogue {
        dialogue_id: id.to_string(),
        split: None,
        utterances,
    }
}

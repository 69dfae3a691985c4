//! Flip detection, instance construction and corpus statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{AnnotationFile, Dialogue, EfrInstance, Emotion};
use crate::error::{Error, Result};
use crate::taxonomy::{fine_label_counts, flip_polarity, CoarseLabel, FlipPolarity, InstigatorLabel, LabelSpace};

/// A speaker's emotion change at `target_index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flip {
    pub target_index: usize,
    pub target_speaker: String,
    pub source_emotion: Emotion,
    pub target_emotion: Emotion,
}

/// Every utterance whose emotion differs from the same speaker's nearest
/// preceding utterance in the dialogue. A speaker's first utterance never flips.
pub fn detect_flips(dialogue: &Dialogue) -> Vec<Flip> {
    let mut last: BTreeMap<&str, Emotion> = BTreeMap::new();
    let mut flips = Vec::new();
    for (i, u) in dialogue.utterances.iter().enumerate() {
        if let Some(&prev) = last.get(u.speaker.as_str()) {
            if prev != u.emotion {
                flips.push(Flip {
                    target_index: i,
                    target_speaker: u.speaker.clone(),
                    source_emotion: prev,
                    target_emotion: u.emotion,
                });
            }
        }
        last.insert(&u.speaker, u.emotion);
    }
    flips
}

pub fn instance_id(dialogue_id: &str, target_index: usize) -> String {
    format!("{dialogue_id}#{target_index}")
}

/// One instance per detected flip, holding the dialogue prefix up to and
/// including the target. Gold labels are looked up by instance id; instances
/// without gold get all-false triggers and empty instigator sets.
pub fn build_instances(dialogues: &[Dialogue], gold: Option<&AnnotationFile>) -> Result<Vec<EfrInstance>> {
    let mut out = Vec::new();
    let mut used = BTreeSet::new();
    for d in dialogues {
        for flip in detect_flips(d) {
            let t = flip.target_index;
            let id = instance_id(&d.dialogue_id, t);
            let n = t + 1;
            let mut trigger_flags = vec![false; n];
            let mut instigators = vec![BTreeSet::new(); n];
            if let Some(rec) = gold.and_then(|g| g.get(&id)) {
                used.insert(id.clone());
                for &i in &rec.triggers {
                    if i > t {
                        return Err(Error::Invalid(format!(
                            "gold for {id}: trigger index {i} beyond target {t}"
                        )));
                    }
                    trigger_flags[i] = true;
                }
                for (&i, set) in &rec.instigators {
                    if i > t {
                        return Err(Error::Invalid(format!(
                            "gold for {id}: instigator index {i} beyond target {t}"
                        )));
                    }
                    instigators[i] = set.clone();
                }
            }
            let inst = EfrInstance {
                instance_id: id,
                dialogue_id: d.dialogue_id.clone(),
                split: d.split.clone(),
                utterances: d.utterances[..n].to_vec(),
                target_index: t,
                target_speaker: flip.target_speaker,
                source_emotion: flip.source_emotion,
                target_emotion: flip.target_emotion,
                trigger_flags,
                instigators,
            };
            inst.validate()?;
            out.push(inst);
        }
    }
    if let Some(g) = gold {
        if let Some(extra) = g.records.iter().find(|r| !used.contains(&r.instance_id)) {
            return Err(Error::Invalid(format!(
                "gold annotation for `{}` matches no detected flip",
                extra.instance_id
            )));
        }
    }
    Ok(out)
}

/// Row/column order used by the printed flip matrix.
pub const MATRIX_DISPLAY_ORDER: [Emotion; 7] = [
    Emotion::Disgust,
    Emotion::Joy,
    Emotion::Surprise,
    Emotion::Anger,
    Emotion::Fear,
    Emotion::Neutral,
    Emotion::Sadness,
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelCount {
    pub label: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub instances: usize,
    pub dialogues: usize,
    pub triggers: u64,
    pub positive_flips: u64,
    pub negative_flips: u64,
    /// `flip_matrix[source][target]`, indexed by `Emotion::index`.
    pub flip_matrix: [[u64; 7]; 7],
    pub fine_counts: Vec<LabelCount>,
    pub coarse_defn_counts: Vec<LabelCount>,
    /// Count-based space learned from these same instances; empty when no
    /// instances are given.
    pub coarse_count_counts: Vec<LabelCount>,
}

/// Per-label occurrence counts in `space`, projecting each utterance's fine
/// set first so a coarse class counts once per utterance.
pub fn space_counts(instances: &[EfrInstance], space: &LabelSpace) -> Vec<u64> {
    let mut counts = vec![0u64; space.dim()];
    for inst in instances {
        for set in &inst.instigators {
            for idx in space.project(set) {
                counts[idx] += 1;
            }
        }
    }
    counts
}

fn named(space: &LabelSpace, counts: Vec<u64>) -> Vec<LabelCount> {
    space
        .labels()
        .iter()
        .zip(counts)
        .map(|(l, count)| LabelCount {
            label: l.clone(),
            count,
        })
        .collect()
}

pub fn corpus_stats(instances: &[EfrInstance]) -> StatsReport {
    let mut flip_matrix = [[0u64; 7]; 7];
    let mut positive_flips = 0;
    let mut negative_flips = 0;
    let mut triggers = 0;
    let mut dialogues = BTreeSet::new();
    for inst in instances {
        flip_matrix[inst.source_emotion.index()][inst.target_emotion.index()] += 1;
        match flip_polarity(inst.source_emotion, inst.target_emotion) {
            Ok(FlipPolarity::Positive) => positive_flips += 1,
            Ok(FlipPolarity::Negative) => negative_flips += 1,
            Err(_) => {}
        }
        triggers += inst.trigger_flags.iter().filter(|&&t| t).count() as u64;
        dialogues.insert(inst.dialogue_id.as_str());
    }
    let fine = LabelSpace::fine27();
    let defn = LabelSpace::coarse_defn14();
    let fine_counts = named(&fine, fine_label_counts(instances));
    debug_assert_eq!(fine.dim(), InstigatorLabel::ALL.len());
    debug_assert_eq!(defn.dim(), CoarseLabel::ALL.len());
    let coarse_defn_counts = named(&defn, space_counts(instances, &defn));
    let coarse_count_counts = match LabelSpace::count_based(instances) {
        Ok(space) => {
            let c = space_counts(instances, &space);
            named(&space, c)
        }
        Err(_) => Vec::new(),
    };
    StatsReport {
        instances: instances.len(),
        dialogues: dialogues.len(),
        triggers,
        positive_flips,
        negative_flips,
        flip_matrix,
        fine_counts,
        coarse_defn_counts,
        coarse_count_counts,
    }
}

impl StatsReport {
    pub fn cell(&self, source: Emotion, target: Emotion) -> u64 {
        self.flip_matrix[source.index()][target.index()]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats report serializes")
    }

    /// Aligned text rendering: summary counts, then the flip matrix with
    /// sources as rows and targets as columns, then label distributions.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "instances        {}", self.instances);
        let _ = writeln!(s, "dialogues        {}", self.dialogues);
        let _ = writeln!(s, "triggers         {}", self.triggers);
        let _ = writeln!(s, "positive flips   {}", self.positive_flips);
        let _ = writeln!(s, "negative flips   {}", self.negative_flips);
        let _ = writeln!(s);
        let _ = write!(s, "{:<10}", "src\\tgt");
        for e in MATRIX_DISPLAY_ORDER {
            let _ = write!(s, "{:>9}", e.as_str());
        }
        let _ = writeln!(s);
        for src in MATRIX_DISPLAY_ORDER {
            let _ = write!(s, "{:<10}", src.as_str());
            for tgt in MATRIX_DISPLAY_ORDER {
                let _ = write!(s, "{:>9}", self.cell(src, tgt));
            }
            let _ = writeln!(s);
        }
        for (title, counts) in [
            ("fine-grained", &self.fine_counts),
            ("coarse (definition)", &self.coarse_defn_counts),
            ("coarse (count)", &self.coarse_count_counts),
        ] {
            let _ = writeln!(s, "\n{title}");
            for c in counts {
                let _ = writeln!(s, "  {:<14}{:>7}", c.label, c.count);
            }
        }
        s
    }
}

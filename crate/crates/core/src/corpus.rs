//! Dialogue data model and JSON-lines ingestion.
//!
//! Three record kinds share one line-oriented format: raw dialogues, flip
//! instances (dialogue prefixes with gold trigger/instigator fields) and
//! per-annotator label files. Every record is validated on parse and every
//! failure names the file, line and field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::taxonomy::InstigatorLabel;

/// The seven emotion classes. Discriminants give the one-hot index, which is
/// alphabetical: anger=0, disgust=1, fear=2, joy=3, neutral=4, sadness=5,
/// surprise=6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Emotion {
    Anger,
    Disgust,
    Fear,
    Joy,
    Neutral,
    Sadness,
    Surprise,
}

/// Coarse grouping of emotions used for flip directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Valence {
    Positive,
    Negative,
    Neutral,
}

impl Emotion {
    pub const COUNT: usize = 7;

    pub const ALL: &'static [Emotion] = &[
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Joy,
        Emotion::Neutral,
        Emotion::Sadness,
        Emotion::Surprise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Joy => "joy",
            Emotion::Neutral => "neutral",
            Emotion::Sadness => "sadness",
            Emotion::Surprise => "surprise",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Emotion> {
        Emotion::ALL.get(index).copied()
    }

    pub fn one_hot(self) -> [f64; Emotion::COUNT] {
        let mut v = [0.0; Emotion::COUNT];
        v[self.index()] = 1.0;
        v
    }

    /// Inverse of [`Emotion::one_hot`]; `None` unless exactly one entry is 1.
    pub fn from_one_hot(v: &[f64]) -> Option<Emotion> {
        if v.len() != Emotion::COUNT {
            return None;
        }
        let mut hot = v.iter().enumerate().filter(|(_, &x)| x != 0.0);
        match (hot.next(), hot.next()) {
            (Some((i, &x)), None) if x == 1.0 => Emotion::from_index(i),
            _ => None,
        }
    }

    pub fn valence(self) -> Valence {
        match self {
            Emotion::Joy | Emotion::Surprise => Valence::Positive,
            Emotion::Neutral => Valence::Neutral,
            Emotion::Anger | Emotion::Disgust | Emotion::Fear | Emotion::Sadness => Valence::Negative,
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Emotion::ALL
            .iter()
            .copied()
            .find(|e| e.as_str() == lower)
            .ok_or_else(|| format!("unknown emotion `{s}`"))
    }
}

impl Serialize for Emotion {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: String,
    pub emotion: Emotion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub split: Option<String>,
    pub utterances: Vec<Utterance>,
}

/// A dialogue prefix ending at a flip target, with gold labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EfrInstance {
    pub instance_id: String,
    pub dialogue_id: String,
    pub split: Option<String>,
    pub utterances: Vec<Utterance>,
    pub target_index: usize,
    pub target_speaker: String,
    pub source_emotion: Emotion,
    pub target_emotion: Emotion,
    pub trigger_flags: Vec<bool>,
    pub instigators: Vec<BTreeSet<InstigatorLabel>>,
}

impl EfrInstance {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn trigger_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.trigger_flags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(i, _)| i)
    }

    /// Checks every structural invariant of an instance.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invalid(format!("instance {}: {msg}", self.instance_id)));
        if self.utterances.is_empty() {
            return fail("no utterances".into());
        }
        check_utterances(&self.utterances)
            .map_err(|(_, m)| Error::Invalid(format!("instance {}: {m}", self.instance_id)))?;
        let n = self.utterances.len();
        if self.target_index != n - 1 {
            return fail(format!(
                "target_index {} is not the last utterance ({})",
                self.target_index,
                n - 1
            ));
        }
        let target = &self.utterances[self.target_index];
        if target.speaker != self.target_speaker {
            return fail(format!(
                "target speaker `{}` != `{}`",
                self.target_speaker, target.speaker
            ));
        }
        if target.emotion != self.target_emotion {
            return fail(format!("target emotion {} != {}", self.target_emotion, target.emotion));
        }
        if self.source_emotion == self.target_emotion {
            return fail("source and target emotions are equal".into());
        }
        let previous = self.utterances[..self.target_index]
            .iter()
            .rev()
            .find(|u| u.speaker == self.target_speaker);
        match previous {
            Some(u) if u.emotion == self.source_emotion => {}
            Some(u) => {
                return fail(format!(
                    "source emotion {} != emotion {} of the speaker's previous utterance",
                    self.source_emotion, u.emotion
                ))
            }
            None => return fail("target speaker has no earlier utterance".into()),
        }
        if self.trigger_flags.len() != n || self.instigators.len() != n {
            return fail("trigger/instigator vectors do not match utterance count".into());
        }
        for (i, set) in self.instigators.iter().enumerate() {
            if !set.is_empty() && !self.trigger_flags[i] {
                return fail(format!("utterance {i} has instigators but is not a trigger"));
            }
        }
        Ok(())
    }
}

/// Labels assigned by one annotator to one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub instance_id: String,
    pub triggers: BTreeSet<usize>,
    pub instigators: BTreeMap<usize, BTreeSet<InstigatorLabel>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationFile {
    pub annotator_id: String,
    pub records: Vec<AnnotationRecord>,
}

impl AnnotationFile {
    pub fn get(&self, instance_id: &str) -> Option<&AnnotationRecord> {
        self.records.iter().find(|r| r.instance_id == instance_id)
    }

    /// Ensures every annotated instance exists in `instances`.
    pub fn check_against(&self, instances: &[EfrInstance]) -> Result<()> {
        let known: BTreeSet<&str> = instances.iter().map(|i| i.instance_id.as_str()).collect();
        for r in &self.records {
            if !known.contains(r.instance_id.as_str()) {
                return Err(Error::Invalid(format!(
                    "annotator {}: unknown instance `{}`",
                    self.annotator_id, r.instance_id
                )));
            }
        }
        Ok(())
    }
}

/// Which record schema a file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    Dialogues,
    Instances,
    Annotations,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Corpus {
    Dialogues(Vec<Dialogue>),
    Instances(Vec<EfrInstance>),
    Annotations(AnnotationFile),
}

// ---------------------------------------------------------------------------
// wire structs

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUtterance {
    index: usize,
    speaker: String,
    text: String,
    emotion: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDialogue {
    dialogue_id: String,
    #[serde(default)]
    split: Option<String>,
    utterances: Vec<RawUtterance>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    instance_id: String,
    dialogue_id: String,
    #[serde(default)]
    split: Option<String>,
    utterances: Vec<RawUtterance>,
    target_index: usize,
    target_speaker: String,
    source_emotion: String,
    target_emotion: String,
    triggers: Vec<usize>,
    instigators: BTreeMap<String, Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    annotator_id: String,
    instance_id: String,
    triggers: Vec<usize>,
    instigators: BTreeMap<String, Vec<String>>,
}

/// Serializes an instigator map with numerically ordered keys.
struct LabelMap<'a>(Vec<(usize, &'a BTreeSet<InstigatorLabel>)>);

impl Serialize for LabelMap<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (i, set) in &self.0 {
            map.serialize_entry(&i.to_string(), set)?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct DialogueOut<'a> {
    dialogue_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<&'a str>,
    utterances: &'a [Utterance],
}

#[derive(Serialize)]
struct InstanceOut<'a> {
    instance_id: &'a str,
    dialogue_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<&'a str>,
    utterances: &'a [Utterance],
    target_index: usize,
    target_speaker: &'a str,
    source_emotion: Emotion,
    target_emotion: Emotion,
    triggers: Vec<usize>,
    instigators: LabelMap<'a>,
}

#[derive(Serialize)]
struct AnnotationOut<'a> {
    annotator_id: &'a str,
    instance_id: &'a str,
    triggers: Vec<usize>,
    instigators: LabelMap<'a>,
}

// ---------------------------------------------------------------------------
// parsing

struct LineCtx<'a> {
    origin: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.origin.to_string(),
            line: self.line,
            field: field.into(),
            message: message.into(),
        }
    }
}

fn non_blank_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn decode<T: for<'de> Deserialize<'de>>(ctx: &LineCtx<'_>, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| ctx.err("<record>", e.to_string()))
}

/// Checks contiguity and speaker names; returns (field, message) on failure.
fn check_utterances(utts: &[Utterance]) -> std::result::Result<(), (String, String)> {
    for (pos, u) in utts.iter().enumerate() {
        if u.index != pos {
            return Err((
                format!("utterances[{pos}].index"),
                format!("expected index {pos}, found {}", u.index),
            ));
        }
        if u.speaker.trim().is_empty() {
            return Err((format!("utterances[{pos}].speaker"), "speaker is empty".into()));
        }
    }
    Ok(())
}

fn convert_utterances(ctx: &LineCtx<'_>, raw: Vec<RawUtterance>) -> Result<Vec<Utterance>> {
    let utts = raw
        .into_iter()
        .enumerate()
        .map(|(pos, r)| {
            let emotion = r
                .emotion
                .parse::<Emotion>()
                .map_err(|m| ctx.err(format!("utterances[{pos}].emotion"), m))?;
            Ok(Utterance {
                index: r.index,
                speaker: r.speaker.trim().to_string(),
                text: r.text,
                emotion,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_utterances(&utts).map_err(|(f, m)| ctx.err(f, m))?;
    Ok(utts)
}

fn convert_labels(
    ctx: &LineCtx<'_>,
    raw: BTreeMap<String, Vec<String>>,
) -> Result<BTreeMap<usize, BTreeSet<InstigatorLabel>>> {
    let mut out = BTreeMap::new();
    for (key, labels) in raw {
        let idx: usize = key
            .parse()
            .map_err(|_| ctx.err("instigators", format!("key `{key}` is not an utterance index")))?;
        let set = labels
            .iter()
            .map(|l| l.parse::<InstigatorLabel>())
            .collect::<std::result::Result<BTreeSet<_>, _>>()
            .map_err(|m| ctx.err(format!("instigators.{key}"), m))?;
        out.insert(idx, set);
    }
    Ok(out)
}

fn parse_dialogue_line(ctx: &LineCtx<'_>, line: &str) -> Result<Dialogue> {
    let raw: RawDialogue = decode(ctx, line)?;
    if raw.dialogue_id.is_empty() {
        return Err(ctx.err("dialogue_id", "empty id"));
    }
    if raw.utterances.is_empty() {
        return Err(ctx.err("utterances", "a dialogue needs at least one utterance"));
    }
    Ok(Dialogue {
        dialogue_id: raw.dialogue_id,
        split: raw.split,
        utterances: convert_utterances(ctx, raw.utterances)?,
    })
}

fn parse_instance_line(ctx: &LineCtx<'_>, line: &str) -> Result<EfrInstance> {
    let raw: RawInstance = decode(ctx, line)?;
    let utterances = convert_utterances(ctx, raw.utterances)?;
    let n = utterances.len();
    let source_emotion = raw.source_emotion.parse().map_err(|m| ctx.err("source_emotion", m))?;
    let target_emotion = raw.target_emotion.parse().map_err(|m| ctx.err("target_emotion", m))?;
    let mut trigger_flags = vec![false; n];
    for &t in &raw.triggers {
        if t >= n {
            return Err(ctx.err("triggers", format!("index {t} out of range for {n} utterances")));
        }
        trigger_flags[t] = true;
    }
    let mut instigators = vec![BTreeSet::new(); n];
    for (idx, set) in convert_labels(ctx, raw.instigators)? {
        if idx >= n {
            return Err(ctx.err("instigators", format!("index {idx} out of range for {n} utterances")));
        }
        instigators[idx] = set;
    }
    let inst = EfrInstance {
        instance_id: raw.instance_id,
        dialogue_id: raw.dialogue_id,
        split: raw.split,
        utterances,
        target_index: raw.target_index,
        target_speaker: raw.target_speaker.trim().to_string(),
        source_emotion,
        target_emotion,
        trigger_flags,
        instigators,
    };
    inst.validate().map_err(|e| ctx.err("<instance>", e.to_string()))?;
    Ok(inst)
}

fn parse_annotation_line(ctx: &LineCtx<'_>, line: &str) -> Result<(String, AnnotationRecord)> {
    let raw: RawAnnotation = decode(ctx, line)?;
    let triggers: BTreeSet<usize> = raw.triggers.into_iter().collect();
    let instigators = convert_labels(ctx, raw.instigators)?;
    for (idx, set) in &instigators {
        if !set.is_empty() && !triggers.contains(idx) {
            return Err(ctx.err(
                "instigators",
                format!("utterance {idx} has instigators but is not listed as a trigger"),
            ));
        }
    }
    let instigators = instigators.into_iter().filter(|(_, s)| !s.is_empty()).collect();
    Ok((
        raw.annotator_id,
        AnnotationRecord {
            instance_id: raw.instance_id,
            triggers,
            instigators,
        },
    ))
}

pub fn parse_dialogues_str(text: &str, origin: &str) -> Result<Vec<Dialogue>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, content) in non_blank_lines(text) {
        let ctx = LineCtx { origin, line };
        let d = parse_dialogue_line(&ctx, content)?;
        if !seen.insert(d.dialogue_id.clone()) {
            return Err(ctx.err("dialogue_id", format!("duplicate id `{}`", d.dialogue_id)));
        }
        out.push(d);
    }
    Ok(out)
}

pub fn parse_instances_str(text: &str, origin: &str) -> Result<Vec<EfrInstance>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, content) in non_blank_lines(text) {
        let ctx = LineCtx { origin, line };
        let inst = parse_instance_line(&ctx, content)?;
        if !seen.insert(inst.instance_id.clone()) {
            return Err(ctx.err("instance_id", format!("duplicate id `{}`", inst.instance_id)));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn parse_annotations_str(text: &str, origin: &str) -> Result<AnnotationFile> {
    let mut annotator: Option<String> = None;
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (line, content) in non_blank_lines(text) {
        let ctx = LineCtx { origin, line };
        let (id, rec) = parse_annotation_line(&ctx, content)?;
        match &annotator {
            None => annotator = Some(id),
            Some(a) if *a != id => {
                return Err(ctx.err("annotator_id", format!("file mixes annotators `{a}` and `{id}`")))
            }
            Some(_) => {}
        }
        if !seen.insert(rec.instance_id.clone()) {
            return Err(ctx.err("instance_id", format!("duplicate id `{}`", rec.instance_id)));
        }
        records.push(rec);
    }
    Ok(AnnotationFile {
        annotator_id: annotator.unwrap_or_default(),
        records,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_corpus(path: impl AsRef<Path>, kind: CorpusKind) -> Result<Corpus> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let origin = path.display().to_string();
    Ok(match kind {
        CorpusKind::Dialogues => Corpus::Dialogues(parse_dialogues_str(&text, &origin)?),
        CorpusKind::Instances => Corpus::Instances(parse_instances_str(&text, &origin)?),
        CorpusKind::Annotations => Corpus::Annotations(parse_annotations_str(&text, &origin)?),
    })
}

pub fn read_dialogues(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    parse_dialogues_str(&read_text(path)?, &path.display().to_string())
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<Vec<EfrInstance>> {
    let path = path.as_ref();
    parse_instances_str(&read_text(path)?, &path.display().to_string())
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationFile> {
    let path = path.as_ref();
    parse_annotations_str(&read_text(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// writing

fn to_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Runtime(format!("serialization failed: {e}")))
}

fn label_map<'a>(sets: impl Iterator<Item = (usize, &'a BTreeSet<InstigatorLabel>)>) -> LabelMap<'a> {
    LabelMap(sets.filter(|(_, s)| !s.is_empty()).collect())
}

pub fn dialogue_to_line(d: &Dialogue) -> Result<String> {
    to_line(&DialogueOut {
        dialogue_id: &d.dialogue_id,
        split: d.split.as_deref(),
        utterances: &d.utterances,
    })
}

pub fn instance_to_line(inst: &EfrInstance) -> Result<String> {
    to_line(&InstanceOut {
        instance_id: &inst.instance_id,
        dialogue_id: &inst.dialogue_id,
        split: inst.split.as_deref(),
        utterances: &inst.utterances,
        target_index: inst.target_index,
        target_speaker: &inst.target_speaker,
        source_emotion: inst.source_emotion,
        target_emotion: inst.target_emotion,
        triggers: inst.trigger_indices().collect(),
        instigators: label_map(inst.instigators.iter().enumerate()),
    })
}

pub fn annotation_to_line(annotator_id: &str, rec: &AnnotationRecord) -> Result<String> {
    to_line(&AnnotationOut {
        annotator_id,
        instance_id: &rec.instance_id,
        triggers: rec.triggers.iter().copied().collect(),
        instigators: label_map(rec.instigators.iter().map(|(&i, s)| (i, s))),
    })
}

fn write_lines(path: &Path, lines: impl Iterator<Item = Result<String>>) -> Result<()> {
    let mut buf = Vec::new();
    for line in lines {
        buf.extend_from_slice(line?.as_bytes());
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_instances(instances: &[EfrInstance], path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), instances.iter().map(instance_to_line))
}

pub fn write_dialogues(dialogues: &[Dialogue], path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), dialogues.iter().map(dialogue_to_line))
}

pub fn write_annotations(file: &AnnotationFile, path: impl AsRef<Path>) -> Result<()> {
    write_lines(
        path.as_ref(),
        file.records.iter().map(|r| annotation_to_line(&file.annotator_id, r)),
    )
}

// ---------------------------------------------------------------------------
// MELD CSV import

#[derive(Deserialize)]
struct MeldRow {
    #[serde(rename = "Utterance")]
    utterance: String,
    #[serde(rename = "Speaker")]
    speaker: String,
    #[serde(rename = "Emotion")]
    emotion: String,
    #[serde(rename = "Dialogue_ID")]
    dialogue_id: String,
    #[serde(rename = "Utterance_ID")]
    utterance_id: usize,
}

/// Converts a MELD-style CSV (columns `Utterance`, `Speaker`, `Emotion`,
/// `Dialogue_ID`, `Utterance_ID`; others ignored) into dialogues, grouped by
/// dialogue id in order of first appearance and sorted by utterance id.
pub fn import_meld_csv(path: impl AsRef<Path>, split: Option<&str>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: origin.clone(),
        line: 0,
        field: "<file>".into(),
        message: e.to_string(),
    })?;
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<(usize, Utterance)>> = BTreeMap::new();
    for (row_no, row) in reader.deserialize::<MeldRow>().enumerate() {
        let line = row_no + 2;
        let ctx = LineCtx { origin: &origin, line };
        let row = row.map_err(|e| ctx.err("<row>", e.to_string()))?;
        let emotion = row.emotion.parse().map_err(|m| ctx.err("Emotion", m))?;
        if row.speaker.trim().is_empty() {
            return Err(ctx.err("Speaker", "speaker is empty"));
        }
        let entry = grouped.entry(row.dialogue_id.clone()).or_insert_with(|| {
            order.push(row.dialogue_id.clone());
            Vec::new()
        });
        entry.push((
            row.utterance_id,
            Utterance {
                index: 0,
                speaker: row.speaker.trim().to_string(),
                text: row.utterance,
                emotion,
            },
        ));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut utts = grouped.remove(&id).unwrap_or_default();
        utts.sort_by_key(|(uid, _)| *uid);
        for pair in utts.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Invalid(format!(
                    "dialogue {id}: duplicate utterance id {}",
                    pair[0].0
                )));
            }
        }
        let utterances = utts
            .into_iter()
            .enumerate()
            .map(|(i, (_, mut u))| {
                u.index = i;
                u
            })
            .collect();
        out.push(Dialogue {
            dialogue_id: id,
            split: split.map(str::to_string),
            utterances,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TABLE1_DIALOGUE: &str = r#"{"dialogue_id":"t1","utterances":[{"index":0,"speaker":"Ross","text":"No! No sir umm, she means a lot to me. I mean, I care I-I love Rachel.","emotion":"fear"},{"index":1,"speaker":"Mona","text":"What?!","emotion":"surprise"},{"index":2,"speaker":"Ross","text":"Oh but not that way. I mean I mean I'm not in love with her. I love her like a, like a friend.","emotion":"joy"},{"index":3,"speaker":"Dr. Green","text":"Oh really? That's how you treat a friend? You get her in trouble and then refuse to marry her?","emotion":"anger"},{"index":4,"speaker":"Ross","text":"Hey! I offered to marry her!","emotion":"anger"}]}"#;

    #[test]
    fn parses_table1_dialogue() {
        let ds = parse_dialogues_str(TABLE1_DIALOGUE, "mem").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].utterances.len(), 5);
        let speakers: BTreeSet<&str> = ds[0].utterances.iter().map(|u| u.speaker.as_str()).collect();
        assert_eq!(speakers.len(), 3);
    }

    #[test]
    fn empty_file_gives_empty_list() {
        assert!(parse_dialogues_str("", "mem").unwrap().is_empty());
        assert!(parse_instances_str("\n", "mem").unwrap().is_empty());
    }

    #[test]
    fn unknown_emotion_names_line_and_field() {
        let text = format!(
            "{}\n{}",
            TABLE1_DIALOGUE.replace("\"t1\"", "\"t0\""),
            TABLE1_DIALOGUE.replace("\"surprise\"", "\"Joyful\"")
        );
        match parse_dialogues_str(&text, "mem").unwrap_err() {
            Error::Parse {
                line, field, message, ..
            } => {
                assert_eq!(line, 2);
                assert_eq!(field, "utterances[1].emotion");
                assert!(message.contains("Joyful"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn emotion_parse_is_case_insensitive() {
        assert_eq!("JOY".parse::<Emotion>().unwrap(), Emotion::Joy);
        assert_eq!(Emotion::Anger.index(), 0);
        assert_eq!(Emotion::Surprise.index(), 6);
        for &e in Emotion::ALL {
            assert_eq!(Emotion::from_one_hot(&e.one_hot()), Some(e));
            assert_eq!(e.as_str().parse::<Emotion>().unwrap(), e);
        }
    }

    #[test]
    fn rejects_non_contiguous_indices_and_duplicates() {
        let bad = TABLE1_DIALOGUE.replace("\"index\":3", "\"index\":7");
        let err = parse_dialogues_str(&bad, "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { ref field, .. } if field == "utterances[3].index"));

        let dup = format!("{TABLE1_DIALOGUE}\n{TABLE1_DIALOGUE}");
        let err = parse_dialogues_str(&dup, "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, ref field, .. } if field == "dialogue_id"));
    }

    #[test]
    fn blank_speaker_is_rejected() {
        let bad = TABLE1_DIALOGUE.replace("\"Mona\"", "\"  \"");
        assert!(parse_dialogues_str(&bad, "mem").is_err());
    }

    #[test]
    fn annotation_files_must_be_single_annotator() {
        let text = "{\"annotator_id\":\"a\",\"instance_id\":\"x#2\",\"triggers\":[1],\"instigators\":{\"1\":[\"nervousness\"]}}\n\
                    {\"annotator_id\":\"b\",\"instance_id\":\"y#2\",\"triggers\":[],\"instigators\":{}}";
        assert!(parse_annotations_str(text, "mem").is_err());
        let one = text.lines().next().unwrap();
        let file = parse_annotations_str(one, "mem").unwrap();
        assert_eq!(file.annotator_id, "a");
        assert_eq!(file.records[0].triggers, BTreeSet::from([1]));
    }

    #[test]
    fn instigators_on_non_trigger_are_rejected() {
        let text =
            "{\"annotator_id\":\"a\",\"instance_id\":\"x#2\",\"triggers\":[],\"instigators\":{\"1\":[\"loss\"]}}";
        assert!(parse_annotations_str(text, "mem").is_err());
    }
}

//! Instigator labels, their coarse hierarchy, polarity partition and the
//! output masks derived from them.
//!
//! Fine labels follow the 27-way list in its documented order; the coarse
//! hierarchy groups them into 14 definition-based classes. Each fine label
//! carries a polarity (positive, negative or ambiguous), and a flip admits
//! only the instigators compatible with its direction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::{EfrInstance, Emotion, Valence};
use crate::error::{Error, Result};

/// Raw transcription of the label table: fine label, coarse parent, polarity, definition.
pub const FINE27_JSON: &str = include_str!("../data/taxonomy/fine27.json");
/// Observed instigators per (source, target) flip, keyed `"source->target"`.
pub const PAIR_TABLE_JSON: &str = include_str!("../data/taxonomy/pair_table.json");

/// Labels with fewer training occurrences than this are merged into `other`
/// in the count-based coarse space.
pub const COUNT_MERGE_THRESHOLD: u64 = 250;

/// Name of the merged bucket in count-based spaces.
pub const OTHER_LABEL: &str = "other";

macro_rules! closed_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

closed_enum!(
    /// The 27 fine-grained instigator labels.
    InstigatorLabel {
        Annoyance => "annoyance",
        Pain => "pain",
        Awkwardness => "awkwardness",
        Benefit => "benefit",
        Cheer => "cheer",
        Humor => "humor",
        Confusion => "confusion",
        Curiosity => "curiosity",
        Calmness => "calmness",
        Relief => "relief",
        Excitement => "excitement",
        Satisfaction => "satisfaction",
        Desire => "desire",
        Adoration => "adoration",
        Impressed => "impressed",
        Loss => "loss",
        Nervousness => "nervousness",
        Scold => "scold",
        Guilt => "guilt",
        Shock => "shock",
        Threat => "threat",
        Horror => "horror",
        Abuse => "abuse",
        Boredom => "boredom",
        Sympathy => "sympathy",
        Challenge => "challenge",
        Nostalgia => "nostalgia",
    }
);

closed_enum!(
    /// The 14 definition-based coarse instigator groups.
    CoarseLabel {
        Annoyance => "annoyance",
        Awkwardness => "awkwardness",
        Benefit => "benefit",
        Cheer => "cheer",
        Confusion => "confusion",
        Curiosity => "curiosity",
        Ease => "ease",
        Excitement => "excitement",
        Dazzle => "dazzle",
        Loss => "loss",
        Nervousness => "nervousness",
        Shock => "shock",
        Threat => "threat",
        Others => "others",
    }
);

impl FromStr for InstigatorLabel {
    type Err = String;

    /// Case-insensitive; accepts the British spelling `humour`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "humour" {
            return Ok(InstigatorLabel::Humor);
        }
        InstigatorLabel::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == lower)
            .ok_or_else(|| format!("unknown instigator label `{s}`"))
    }
}

impl FromStr for CoarseLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        CoarseLabel::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == lower)
            .ok_or_else(|| format!("unknown coarse label `{s}`"))
    }
}

impl Serialize for InstigatorLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for InstigatorLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Polarity of an instigator label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Ambiguous,
}

/// Polarity of an emotion flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipPolarity {
    Positive,
    Negative,
}

/// Coarse parent of a fine label.
pub fn coarse_of(label: InstigatorLabel) -> CoarseLabel {
    use InstigatorLabel as F;
    match label {
        F::Annoyance | F::Pain => CoarseLabel::Annoyance,
        F::Awkwardness => CoarseLabel::Awkwardness,
        F::Benefit => CoarseLabel::Benefit,
        F::Cheer | F::Humor => CoarseLabel::Cheer,
        F::Confusion => CoarseLabel::Confusion,
        F::Curiosity => CoarseLabel::Curiosity,
        F::Calmness | F::Relief => CoarseLabel::Ease,
        F::Excitement | F::Satisfaction | F::Desire => CoarseLabel::Excitement,
        F::Adoration | F::Impressed => CoarseLabel::Dazzle,
        F::Loss => CoarseLabel::Loss,
        F::Nervousness | F::Scold | F::Guilt => CoarseLabel::Nervousness,
        F::Shock => CoarseLabel::Shock,
        F::Threat | F::Horror | F::Abuse => CoarseLabel::Threat,
        F::Boredom | F::Sympathy | F::Challenge | F::Nostalgia => CoarseLabel::Others,
    }
}

pub fn label_polarity(label: InstigatorLabel) -> Polarity {
    use InstigatorLabel as F;
    match label {
        F::Adoration
        | F::Benefit
        | F::Calmness
        | F::Cheer
        | F::Desire
        | F::Excitement
        | F::Humor
        | F::Impressed
        | F::Relief
        | F::Satisfaction => Polarity::Positive,
        F::Abuse
        | F::Annoyance
        | F::Guilt
        | F::Horror
        | F::Loss
        | F::Nervousness
        | F::Pain
        | F::Scold
        | F::Shock
        | F::Sympathy
        | F::Threat => Polarity::Negative,
        F::Awkwardness | F::Boredom | F::Challenge | F::Confusion | F::Curiosity | F::Nostalgia => Polarity::Ambiguous,
    }
}

/// Direction of a flip from `source` to `target`.
///
/// Cross-polarity flips follow the emotion grouping directly; flips into
/// `neutral` take the opposite sign of the source, and intra-polarity flips
/// (e.g. joy to surprise) are classified by the target emotion.
pub fn flip_polarity(source: Emotion, target: Emotion) -> Result<FlipPolarity> {
    if source == target {
        return Err(Error::Invalid(format!(
            "flip polarity requested for a non-flip ({source} -> {target})"
        )));
    }
    Ok(match (source.valence(), target.valence()) {
        (_, Valence::Positive) => FlipPolarity::Positive,
        (_, Valence::Negative) => FlipPolarity::Negative,
        (Valence::Negative, Valence::Neutral) => FlipPolarity::Positive,
        (Valence::Positive, Valence::Neutral) => FlipPolarity::Negative,
        (Valence::Neutral, Valence::Neutral) => unreachable!("neutral -> neutral is not a flip"),
    })
}

/// True for flips whose source and target sit in the same non-neutral group.
pub fn is_intra_polarity(source: Emotion, target: Emotion) -> bool {
    source != target && source.valence() == target.valence() && source.valence() != Valence::Neutral
}

/// Fine labels admitted by the polarity rule for a flip.
pub fn polarity_allowed(source: Emotion, target: Emotion) -> Result<BTreeSet<InstigatorLabel>> {
    let excluded = match flip_polarity(source, target)? {
        FlipPolarity::Positive => Polarity::Negative,
        FlipPolarity::Negative => Polarity::Positive,
    };
    Ok(InstigatorLabel::ALL
        .iter()
        .copied()
        .filter(|&l| label_polarity(l) != excluded)
        .collect())
}

type PairTable = BTreeMap<(Emotion, Emotion), BTreeSet<InstigatorLabel>>;

fn load_pair_table() -> std::result::Result<PairTable, String> {
    let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(PAIR_TABLE_JSON).map_err(|e| e.to_string())?;
    let mut table = PairTable::new();
    for (key, labels) in raw {
        let (s, t) = key.split_once("->").ok_or_else(|| format!("bad pair key `{key}`"))?;
        let s: Emotion = s.parse()?;
        let t: Emotion = t.parse()?;
        let set = labels
            .iter()
            .map(|l| l.parse::<InstigatorLabel>())
            .collect::<std::result::Result<BTreeSet<_>, _>>()?;
        table.insert((s, t), set);
    }
    Ok(table)
}

/// The static per-pair instigator table.
pub fn pair_table() -> &'static PairTable {
    static TABLE: OnceLock<PairTable> = OnceLock::new();
    TABLE.get_or_init(|| load_pair_table().expect("bundled pair table is well-formed"))
}

/// Fine labels observed for a flip in the pair table.
pub fn pair_table_allowed(source: Emotion, target: Emotion) -> Result<&'static BTreeSet<InstigatorLabel>> {
    pair_table()
        .get(&(source, target))
        .ok_or_else(|| Error::Config(format!("no pair-table entry for flip {source} -> {target}")))
}

/// One row of the bundled label table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub label: String,
    pub coarse: String,
    pub polarity: Polarity,
    pub definition: String,
}

pub fn label_table() -> Vec<LabelEntry> {
    serde_json::from_str(FINE27_JSON).expect("bundled label table is well-formed")
}

/// How output masks are derived for a flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Polarity,
    PairTable,
    Off,
}

impl FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "polarity" => Ok(MaskMode::Polarity),
            "pair_table" => Ok(MaskMode::PairTable),
            "off" => Ok(MaskMode::Off),
            other => Err(format!("unknown mask mode `{other}`")),
        }
    }
}

/// The three label granularities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSetup {
    Fine27,
    CoarseDefn14,
    CoarseCount14,
}

impl LabelSetup {
    pub const ALL: [LabelSetup; 3] = [LabelSetup::CoarseDefn14, LabelSetup::CoarseCount14, LabelSetup::Fine27];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelSetup::Fine27 => "fine27",
            LabelSetup::CoarseDefn14 => "coarse_defn14",
            LabelSetup::CoarseCount14 => "coarse_count14",
        }
    }
}

impl FromStr for LabelSetup {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fine27" => Ok(LabelSetup::Fine27),
            "coarse_defn14" => Ok(LabelSetup::CoarseDefn14),
            "coarse_count14" => Ok(LabelSetup::CoarseCount14),
            other => Err(format!("unknown label setup `{other}`")),
        }
    }
}

/// An ordered output label set together with the projection from fine labels.
///
/// Every fine label maps to exactly one output index, so projecting a fine
/// label set is a total operation in every setup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    setup: LabelSetup,
    labels: Vec<String>,
    fine_index: Vec<usize>,
}

impl LabelSpace {
    pub fn fine27() -> Self {
        LabelSpace {
            setup: LabelSetup::Fine27,
            labels: InstigatorLabel::ALL.iter().map(|l| l.as_str().to_string()).collect(),
            fine_index: (0..InstigatorLabel::ALL.len()).collect(),
        }
    }

    pub fn coarse_defn14() -> Self {
        LabelSpace {
            setup: LabelSetup::CoarseDefn14,
            labels: CoarseLabel::ALL.iter().map(|l| l.as_str().to_string()).collect(),
            fine_index: InstigatorLabel::ALL.iter().map(|&l| coarse_of(l).index()).collect(),
        }
    }

    /// Count-based space with the standard merge threshold.
    pub fn count_based(train: &[EfrInstance]) -> Result<Self> {
        Self::count_based_with_threshold(train, COUNT_MERGE_THRESHOLD)
    }

    /// Labels occurring at least `threshold` times across the gold
    /// per-utterance instigator sets keep their own class; the rest are
    /// merged into `other`, which is dropped when nothing falls into it.
    pub fn count_based_with_threshold(train: &[EfrInstance], threshold: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Invalid(
                "count-based label space needs a non-empty training set".into(),
            ));
        }
        let counts = fine_label_counts(train);
        let kept: Vec<InstigatorLabel> = InstigatorLabel::ALL
            .iter()
            .copied()
            .filter(|l| counts[l.index()] >= threshold)
            .collect();
        let mut labels: Vec<String> = kept.iter().map(|l| l.as_str().to_string()).collect();
        let other = labels.len();
        let merged_any = kept.len() < InstigatorLabel::ALL.len();
        if merged_any {
            labels.push(OTHER_LABEL.to_string());
        }
        let fine_index = InstigatorLabel::ALL
            .iter()
            .map(|l| kept.iter().position(|k| k == l).unwrap_or(other))
            .collect();
        Ok(LabelSpace {
            setup: LabelSetup::CoarseCount14,
            labels,
            fine_index,
        })
    }

    /// Builds the space for `setup`; the count-based space is learned from `train`.
    pub fn for_setup(setup: LabelSetup, train: &[EfrInstance], count_threshold: u64) -> Result<Self> {
        match setup {
            LabelSetup::Fine27 => Ok(Self::fine27()),
            LabelSetup::CoarseDefn14 => Ok(Self::coarse_defn14()),
            LabelSetup::CoarseCount14 => Self::count_based_with_threshold(train, count_threshold),
        }
    }

    pub fn setup(&self) -> LabelSetup {
        self.setup
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn index_of_fine(&self, label: InstigatorLabel) -> usize {
        self.fine_index[label.index()]
    }

    /// Fine labels that project onto output `index`.
    pub fn members(&self, index: usize) -> Vec<InstigatorLabel> {
        InstigatorLabel::ALL
            .iter()
            .copied()
            .filter(|l| self.fine_index[l.index()] == index)
            .collect()
    }

    pub fn project<'a>(&self, labels: impl IntoIterator<Item = &'a InstigatorLabel>) -> BTreeSet<usize> {
        labels.into_iter().map(|&l| self.index_of_fine(l)).collect()
    }

    /// Checks internal consistency; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let dim = self.labels.len();
        if dim == 0 {
            return Err(Error::Config("label space is empty".into()));
        }
        if self.fine_index.len() != InstigatorLabel::ALL.len() {
            return Err(Error::Config(format!(
                "label space maps {} fine labels, expected {}",
                self.fine_index.len(),
                InstigatorLabel::ALL.len()
            )));
        }
        if let Some(bad) = self.fine_index.iter().find(|&&i| i >= dim) {
            return Err(Error::Config(format!("fine label mapped to index {bad} >= {dim}")));
        }
        let mut seen = vec![false; dim];
        for &i in &self.fine_index {
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("label space has an output with no fine members".into()));
        }
        let unique: BTreeSet<&String> = self.labels.iter().collect();
        if unique.len() != dim {
            return Err(Error::Config("duplicate label names in label space".into()));
        }
        Ok(())
    }
}

/// Occurrences of each fine label (indexed by `InstigatorLabel::index`)
/// over all per-utterance instigator sets.
pub fn fine_label_counts(instances: &[EfrInstance]) -> Vec<u64> {
    let mut counts = vec![0u64; InstigatorLabel::ALL.len()];
    for inst in instances {
        for set in &inst.instigators {
            for l in set {
                counts[l.index()] += 1;
            }
        }
    }
    counts
}

/// Output mask over `space` for a flip: an output is allowed iff any of its
/// fine members is allowed.
pub fn allowed_mask(source: Emotion, target: Emotion, space: &LabelSpace, mode: MaskMode) -> Result<Vec<bool>> {
    if source == target {
        return Err(Error::Invalid(format!(
            "mask requested for a non-flip ({source} -> {target})"
        )));
    }
    let fine: BTreeSet<InstigatorLabel> = match mode {
        MaskMode::Off => return Ok(vec![true; space.dim()]),
        MaskMode::Polarity => polarity_allowed(source, target)?,
        MaskMode::PairTable => pair_table_allowed(source, target)?.clone(),
    };
    let mut mask = vec![false; space.dim()];
    for l in fine {
        mask[space.index_of_fine(l)] = true;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Emotion::*;

    #[test]
    fn coarse_examples() {
        assert_eq!(coarse_of(InstigatorLabel::Pain), CoarseLabel::Annoyance);
        assert_eq!(coarse_of(InstigatorLabel::Adoration), CoarseLabel::Dazzle);
        assert_eq!(coarse_of(InstigatorLabel::Shock), CoarseLabel::Shock);
    }

    #[test]
    fn polarity_examples_and_partition_sizes() {
        assert_eq!(label_polarity(InstigatorLabel::Guilt), Polarity::Negative);
        assert_eq!(label_polarity(InstigatorLabel::Nostalgia), Polarity::Ambiguous);
        assert_eq!(label_polarity(InstigatorLabel::Relief), Polarity::Positive);
        let count = |p| InstigatorLabel::ALL.iter().filter(|&&l| label_polarity(l) == p).count();
        assert_eq!(count(Polarity::Positive), 10);
        assert_eq!(count(Polarity::Negative), 11);
        assert_eq!(count(Polarity::Ambiguous), 6);
    }

    #[test]
    fn bundled_table_agrees_with_code() {
        let table = label_table();
        assert_eq!(table.len(), 27);
        for (entry, &label) in table.iter().zip(InstigatorLabel::ALL) {
            assert_eq!(entry.label, label.as_str());
            assert_eq!(entry.coarse, coarse_of(label).as_str());
            assert_eq!(entry.polarity, label_polarity(label));
            assert!(!entry.definition.is_empty());
        }
        // every coarse group is non-empty
        for &c in CoarseLabel::ALL {
            assert!(InstigatorLabel::ALL.iter().any(|&l| coarse_of(l) == c), "{c}");
        }
    }

    #[test]
    fn humour_spelling_is_accepted() {
        assert_eq!("humour".parse::<InstigatorLabel>().unwrap(), InstigatorLabel::Humor);
        assert_eq!("Humor".parse::<InstigatorLabel>().unwrap(), InstigatorLabel::Humor);
        assert!("joyful".parse::<InstigatorLabel>().is_err());
    }

    #[test]
    fn flip_polarity_examples() {
        assert_eq!(flip_polarity(Fear, Joy).unwrap(), FlipPolarity::Positive);
        assert_eq!(flip_polarity(Joy, Neutral).unwrap(), FlipPolarity::Negative);
        assert_eq!(flip_polarity(Neutral, Surprise).unwrap(), FlipPolarity::Positive);
        assert_eq!(flip_polarity(Anger, Sadness).unwrap(), FlipPolarity::Negative);
        assert_eq!(flip_polarity(Joy, Surprise).unwrap(), FlipPolarity::Positive);
        assert!(flip_polarity(Joy, Joy).is_err());
    }

    #[test]
    fn fear_to_joy_polarity_mask() {
        let space = LabelSpace::fine27();
        let mask = allowed_mask(Fear, Joy, &space, MaskMode::Polarity).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 16);
        assert!(!mask[InstigatorLabel::Guilt.index()]);
    }

    #[test]
    fn neutral_to_anger_pair_table_cell() {
        let space = LabelSpace::fine27();
        let mask = allowed_mask(Neutral, Anger, &space, MaskMode::PairTable).unwrap();
        let got: BTreeSet<&str> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| space.label(i))
            .collect();
        let want: BTreeSet<&str> = [
            "abuse",
            "annoyance",
            "awkwardness",
            "boredom",
            "calmness",
            "challenge",
            "cheer",
            "confusion",
            "curiosity",
            "desire",
            "excitement",
            "guilt",
            "horror",
            "humor",
            "loss",
            "nervousness",
            "relief",
            "scold",
            "shock",
            "sympathy",
            "threat",
        ]
        .into_iter()
        .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn pair_table_has_all_42_off_diagonal_cells() {
        let table = pair_table();
        assert_eq!(table.len(), 42);
        for &s in Emotion::ALL {
            for &t in Emotion::ALL {
                assert_eq!(table.contains_key(&(s, t)), s != t);
            }
        }
        assert!(allowed_mask(Joy, Joy, &LabelSpace::fine27(), MaskMode::PairTable).is_err());
    }

    #[test]
    fn others_always_allowed_in_defn_space() {
        let space = LabelSpace::coarse_defn14();
        let others = CoarseLabel::Others.index();
        for &s in Emotion::ALL {
            for &t in Emotion::ALL {
                if s != t {
                    assert!(allowed_mask(s, t, &space, MaskMode::Polarity).unwrap()[others]);
                }
            }
        }
    }

    #[test]
    fn ambiguous_labels_allowed_under_every_polarity_mask() {
        let space = LabelSpace::fine27();
        let mut ever_allowed = vec![false; 27];
        for &s in Emotion::ALL {
            for &t in Emotion::ALL {
                if s == t {
                    continue;
                }
                let mask = allowed_mask(s, t, &space, MaskMode::Polarity).unwrap();
                for &l in InstigatorLabel::ALL {
                    if label_polarity(l) == Polarity::Ambiguous {
                        assert!(mask[l.index()]);
                    }
                    ever_allowed[l.index()] |= mask[l.index()];
                }
            }
        }
        assert!(ever_allowed.iter().all(|&a| a));
    }

    #[test]
    fn defn_space_is_a_valid_projection() {
        let space = LabelSpace::coarse_defn14();
        assert_eq!(space.dim(), 14);
        space.validate().unwrap();
        assert_eq!(space.members(CoarseLabel::Excitement.index()).len(), 3);
        LabelSpace::fine27().validate().unwrap();
    }
}

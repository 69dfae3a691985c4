//! Krippendorff's alpha over annotator files.
//!
//! Units are individual utterances of the shared instances. The trigger layer
//! compares yes/no decisions with the nominal metric; the instigator layer
//! compares per-utterance label sets with the MASI set distance.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::corpus::{AnnotationFile, AnnotationRecord};
use crate::error::{Error, Result};
use crate::taxonomy::InstigatorLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AgreementLayer {
    Trigger,
    Instigator,
}

impl std::str::FromStr for AgreementLayer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "trigger" => Ok(AgreementLayer::Trigger),
            "instigator" => Ok(AgreementLayer::Instigator),
            other => Err(format!("unknown agreement layer `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairAlpha {
    pub first: String,
    pub second: String,
    pub units: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub layer: AgreementLayer,
    pub pairs: Vec<PairAlpha>,
    pub mean: f64,
}

/// Nominal distance: 0 for equal values, 1 otherwise.
pub fn nominal_distance<V: PartialEq>(a: &V, b: &V) -> f64 {
    if a == b {
        0.0
    } else {
        1.0
    }
}

/// MASI distance `1 - J * M` where `J` is the Jaccard index and `M` is 1 for
/// identical sets, 2/3 when one set contains the other, 1/3 for any other
/// overlap and 0 for disjoint sets. Two empty sets are identical.
pub fn masi_distance<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a == b {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    let jaccard = inter as f64 / union as f64;
    let monotonicity = if a.is_subset(b) || b.is_subset(a) {
        2.0 / 3.0
    } else if inter > 0 {
        1.0 / 3.0
    } else {
        0.0
    };
    1.0 - jaccard * monotonicity
}

/// Krippendorff's alpha for `units`, each a list of values assigned by the
/// coders who rated it. Units with fewer than two values are not pairable
/// and are ignored. Returns `None` when nothing is pairable.
///
/// Expected disagreement is computed from value frequencies, so the cost is
/// quadratic in the number of *distinct* values only.
pub fn alpha<V, D>(units: &[Vec<V>], distance: D) -> Option<f64>
where
    V: Ord + Clone,
    D: Fn(&V, &V) -> f64,
{
    let mut n = 0usize;
    let mut observed = 0.0;
    let mut freq: BTreeMap<&V, usize> = BTreeMap::new();
    for unit in units.iter().filter(|u| u.len() >= 2) {
        let m = unit.len();
        n += m;
        let mut within = 0.0;
        for (i, a) in unit.iter().enumerate() {
            for (j, b) in unit.iter().enumerate() {
                if i != j {
                    within += distance(a, b);
                }
            }
            *freq.entry(a).or_default() += 1;
        }
        observed += within / (m - 1) as f64;
    }
    if n < 2 {
        return None;
    }
    let observed = observed / n as f64;
    let mut expected = 0.0;
    for (a, &na) in &freq {
        for (b, &nb) in &freq {
            expected += (na * nb) as f64 * distance(a, b);
        }
    }
    let expected = expected / (n * (n - 1)) as f64;
    if expected == 0.0 {
        // no variation at all: agreement is perfect iff nothing was disputed
        return Some(if observed == 0.0 { 1.0 } else { 0.0 });
    }
    Some(1.0 - observed / expected)
}

fn unit_count(record: &AnnotationRecord, other: &AnnotationRecord, lengths: Option<&BTreeMap<String, usize>>) -> usize {
    if let Some(&n) = lengths.and_then(|m| m.get(&record.instance_id)) {
        return n;
    }
    if let Some(t) = record
        .instance_id
        .rsplit_once('#')
        .and_then(|(_, t)| t.parse::<usize>().ok())
    {
        return t + 1;
    }
    let max_mentioned = |r: &AnnotationRecord| r.triggers.iter().copied().chain(r.instigators.keys().copied()).max();
    max_mentioned(record).max(max_mentioned(other)).map_or(1, |m| m + 1)
}

fn pair_alpha(
    a: &AnnotationFile,
    b: &AnnotationFile,
    layer: AgreementLayer,
    lengths: Option<&BTreeMap<String, usize>>,
) -> Result<PairAlpha> {
    let b_index: BTreeMap<&str, &AnnotationRecord> = b.records.iter().map(|r| (r.instance_id.as_str(), r)).collect();
    let shared: Vec<(&AnnotationRecord, &AnnotationRecord)> = a
        .records
        .iter()
        .filter_map(|ra| b_index.get(ra.instance_id.as_str()).map(|&rb| (ra, rb)))
        .collect();
    if shared.is_empty() {
        return Err(Error::Invalid(format!(
            "annotators {} and {} share no instances",
            a.annotator_id, b.annotator_id
        )));
    }
    let empty = BTreeSet::new();
    let value = |r: &AnnotationRecord, i: usize| -> BTreeSet<InstigatorLabel> {
        r.instigators.get(&i).unwrap_or(&empty).clone()
    };
    let (units, alpha_value) = match layer {
        AgreementLayer::Trigger => {
            let units: Vec<Vec<bool>> = shared
                .iter()
                .flat_map(|(ra, rb)| {
                    (0..unit_count(ra, rb, lengths))
                        .map(move |i| vec![ra.triggers.contains(&i), rb.triggers.contains(&i)])
                })
                .collect();
            let v = alpha(&units, nominal_distance);
            (units.len(), v)
        }
        AgreementLayer::Instigator => {
            let units: Vec<Vec<BTreeSet<InstigatorLabel>>> = shared
                .iter()
                .flat_map(|(ra, rb)| (0..unit_count(ra, rb, lengths)).map(move |i| vec![value(ra, i), value(rb, i)]))
                .collect();
            let v = alpha(&units, masi_distance);
            (units.len(), v)
        }
    };
    let alpha_value = alpha_value.ok_or_else(|| {
        Error::Invalid(format!(
            "annotators {} and {} have no pairable units",
            a.annotator_id, b.annotator_id
        ))
    })?;
    Ok(PairAlpha {
        first: a.annotator_id.clone(),
        second: b.annotator_id.clone(),
        units,
        alpha: alpha_value,
    })
}

/// Pairwise alpha for every annotator pair (in file order) and their mean.
///
/// `lengths` maps instance ids to utterance counts; when absent the count is
/// read from the `#<target_index>` suffix of the instance id.
pub fn krippendorff_alpha(
    files: &[AnnotationFile],
    layer: AgreementLayer,
    lengths: Option<&BTreeMap<String, usize>>,
) -> Result<AgreementReport> {
    if files.len() < 2 {
        return Err(Error::Invalid("agreement needs at least two annotators".into()));
    }
    let mut pairs = Vec::new();
    for i in 0..files.len() {
        for j in i + 1..files.len() {
            pairs.push(pair_alpha(&files[i], &files[j], layer, lengths)?);
        }
    }
    let mean = pairs.iter().map(|p| p.alpha).sum::<f64>() / pairs.len() as f64;
    Ok(AgreementReport { layer, pairs, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masi_cases() {
        let s = |v: &[u8]| v.iter().copied().collect::<BTreeSet<u8>>();
        assert_eq!(masi_distance(&s(&[]), &s(&[])), 0.0);
        assert_eq!(masi_distance(&s(&[1, 2]), &s(&[1, 2])), 0.0);
        assert!((masi_distance(&s(&[1]), &s(&[1, 2])) - (1.0 - 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!((masi_distance(&s(&[1, 3]), &s(&[1, 2])) - (1.0 - (1.0 / 3.0) / 3.0)).abs() < 1e-15);
        assert_eq!(masi_distance(&s(&[1]), &s(&[2])), 1.0);
        assert_eq!(masi_distance(&s(&[]), &s(&[2])), 1.0);
    }

    #[test]
    fn single_annotator_is_rejected() {
        let f = AnnotationFile {
            annotator_id: "a".into(),
            records: vec![],
        };
        assert!(krippendorff_alpha(&[f], AgreementLayer::Trigger, None).is_err());
    }

    #[test]
    fn disjoint_coverage_is_rejected() {
        let rec = |id: &str| AnnotationRecord {
            instance_id: id.into(),
            triggers: BTreeSet::new(),
            instigators: BTreeMap::new(),
        };
        let a = AnnotationFile {
            annotator_id: "a".into(),
            records: vec![rec("x#1")],
        };
        let b = AnnotationFile {
            annotator_id: "b".into(),
            records: vec![rec("y#1")],
        };
        assert!(krippendorff_alpha(&[a, b], AgreementLayer::Trigger, None).is_err());
    }

    #[test]
    fn unit_count_uses_id_suffix() {
        let rec = AnnotationRecord {
            instance_id: "d7#4".into(),
            triggers: BTreeSet::from([1]),
            instigators: BTreeMap::new(),
        };
        assert_eq!(unit_count(&rec, &rec, None), 5);
        let lengths = BTreeMap::from([("d7#4".to_string(), 9)]);
        assert_eq!(unit_count(&rec, &rec, Some(&lengths)), 9);
    }
}

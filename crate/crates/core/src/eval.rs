//! Multi-label scores and report tables.
//!
//! Each (utterance, class) pair is one binary decision. Counts are pooled per
//! class across the scope, and weighted averages use gold support. Any ratio
//! with a zero denominator is 0.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::EfrInstance;
use crate::error::{Error, Result};
use crate::model::{Module, TgifConfig, TgifModel};
use crate::taxonomy::{flip_polarity, is_intra_polarity, FlipPolarity, LabelSetup, LabelSpace};
use crate::training::train;

/// Which utterances are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    AllUtterances,
    TriggersOnly,
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all" | "all_utterances" => Ok(Scope::AllUtterances),
            "triggers" | "triggers_only" => Ok(Scope::TriggersOnly),
            other => Err(format!("unknown scope `{other}`")),
        }
    }
}

/// Label-index sets for each utterance of one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabels {
    pub instance_id: String,
    pub labels: Vec<BTreeSet<usize>>,
    /// Gold trigger flags; only read from the gold side.
    pub triggers: Vec<bool>,
}

impl InstanceLabels {
    pub fn gold(instance: &EfrInstance, space: &LabelSpace) -> Self {
        InstanceLabels {
            instance_id: instance.instance_id.clone(),
            labels: instance.instigators.iter().map(|s| space.project(s)).collect(),
            triggers: instance.trigger_flags.clone(),
        }
    }

    pub fn predicted(prediction: &crate::model::Prediction) -> Self {
        InstanceLabels {
            instance_id: prediction.instance_id.clone(),
            labels: prediction.predicted.clone(),
            triggers: prediction.predicted.iter().map(|s| !s.is_empty()).collect(),
        }
    }
}

pub fn gold_labels(instances: &[EfrInstance], space: &LabelSpace) -> Vec<InstanceLabels> {
    instances.iter().map(|i| InstanceLabels::gold(i, space)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl Metrics {
    /// Builds per-class and weighted scores from raw counts.
    pub fn from_counts(space: &LabelSpace, counts: &[[u64; 3]]) -> Self {
        let per_class: Vec<ClassMetrics> = counts
            .iter()
            .enumerate()
            .map(|(k, &[tp, fp, fn_])| {
                let precision = ratio(tp, tp + fp);
                let recall = ratio(tp, tp + fn_);
                ClassMetrics {
                    label: space.label(k).to_string(),
                    tp,
                    fp,
                    fn_,
                    support: tp + fn_,
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                }
            })
            .collect();
        let support: u64 = per_class.iter().map(|c| c.support).sum();
        let weighted = |f: fn(&ClassMetrics) -> f64| {
            if support == 0 {
                0.0
            } else {
                per_class.iter().map(|c| c.support as f64 * f(c)).sum::<f64>() / support as f64
            }
        };
        Metrics {
            weighted_precision: weighted(|c| c.precision),
            weighted_recall: weighted(|c| c.recall),
            weighted_f1: weighted(|c| c.f1),
            per_class,
            support,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn to_table(&self) -> String {
        let width = self.per_class.iter().map(|c| c.label.len()).max().unwrap_or(5).max(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            "label", "precision", "recall", "f1", "support"
        );
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                c.label, c.precision, c.recall, c.f1, c.support
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
            "weighted", self.weighted_precision, self.weighted_recall, self.weighted_f1, self.support
        );
        out
    }
}

fn check_alignment(gold: &[InstanceLabels], pred: &[InstanceLabels], space: &LabelSpace) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "gold has {} instances but predictions have {}",
            gold.len(),
            pred.len()
        )));
    }
    for (g, p) in gold.iter().zip(pred) {
        if g.instance_id != p.instance_id {
            return Err(Error::Invalid(format!(
                "misaligned instances: gold `{}` vs prediction `{}`",
                g.instance_id, p.instance_id
            )));
        }
        if g.labels.len() != p.labels.len() || g.triggers.len() != g.labels.len() {
            return Err(Error::Invalid(format!(
                "instance {}: gold has {} utterances but prediction has {}",
                g.instance_id,
                g.labels.len(),
                p.labels.len()
            )));
        }
        let out_of_range = g.labels.iter().chain(&p.labels).flatten().find(|&&k| k >= space.dim());
        if let Some(k) = out_of_range {
            return Err(Error::Invalid(format!(
                "instance {}: label index {k} outside a {}-label space",
                g.instance_id,
                space.dim()
            )));
        }
    }
    Ok(())
}

/// Per-class `[tp, fp, fn]` counts.
pub fn confusion_counts(
    gold: &[InstanceLabels],
    pred: &[InstanceLabels],
    space: &LabelSpace,
    scope: Scope,
) -> Result<Vec<[u64; 3]>> {
    check_alignment(gold, pred, space)?;
    let mut counts = vec![[0u64; 3]; space.dim()];
    for (g, p) in gold.iter().zip(pred) {
        for (i, (gs, ps)) in g.labels.iter().zip(&p.labels).enumerate() {
            if scope == Scope::TriggersOnly && !g.triggers[i] {
                continue;
            }
            for &k in gs.intersection(ps) {
                counts[k][0] += 1;
            }
            for &k in ps.difference(gs) {
                counts[k][1] += 1;
            }
            for &k in gs.difference(ps) {
                counts[k][2] += 1;
            }
        }
    }
    Ok(counts)
}

pub fn weighted_prf(
    gold: &[InstanceLabels],
    pred: &[InstanceLabels],
    space: &LabelSpace,
    scope: Scope,
) -> Result<Metrics> {
    let counts = confusion_counts(gold, pred, space, scope)?;
    Ok(Metrics::from_counts(space, &counts))
}

/// Runs `model` over `instances` and scores the predictions.
pub fn evaluate(model: &TgifModel, instances: &[EfrInstance], scope: Scope) -> Result<Metrics> {
    let preds = model.predict_all(instances)?;
    let pred: Vec<InstanceLabels> = preds.iter().map(InstanceLabels::predicted).collect();
    weighted_prf(&gold_labels(instances, &model.space), &pred, &model.space, scope)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedClass {
    pub label: String,
    pub train_support: u64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClasswiseReport {
    pub top: Vec<RankedClass>,
    pub bottom: Vec<RankedClass>,
}

/// Class indices by training support, largest first; ties by label name.
pub fn rank_by_support(space: &LabelSpace, train_support: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..space.dim()).collect();
    order.sort_by(|&a, &b| {
        train_support[b]
            .cmp(&train_support[a])
            .then_with(|| space.label(a).cmp(space.label(b)))
    });
    order
}

/// F1 of the `top_k` most and `bottom_k` least frequent training classes.
pub fn classwise_report(
    metrics: &Metrics,
    space: &LabelSpace,
    train_support: &[u64],
    top_k: usize,
    bottom_k: usize,
) -> Result<ClasswiseReport> {
    let dim = space.dim();
    if train_support.len() != dim || metrics.per_class.len() != dim {
        return Err(Error::Invalid(format!(
            "class-wise report needs {dim} supports and metrics, got {} and {}",
            train_support.len(),
            metrics.per_class.len()
        )));
    }
    if top_k > dim || bottom_k > dim {
        return Err(Error::Invalid(format!(
            "requested top {top_k} / bottom {bottom_k} of only {dim} classes"
        )));
    }
    let order = rank_by_support(space, train_support);
    let row = |k: usize| RankedClass {
        label: space.label(k).to_string(),
        train_support: train_support[k],
        f1: metrics.per_class[k].f1,
    };
    Ok(ClasswiseReport {
        top: order[..top_k].iter().map(|&k| row(k)).collect(),
        bottom: order[dim - bottom_k..].iter().map(|&k| row(k)).collect(),
    })
}

impl ClasswiseReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (title, rows) in [("top", &self.top), ("bottom", &self.bottom)] {
            let _ = writeln!(out, "{title}:");
            for r in rows.iter() {
                let _ = writeln!(out, "  {:<14} {:>6}  f1 {:.4}", r.label, r.train_support, r.f1);
            }
        }
        out
    }
}

/// Direction buckets for flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    NegativeToPositive,
    PositiveToNegative,
    Other,
}

/// Cross-polarity flips go to the bucket of their flip polarity;
/// intra-polarity flips (e.g. joy to surprise) go to `Other`.
pub fn direction_of(instance: &EfrInstance) -> Result<Direction> {
    if is_intra_polarity(instance.source_emotion, instance.target_emotion) {
        return Ok(Direction::Other);
    }
    Ok(match flip_polarity(instance.source_emotion, instance.target_emotion)? {
        FlipPolarity::Positive => Direction::NegativeToPositive,
        FlipPolarity::Negative => Direction::PositiveToNegative,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionalityReport {
    pub negative_to_positive: Metrics,
    pub positive_to_negative: Metrics,
    pub other: Metrics,
    pub instances: [usize; 3],
}

pub fn directionality_report(
    gold: &[InstanceLabels],
    pred: &[InstanceLabels],
    instances: &[EfrInstance],
    space: &LabelSpace,
    scope: Scope,
) -> Result<DirectionalityReport> {
    check_alignment(gold, pred, space)?;
    if instances.len() != gold.len() {
        return Err(Error::Invalid("instances and labels differ in length".into()));
    }
    let mut buckets: [(Vec<InstanceLabels>, Vec<InstanceLabels>); 3] = Default::default();
    for ((inst, g), p) in instances.iter().zip(gold).zip(pred) {
        if inst.instance_id != g.instance_id {
            return Err(Error::Invalid(format!(
                "misaligned instances: `{}` vs `{}`",
                inst.instance_id, g.instance_id
            )));
        }
        let b = match direction_of(inst)? {
            Direction::NegativeToPositive => 0,
            Direction::PositiveToNegative => 1,
            Direction::Other => 2,
        };
        buckets[b].0.push(g.clone());
        buckets[b].1.push(p.clone());
    }
    let score = |b: &(Vec<InstanceLabels>, Vec<InstanceLabels>)| weighted_prf(&b.0, &b.1, space, scope);
    Ok(DirectionalityReport {
        negative_to_positive: score(&buckets[0])?,
        positive_to_negative: score(&buckets[1])?,
        other: score(&buckets[2])?,
        instances: [buckets[0].0.len(), buckets[1].0.len(), buckets[2].0.len()],
    })
}

impl DirectionalityReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>9} {:>9} {:>9} {:>9}\n",
            "direction", "instances", "precision", "recall", "f1"
        );
        for (name, m, n) in [
            ("negative->positive", &self.negative_to_positive, self.instances[0]),
            ("positive->negative", &self.positive_to_negative, self.instances[1]),
            ("other", &self.other, self.instances[2]),
        ] {
            let _ = writeln!(
                out,
                "{:<24} {:>9} {:>9.4} {:>9.4} {:>9.4}",
                name, n, m.weighted_precision, m.weighted_recall, m.weighted_f1
            );
        }
        out
    }
}

/// Module sets of the four ablation rows.
pub fn ablation_rows() -> [(&'static str, Vec<Module>); 4] {
    [
        ("GUS", vec![Module::Gus]),
        ("+ GES", vec![Module::Gus, Module::Ges]),
        ("+ GSS", vec![Module::Gus, Module::Ges, Module::Gss]),
        ("+ SSES (TGIF)", Module::ALL.to_vec()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub modules: Vec<Module>,
    /// Dev weighted-F1 per setup, in the order of `AblationReport::setups`.
    pub dev_wf1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub setups: Vec<LabelSetup>,
    pub rows: Vec<AblationRow>,
}

/// Trains every (row, setup) cell with the same seed and reports the dev
/// weighted-F1 of the kept parameters. Cells train in parallel.
pub fn ablation_report(
    train_set: &[EfrInstance],
    dev_set: &[EfrInstance],
    config: &TgifConfig,
    seed: u64,
) -> Result<AblationReport> {
    ablation_report_for(train_set, dev_set, config, seed, &LabelSetup::ALL)
}

pub fn ablation_report_for(
    train_set: &[EfrInstance],
    dev_set: &[EfrInstance],
    config: &TgifConfig,
    seed: u64,
    setups: &[LabelSetup],
) -> Result<AblationReport> {
    let rows = ablation_rows();
    let cells: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..setups.len()).map(move |s| (r, s)))
        .collect();
    let scores: Vec<f64> = cells
        .par_iter()
        .map(|&(r, s)| {
            let mut cfg = config.clone();
            cfg.enabled_modules = rows[r].1.iter().copied().collect();
            cfg.label_setup = setups[s];
            let outcome = train(train_set, dev_set, &cfg, seed)?;
            Ok(evaluate(&outcome.model, dev_set, Scope::AllUtterances)?.weighted_f1)
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        setups: setups.to_vec(),
        rows: rows
            .iter()
            .enumerate()
            .map(|(r, (name, modules))| AblationRow {
                name: name.to_string(),
                modules: modules.clone(),
                dev_wf1: scores[r * setups.len()..(r + 1) * setups.len()].to_vec(),
            })
            .collect(),
    })
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16}", "model");
        for s in &self.setups {
            let _ = write!(out, " {:>14}", s.as_str());
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<16}", row.name);
            for v in &row.dev_wf1 {
                let _ = write!(out, " {:>14.4}", v);
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(id: &str, sets: &[&[usize]]) -> InstanceLabels {
        InstanceLabels {
            instance_id: id.into(),
            labels: sets.iter().map(|s| s.iter().copied().collect()).collect(),
            triggers: sets.iter().map(|s| !s.is_empty()).collect(),
        }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let space = LabelSpace::fine27();
        let gold = vec![labels("a#1", &[&[0, 3], &[]]), labels("b#2", &[&[], &[5], &[5]])];
        let m = weighted_prf(&gold, &gold, &space, Scope::AllUtterances).unwrap();
        assert_eq!(
            (m.weighted_precision, m.weighted_recall, m.weighted_f1),
            (1.0, 1.0, 1.0)
        );
        assert_eq!(m.support, 4);
        let empty = vec![labels("a#1", &[&[], &[]]), labels("b#2", &[&[], &[], &[]])];
        let m = weighted_prf(&gold, &empty, &space, Scope::AllUtterances).unwrap();
        assert_eq!(
            (m.weighted_precision, m.weighted_recall, m.weighted_f1),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn misaligned_ids_are_rejected() {
        let space = LabelSpace::fine27();
        let a = vec![labels("a#1", &[&[0], &[]])];
        let b = vec![labels("b#1", &[&[0], &[]])];
        assert!(weighted_prf(&a, &b, &space, Scope::AllUtterances).is_err());
        let c = vec![labels("a#1", &[&[0]])];
        assert!(weighted_prf(&a, &c, &space, Scope::AllUtterances).is_err());
    }

    #[test]
    fn trigger_scope_skips_non_triggers() {
        let space = LabelSpace::fine27();
        let gold = vec![labels("a#1", &[&[], &[2]])];
        let pred = vec![labels("a#1", &[&[2], &[2]])];
        let all = weighted_prf(&gold, &pred, &space, Scope::AllUtterances).unwrap();
        let trig = weighted_prf(&gold, &pred, &space, Scope::TriggersOnly).unwrap();
        assert_eq!(all.weighted_precision, 0.5);
        assert_eq!(trig.weighted_precision, 1.0);
    }

    #[test]
    fn ranking_breaks_ties_by_name() {
        let space = LabelSpace::coarse_defn14();
        let order = rank_by_support(&space, &[1; 14]);
        let names: Vec<&str> = order.iter().map(|&k| space.label(k)).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let m = Metrics::from_counts(&space, &[[0; 3]; 14]);
        assert!(classwise_report(&m, &space, &[1; 14], 15, 1).is_err());
    }
}

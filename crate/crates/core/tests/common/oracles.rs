use std::collections::{BTreeMap, BTreeSet};

use efr::corpus::{AnnotationFile, AnnotationRecord, Dialogue, Emotion};
use efr::eval::{InstanceLabels, Scope};
use efr::taxonomy::InstigatorLabel;
use rand::Rng;

/// For each utterance, scan backwards for the same speaker's previous turn.
pub fn flips_by_backward_scan(d: &Dialogue) -> Vec<(usize, Emotion, Emotion)> {
    let u = &d.utterances;
    let mut out = Vec::new();
    for i in 0..u.len() {
        for j in (0..i).rev() {
            if u[j].speaker == u[i].speaker {
                if u[j].emotion != u[i].emotion {
                    out.push((i, u[j].emotion, u[i].emotion));
                }
                break;
            }
        }
    }
    out
}

pub fn random_sets<R: Rng>(rng: &mut R, n: usize, labels: usize, density: f64) -> Vec<BTreeSet<usize>> {
    (0..n)
        .map(|_| (0..labels).filter(|_| rng.gen_bool(density)).collect())
        .collect()
}

pub fn random_case<R: Rng>(rng: &mut R, labels: usize) -> (Vec<InstanceLabels>, Vec<InstanceLabels>) {
    let instances = rng.gen_range(1..6);
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for i in 0..instances {
        let t = rng.gen_range(1..6);
        let g = random_sets(rng, t, labels, 0.08);
        let triggers = g.iter().map(|s| !s.is_empty() || rng.gen_bool(0.2)).collect();
        let id = format!("i{i}");
        gold.push(InstanceLabels {
            instance_id: id.clone(),
            labels: g,
            triggers,
        });
        pred.push(InstanceLabels {
            instance_id: id,
            labels: random_sets(rng, t, labels, 0.1),
            triggers: vec![false; t],
        });
    }
    (gold, pred)
}

pub fn prf_oracle(
    gold: &[InstanceLabels],
    pred: &[InstanceLabels],
    labels: usize,
    scope: Scope,
) -> (Vec<[u64; 3]>, [f64; 3]) {
    let mut counts = vec![[0u64; 3]; labels];
    for k in 0..labels {
        for (g, p) in gold.iter().zip(pred) {
            for u in 0..g.labels.len() {
                if scope == Scope::TriggersOnly && !g.triggers[u] {
                    continue;
                }
                let (in_g, in_p) = (g.labels[u].contains(&k), p.labels[u].contains(&k));
                match (in_g, in_p) {
                    (true, true) => counts[k][0] += 1,
                    (false, true) => counts[k][1] += 1,
                    (true, false) => counts[k][2] += 1,
                    (false, false) => {}
                }
            }
        }
    }
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut sums = [0.0; 3];
    let mut support = 0u64;
    for &[tp, fp, fn_] in &counts {
        let p = div(tp, tp + fp);
        let r = div(tp, tp + fn_);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let s = (tp + fn_) as f64;
        sums[0] += s * p;
        sums[1] += s * r;
        sums[2] += s * f;
        support += tp + fn_;
    }
    let weighted = sums.map(|x| if support == 0 { 0.0 } else { x / support as f64 });
    (counts, weighted)
}

/// Alpha from an explicit coincidence matrix over nominal values.
pub fn coincidence_alpha(units: &[Vec<u32>]) -> f64 {
    let mut o: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for unit in units.iter().filter(|u| u.len() >= 2) {
        let m = unit.len() as f64;
        for i in 0..unit.len() {
            for j in 0..unit.len() {
                if i != j {
                    *o.entry((unit[i], unit[j])).or_default() += 1.0 / (m - 1.0);
                }
            }
        }
    }
    let mut n_c: BTreeMap<u32, f64> = BTreeMap::new();
    for (&(c, _), &v) in &o {
        *n_c.entry(c).or_default() += v;
    }
    let n: f64 = n_c.values().sum();
    let d_o: f64 = o.iter().filter(|((c, k), _)| c != k).map(|(_, v)| v).sum::<f64>() / n;
    let mut d_e = 0.0;
    for (c, nc) in &n_c {
        for (k, nk) in &n_c {
            if c != k {
                d_e += nc * nk;
            }
        }
    }
    1.0 - d_o / (d_e / (n * (n - 1.0)))
}

pub fn random_annotator<R: Rng>(rng: &mut R, id: &str, instances: usize) -> AnnotationFile {
    AnnotationFile {
        annotator_id: id.into(),
        records: (0..instances)
            .map(|i| {
                let triggers: BTreeSet<usize> = (0..4).filter(|_| rng.gen_bool(0.5)).collect();
                let instigators = triggers
                    .iter()
                    .map(|&u| {
                        let l = InstigatorLabel::ALL[rng.gen_range(0..InstigatorLabel::ALL.len())];
                        (u, BTreeSet::from([l]))
                    })
                    .collect();
                AnnotationRecord {
                    instance_id: format!("r{i}#3"),
                    triggers,
                    instigators,
                }
            })
            .collect(),
    }
}

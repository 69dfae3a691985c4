//! Krippendorff's alpha between two annotators on both annotation layers.
//!
//! `cargo run -p efr --example agreement`

use std::collections::BTreeMap;

use efr::agreement::{krippendorff_alpha, AgreementLayer};
use efr::demo::shipped;

pub fn run_example() -> efr::Result<[f64; 2]> {
    let files = shipped::learnability_annotations()?;
    let lengths: BTreeMap<String, usize> = shipped::learnability_instances()?
        .into_iter()
        .map(|i| (i.instance_id.clone(), i.len()))
        .collect();
    let mut out = [0.0; 2];
    for (slot, layer) in [AgreementLayer::Trigger, AgreementLayer::Instigator]
        .into_iter()
        .enumerate()
    {
        let report = krippendorff_alpha(&files, layer, Some(&lengths))?;
        for pair in &report.pairs {
            println!(
                "{layer:?}: {} vs {} over {} units, alpha = {:.4}",
                pair.first, pair.second, pair.units, pair.alpha
            );
        }
        out[slot] = report.mean;
    }
    Ok(out)
}

fn main() -> efr::Result<()> {
    run_example().map(|_| ())
}

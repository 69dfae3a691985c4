//! Label spaces and the per-flip masks over instigator labels.
//!
//! `cargo run -p efr --example taxonomy_masks`

use efr::corpus::Emotion;
use efr::taxonomy::{allowed_mask, LabelSpace, MaskMode};

pub fn run_example() -> efr::Result<Vec<usize>> {
    let fine = LabelSpace::fine27();
    let coarse = LabelSpace::coarse_defn14();
    println!("fine27: {} labels, coarse_defn14: {} labels", fine.dim(), coarse.dim());
    let mut widths = Vec::new();
    for (source, target) in [
        (Emotion::Fear, Emotion::Joy),
        (Emotion::Joy, Emotion::Anger),
        (Emotion::Neutral, Emotion::Surprise),
    ] {
        for (mode, name) in [(MaskMode::Polarity, "polarity"), (MaskMode::PairTable, "pair table")] {
            let mask = allowed_mask(source, target, &fine, mode)?;
            let allowed: Vec<&str> = (0..fine.dim()).filter(|&k| mask[k]).map(|k| fine.label(k)).collect();
            println!(
                "{source} -> {target} [{name}] {} allowed: {}",
                allowed.len(),
                allowed.join(", ")
            );
            widths.push(allowed.len());
        }
    }
    Ok(widths)
}

fn main() -> efr::Result<()> {
    run_example().map(|_| ())
}

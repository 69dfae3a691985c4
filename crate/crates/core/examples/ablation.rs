//! Encoder ablation on a corpus whose labels follow the emotion sequence:
//! adding the emotion-sequence encoder should lift dev F1 well above the
//! utterance-only model.
//!
//! `cargo run -p efr --release --example ablation [epochs] [all]`

use efr::demo::shipped;
use efr::eval::{ablation_report_for, AblationReport};
use efr::model::TgifConfig;
use efr::taxonomy::LabelSetup;

pub fn run_example(epochs: usize, setups: &[LabelSetup]) -> efr::Result<AblationReport> {
    let config = TgifConfig {
        epochs,
        ..TgifConfig::default()
    };
    let report = ablation_report_for(&shipped::emotion_train()?, &shipped::emotion_dev()?, &config, 7, setups)?;
    print!("{}", report.to_table());
    Ok(report)
}

fn main() -> efr::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let setups: &[LabelSetup] = if args.next().as_deref() == Some("all") {
        &LabelSetup::ALL
    } else {
        &[LabelSetup::Fine27]
    };
    run_example(epochs, setups).map(|_| ())
}

//! Scores a trained model on held-out data: weighted metrics, flip-direction
//! buckets and the most and least frequent classes.
//!
//! `cargo run -p efr --release --example evaluate [epochs]`

use efr::demo::shipped;
use efr::eval::{classwise_report, directionality_report, gold_labels, weighted_prf, InstanceLabels, Scope};
use efr::instances::space_counts;
use efr::model::TgifConfig;
use efr::training::train;

pub fn run_example(epochs: usize) -> efr::Result<f64> {
    let train_set = shipped::emotion_train()?;
    let dev = shipped::emotion_dev()?;
    let config = TgifConfig {
        epochs,
        ..TgifConfig::default()
    };
    let model = train(&train_set, &dev, &config, 7)?.model;
    let gold = gold_labels(&dev, &model.space);
    let pred: Vec<InstanceLabels> = model.predict_all(&dev)?.iter().map(InstanceLabels::predicted).collect();
    let metrics = weighted_prf(&gold, &pred, &model.space, Scope::AllUtterances)?;
    println!("{}", metrics.to_table());
    let triggers = weighted_prf(&gold, &pred, &model.space, Scope::TriggersOnly)?;
    println!("trigger utterances only: weighted F1 {:.4}\n", triggers.weighted_f1);
    println!(
        "{}",
        directionality_report(&gold, &pred, &dev, &model.space, Scope::AllUtterances)?.to_table()
    );
    let support = space_counts(&train_set, &model.space);
    print!(
        "{}",
        classwise_report(&metrics, &model.space, &support, 3, 3)?.to_table()
    );
    Ok(metrics.weighted_f1)
}

fn main() -> efr::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    run_example(epochs).map(|_| ())
}

//! Trains on the 64-dialogue demo corpus, saves a checkpoint, reloads it and
//! prints the predictions for one instance.
//!
//! `cargo run -p efr --release --example train_demo [epochs]`

use efr::demo::shipped;
use efr::eval::{evaluate, Scope};
use efr::model::TgifConfig;
use efr::training::{load_checkpoint, save_checkpoint, train};

pub fn run_example(epochs: usize) -> efr::Result<f64> {
    let instances = shipped::learnability_instances()?;
    let config = TgifConfig {
        epochs,
        ..TgifConfig::default()
    };
    let outcome = train(&instances, &instances, &config, 7)?;
    for entry in outcome.log.iter().filter(|e| e.epoch % 10 == 0 || e.epoch == epochs) {
        println!("{}", entry.to_json_line());
    }
    let dir = std::env::temp_dir().join(format!("efr-train-demo-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| efr::Error::Runtime(e.to_string()))?;
    let path = dir.join("demo.ckpt");
    save_checkpoint(&outcome.model, &path)?;
    let model = load_checkpoint(&path)?;
    let _ = std::fs::remove_dir_all(&dir);
    let sample = &instances[0];
    print!("{}", model.forward(sample)?.to_table(sample, &model.space));
    let wf1 = evaluate(&model, &instances, Scope::AllUtterances)?.weighted_f1;
    println!("training-set weighted F1 after reload: {wf1:.4}");
    Ok(wf1)
}

fn main() -> efr::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    run_example(epochs).map(|_| ())
}

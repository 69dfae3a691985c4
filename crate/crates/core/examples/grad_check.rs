//! Checks reverse-mode gradients of the full model against centered finite
//! differences on a three-utterance, two-speaker instance.
//!
//! `cargo run -p efr --release --example grad_check`

use efr::corpus::parse_instances_str;
use efr::model::{TgifConfig, TgifModel};
use efr::tensor::gradcheck::grad_check;
use efr::training::focal_loss_on;

const INSTANCE: &str = r#"{"instance_id":"g#2","dialogue_id":"g","utterances":[{"index":0,"speaker":"Ann","text":"you took my seat","emotion":"fear"},{"index":1,"speaker":"Bo","text":"relax it is only a chair","emotion":"neutral"},{"index":2,"speaker":"Ann","text":"oh great so funny","emotion":"joy"}],"target_index":2,"target_speaker":"Ann","source_emotion":"fear","target_emotion":"joy","triggers":[1,2],"instigators":{"1":["calmness"],"2":["humor","relief"]}}"#;

pub fn run_example() -> efr::Result<f64> {
    let instance = parse_instances_str(INSTANCE, "inline")?.remove(0);
    let config = TgifConfig::default();
    let model = TgifModel::for_training(config, std::slice::from_ref(&instance), 11)?;
    let y = model.targets(&instance);
    let mask = model.mask(&instance)?;
    let started = std::time::Instant::now();
    let report = grad_check(&model.params, 1e-5, 0, |tape| {
        let p = model.forward_on(tape, &instance)?;
        focal_loss_on(tape, p, &y, &mask, model.config.focal_gamma, model.config.focal_alpha)
    })?;
    println!(
        "checked {} coordinates in {:.1}s; max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        report.coordinates,
        started.elapsed().as_secs_f64(),
        report.max_rel_error,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric
    );
    Ok(report.max_rel_error)
}

fn main() -> efr::Result<()> {
    let err = run_example()?;
    println!("{}", if err < 1e-4 { "PASS" } else { "FAIL" });
    Ok(())
}

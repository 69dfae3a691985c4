//! Flip matrix, label distributions and polarity totals of a corpus.
//!
//! `cargo run -p efr --example corpus_stats [instances.jsonl]`

use efr::corpus::read_instances;
use efr::demo::shipped;
use efr::instances::{corpus_stats, StatsReport};

pub fn run_example(path: Option<&str>) -> efr::Result<StatsReport> {
    let instances = match path {
        Some(p) => read_instances(p)?,
        None => shipped::learnability_instances()?,
    };
    let report = corpus_stats(&instances);
    print!("{}", report.to_table());
    Ok(report)
}

fn main() -> efr::Result<()> {
    let path = std::env::args().nth(1);
    run_example(path.as_deref()).map(|_| ())
}

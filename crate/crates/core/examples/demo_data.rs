//! Regenerates the demo corpora under `data/demo/`.
//!
//! `cargo run -p efr --example demo_data [out_dir]`

use std::path::PathBuf;

fn run_example(out: PathBuf) -> efr::Result<()> {
    efr::demo::write_demo_files(&out)?;
    for (name, text) in efr::demo::demo_files()? {
        println!("{:<34} {:>5} lines", name, text.lines().count());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> efr::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/demo"));
    run_example(out)
}

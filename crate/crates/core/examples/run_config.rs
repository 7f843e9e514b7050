//! Run selected stages from a JSON configuration and write the report.
//!
//! Usage: cargo run --release --example run_config -- examples/configs/paper-toy.json out/

use std::path::PathBuf;
use wavekam::config::RunConfig;
use wavekam::suites::{emit_report, render, run_experiment, Stage};

fn main() -> wavekam::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/paper-toy.json").into());
    let out = PathBuf::from(args.next().unwrap_or_else(|| "wavekam-out".into()));
    let cfg = RunConfig::load(path.as_ref())?;
    let (manifest, artifacts) = run_experiment(&cfg, &[Stage::Spectrum, Stage::Magnus, Stage::Algebra])?;
    for s in &manifest.stages {
        print!("{}", render(s));
    }
    emit_report(&manifest, &artifacts, &out)?;
    println!("{} files in {}", artifacts.len() + 1, out.display());
    Ok(())
}

//! Monte-Carlo estimate of the excluded frequency measure for three values of gamma.
//!
//! Usage: cargo run --release --example measure -- [samples]

use wavekam::config::RunConfig;
use wavekam::kam::KamParameters;
use wavekam::melnikov::{estimate_measure, FinalBlockPipeline, MeasureConfig};

fn main() -> wavekam::Result<()> {
    let samples = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let cfg = RunConfig::paper_toy();
    let lat = cfg.stages.sample_lattice;
    let q = cfg.q.build(1)?;
    let kam = KamParameters { p_max: cfg.stages.measure_p_max, lipschitz: false, ..cfg.kam_parameters() };
    let pipeline = FinalBlockPipeline::new(&q, cfg.v.build(lat)?, lat, kam)?;
    let base = cfg.melnikov_parameters(pipeline.sd.m_sq);
    let mc = MeasureConfig { samples, ..MeasureConfig::default() };
    let sw = estimate_measure(&base, &mc, &pipeline, &q)?;
    for r in &sw.rows {
        println!("gamma = {:.0e}  m_r = {:.4} [{:.4}, {:.4}]", r.gamma, r.m_r.estimate, r.m_r.lo, r.m_r.hi);
    }
    println!("exponent {:.3}, monotone {}", sw.exponent, sw.monotone);
    Ok(())
}

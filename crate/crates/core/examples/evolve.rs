//! Sobolev norms along the driven flow at a non-resonant frequency and at a parametric resonance.

use wavekam::config::RunConfig;
use wavekam::evolution::{band_width, default_horizon, parametric_resonance, sobolev_trace, Propagator, BAND_C_PRIME};
use wavekam::schrodinger::spectrum;
use wavekam::suites::smooth_datum;

fn main() -> wavekam::Result<()> {
    let cfg = RunConfig::paper_toy();
    let lat = cfg.stages.sample_lattice;
    let sd = spectrum(&cfg.q.build(1)?, lat.j)?;
    let s0 = smooth_datum(&sd)?;

    let omega = cfg.omega_at(cfg.m);
    let p = Propagator::new(&sd, &cfg.v.build(lat)?, lat, &omega)?;
    let tr = p.integrate(&s0, default_horizon(&omega), p.max_dt(), 10)?;
    let st = sobolev_trace(&tr, 1.0, band_width(BAND_C_PRIME, cfg.m, cfg.alpha))?;
    println!("omega = {:.2}: H^1 ratio in [{:.6}, {:.6}], band +-{:.3}", omega[0], st.inf_ratio, st.sup_ratio, st.band);

    let (v, w) = parametric_resonance(&sd, lat, 1, 0.2)?;
    let p = Propagator::new(&sd, &v, lat, &[w])?;
    let tr = p.integrate(&s0, default_horizon(&[w]), p.max_dt(), 200)?;
    let st = sobolev_trace(&tr, 1.0, band_width(BAND_C_PRIME, w / 1.5, cfg.alpha))?;
    println!("omega = 2 lambda_1 = {w:.4}: H^1 ratio reaches {:.2}", st.sup_ratio);
    Ok(())
}

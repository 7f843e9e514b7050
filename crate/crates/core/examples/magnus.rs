//! Magnus normal form: delta^(0) of the transformed driving across M.

use wavekam::config::RunConfig;
use wavekam::craig_wayne::build_basis_matrix;
use wavekam::kam::setup;
use wavekam::schrodinger::spectrum;
use wavekam::stats::loglog_slope;

fn main() -> wavekam::Result<()> {
    let cfg = RunConfig::paper_toy();
    let lat = cfg.lattice;
    let sd = spectrum(&cfg.q.build(1)?, lat.j)?;
    let basis = build_basis_matrix(&sd);
    let v = cfg.v.build(lat)?;
    let mut pts = Vec::new();
    for m in [1e2, 1e3, 1e4] {
        let (ops, st) = setup(&sd, &basis, &v, lat, &cfg.omega_at(m), m, cfg.gamma0, cfg.tau0, &cfg.kam_parameters())?;
        let d = st.history[0].delta_s0.total;
        println!("M = {m:>7.0e}  delta^(0) = {d:.4e}  structure defect {:.1e}", ops.structure().max_structure());
        pts.push((m, d));
    }
    println!("slope {:.4}", loglog_slope(&pts));
    Ok(())
}

//! KAM iteration on the paper toy: delta history and final eigenvalue shifts.

use wavekam::config::RunConfig;
use wavekam::craig_wayne::build_basis_matrix;
use wavekam::kam::{final_spectrum, kam_iterate, setup};
use wavekam::schrodinger::spectrum;

fn main() -> wavekam::Result<()> {
    let cfg = RunConfig::paper_toy();
    let lat = cfg.lattice;
    let sd = spectrum(&cfg.q.build(1)?, lat.j)?;
    let basis = build_basis_matrix(&sd);
    let params = cfg.kam_parameters();
    let (_, st) = setup(&sd, &basis, &cfg.v.build(lat)?, lat, &cfg.omega_at(cfg.m), cfg.m, cfg.gamma0, cfg.tau0, &params)?;
    let res = kam_iterate(st, &params)?;
    for r in &res.state.history {
        println!("p = {}  N_p = {:.3e}  delta_s0 = {:.3e}  |X| = {:.3e}", r.p, r.n_p, r.delta_s0.total, r.x_norm);
    }
    let fs = final_spectrum(&res.state, cfg.alpha);
    for row in fs.rows.iter().take(5) {
        println!("n = {}  eps = {:?}", row.n, row.eps);
    }
    println!("sup_n <n>^alpha |eps_n| = {:.3e}, converged: {}", fs.sup_weighted, res.converged);
    Ok(())
}

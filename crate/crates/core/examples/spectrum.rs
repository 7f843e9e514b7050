//! Eigenvalues of L_q = -d_xx + 1 + cos x and the Lyapunov-Schmidt check against a dense solve.

use wavekam::config::RunConfig;
use wavekam::schrodinger::spectrum;
use wavekam::suites::{certificates, spectrum_suite};

fn main() -> wavekam::Result<()> {
    let cfg = RunConfig::paper_toy();
    let sd = spectrum(&cfg.q.build(1)?, 16)?;
    println!("  j      lambda_j");
    for j in -4i64..=4 {
        println!("{j:>3}  {:>12.8}", sd.lambda[sd.label_index(j)]);
    }
    let (rows, _) = certificates(&cfg)?;
    let out = spectrum_suite(&cfg, &rows)?;
    for c in &out.report.checks {
        println!("{}: {:.3e}", c.name, c.value);
    }
    Ok(())
}

//! Square root of L_q from the symbol calculus, compared with the spectral square root.

use wavekam::config::RunConfig;
use wavekam::psdo::{complex_power, ContourSpec, EllipticSymbol, SymbolShape};
use wavekam::schrodinger::spectrum;
use wavekam::Lattice;

fn main() -> wavekam::Result<()> {
    let j = 64;
    let lat = Lattice::new(1, 1, j)?;
    let q = RunConfig::paper_toy().q.build(1)?;
    let a = EllipticSymbol::schrodinger(&q, SymbolShape::spatial(&lat, 8))?;
    let spec = ContourSpec { xi_scale: 4.0, ..Default::default() };
    let b = complex_power(&a, 0.5, 3, &spec)?.quantize(&lat)?;
    let diff = b.mode(lat.zero_ell()) - spectrum(&q, j)?.spectral_power(0.5);
    println!("|j|   max_j' |B_sym - B_spec|[j][j']");
    for aj in (0..=32).step_by(4) {
        let row = (0..diff.ncols()).map(|c| diff[(j + aj, c)].norm().max(diff[(j - aj, c)].norm())).fold(0.0, f64::max);
        println!("{aj:>3}   {row:.3e}");
    }
    Ok(())
}

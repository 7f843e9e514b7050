//! Block-operator algebra: ad_X V and the Lie series against dense matrices, s-decay norms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavekam::opmatrix::{ad, lie_conjugate, max_abs};
use wavekam::oracle::{dense_lie, dense_pair, random_structured_pair};
use wavekam::Lattice;

fn main() -> wavekam::Result<()> {
    let lat = Lattice::new(1, 1, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_structured_pair(lat, 0.05, 0, &mut rng);
    let v = random_structured_pair(lat, 1.0, 1, &mut rng);
    let w = ad(&x, &v)?;
    println!("|X|_(s0,a,a) = {:.4e}", x.pair_norm(lat.s0(), 0.5, 0.5));
    println!("|ad_X V|_(s0,a,0) = {:.4e}", w.pair_norm(lat.s0(), 0.5, 0.0));
    let (res, _) = lie_conjugate(&x, &v, 1e-15)?;
    let err = max_abs(&(dense_lie(&x, &v)? - dense_pair(&res)?));
    println!("Lie series vs dense exp: {err:.2e}");
    Ok(())
}

//! Nine-rotation basis and the reshuffled-rank bounds under per-frame
//! rotation ambiguity.
//!
//! cargo run --release --example rank_theorem

use nrsfm::geometry::random_rotation;
use nrsfm::rank_oracle::{
    basis_matrix, basis_rotations, decompose_rotation, numeric_rank, reconstruct, summary_csv,
    theorem1_experiment, DEFAULT_TOL,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nrsfm::Result<()> {
    let basis = basis_rotations();
    let valid = basis.iter().all(|b| b.is_valid(1e-12));
    println!(
        "basis rotations valid: {valid}, rank of vectorized basis: {}",
        numeric_rank(&basis_matrix(), DEFAULT_TOL)?
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let worst = (0..1000)
        .map(|_| {
            let r = random_rotation(&mut rng);
            (reconstruct(&decompose_rotation(&r)) - r.matrix()).norm()
        })
        .fold(0.0, f64::max);
    println!("max reconstruction residual over 1000 rotations: {worst:.2e}");

    let r = random_rotation(&mut rng);
    let c = decompose_rotation(&r);
    println!(
        "coefficients of one rotation: {:?}",
        c.map(|x| (x * 1e4).round() / 1e4)
    );

    let mut reports = (1..=9)
        .map(|s| theorem1_experiment(3, 60, 20, s, 20, DEFAULT_TOL, 0))
        .collect::<nrsfm::Result<Vec<_>>>()?;
    reports.push(theorem1_experiment(3, 120, 20, 12, 20, DEFAULT_TOL, 0)?);
    print!("{}", summary_csv(&reports));
    Ok(())
}

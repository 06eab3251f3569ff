//! A per-frame rotation ambiguity leaves the reprojection loss unchanged but
//! raises the nuclear norm of the reshuffled shapes.
//!
//! cargo run --release --example ambiguity_loss

use ndarray::Array2;
use nrsfm::data::{synth_sequence, SyntheticSpec};
use nrsfm::diffcore::Tape;
use nrsfm::geometry::{random_rotation, Rotation3};
use nrsfm::losses::{loss_data, loss_nuclear, rotation_rows};
use nrsfm::model::rotation_operator;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn losses(
    w: &Array2<f64>,
    rotations: &[Rotation3],
    shapes: &Array2<f64>,
) -> nrsfm::Result<(f64, f64)> {
    let mut t = Tape::<f64>::new();
    let (w, r, s) = (
        t.leaf(w.clone()),
        t.leaf(rotation_rows(rotations)),
        t.leaf(shapes.clone()),
    );
    let data = loss_data(&mut t, w, r, s)?;
    let nuc = loss_nuclear(&mut t, s)?;
    Ok((t.scalar_value(data), t.scalar_value(nuc)))
}

fn main() -> nrsfm::Result<()> {
    let spec = SyntheticSpec {
        seed: 2,
        ..SyntheticSpec::new(40, 12, 3)
    };
    let d = synth_sequence(&spec)?;
    let shapes = d.shapes.clone().expect("ground truth");
    let rotations = d.rotations.clone().expect("ground truth");
    let (data0, nuc0) = losses(&d.observations, &rotations, &shapes)?;
    println!("ground truth: data {data0:.2e}, nuclear {nuc0:.4}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..5 {
        // R_i -> R_i Q_i and S_i -> Q_i^T S_i keeps every projection.
        let q: Vec<Rotation3> = (0..d.frames()).map(|_| random_rotation(&mut rng)).collect();
        let rots: Vec<Rotation3> = rotations
            .iter()
            .zip(&q)
            .map(|(r, q)| r.compose(q))
            .collect();
        let mut moved = shapes.clone();
        for (i, qi) in q.iter().enumerate() {
            let row = shapes
                .row(i)
                .insert_axis(ndarray::Axis(0))
                .dot(&rotation_operator::<f64>(&qi.transpose(), d.points()));
            moved.row_mut(i).assign(&row.row(0));
        }
        let (data, nuc) = losses(&d.observations, &rots, &moved)?;
        println!(
            "trial {trial}: data {data:.2e}, nuclear {nuc:.4} (+{:.4})",
            nuc - nuc0
        );
    }
    Ok(())
}

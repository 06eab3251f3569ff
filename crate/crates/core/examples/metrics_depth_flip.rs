//! MPJPE, Stress and e3D on hand-made frames, and the depth-flip protocol.
//!
//! cargo run --release --example metrics_depth_flip

use nalgebra::DMatrix;
use nrsfm::geometry::random_rotation;
use nrsfm::metrics::{depth_flip_eval, e3d, flip_depth, mpjpe, stress, Metric};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nrsfm::Result<()> {
    let gt = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let shifted = DMatrix::from_row_slice(3, 2, &[3.0, 4.0, 4.0, 4.0, 0.0, 0.0]);
    println!("3-4-5 offset: mpjpe {}", mpjpe(&shifted, &gt)?);
    println!("zero prediction: e3d {}", e3d(&DMatrix::zeros(3, 2), &gt)?);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frame = DMatrix::from_fn(3, 10, |_, _| rng.random_range(-1.0..1.0));
    let r = random_rotation(&mut rng);
    let moved = DMatrix::from_column_slice(3, 3, r.matrix().as_slice()) * &frame;
    println!(
        "rigid motion: stress {:.1e}, mpjpe {:.3}",
        stress(&moved, &frame)?,
        mpjpe(&moved, &frame)?
    );

    // Predictions that got the depth sign wrong on every other frame.
    let gts: Vec<_> = (0..8)
        .map(|_| DMatrix::from_fn(3, 10, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let preds: Vec<_> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let noisy = g.map(|x| x + 0.05 * rng.random_range(-1.0..1.0));
            if i % 2 == 0 {
                flip_depth(&noisy)
            } else {
                noisy
            }
        })
        .collect();
    for flip in [false, true] {
        let s = depth_flip_eval(&preds, &gts, Metric::E3d, flip)?;
        println!(
            "e3d flip={flip}: mean {:.4}, flipped frames {:?}",
            s.mean, s.flip_ratio
        );
    }
    Ok(())
}

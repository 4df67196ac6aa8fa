//! Keyframe selection on a synthetic clip made of four "shots" with distinct
//! embeddings. With k equal to the number of shots one frame per shot is
//! expected.
//!
//! cargo run --release --example keyframes

use causal_sarcasm::keyframe::{select_keyframes, TimeMode};
use causal_sarcasm::rng::{seeded_rng, standard_normal};
use ndarray::Array2;

fn main() -> anyhow::Result<()> {
    let (shots, per_shot, d) = (4, 60, 8);
    let mut rng = seeded_rng(3);
    let centres: Vec<Vec<f64>> = (0..shots).map(|_| standard_normal(&mut rng, d).iter().map(|v| 4.0 * v).collect()).collect();
    let noise = standard_normal(&mut rng, shots * per_shot * d);
    let frames = Array2::from_shape_fn((shots * per_shot, d), |(i, j)| centres[i / per_shot][j] + 0.1 * noise[i * d + j]);

    for mode in [TimeMode::Broadcast, TimeMode::Append] {
        let sel = select_keyframes(&frames, shots, 40, 0.1, mode, &mut seeded_rng(0))?;
        let shot_of: Vec<usize> = sel.frames.iter().map(|f| f / per_shot).collect();
        println!("{mode:?}: frames {:?} -> shots {:?} (fallback {})", sel.frames, shot_of, sel.fallback);
        let sizes: Vec<usize> = sel.members.iter().map(Vec::len).collect();
        println!("  cluster sizes {sizes:?}");
    }

    // alpha large enough that time dominates: picks spread over the clip
    let sel = select_keyframes(&frames, 6, 40, 500.0, TimeMode::Append, &mut seeded_rng(0))?;
    println!("time-dominated (append, alpha=500): {:?}", sel.frames);

    // a flat clip has fewer distinct points than k, so evenly spaced frames come back
    let flat = Array2::zeros((100, d));
    let sel = select_keyframes(&flat, 5, 20, 0.0, TimeMode::Broadcast, &mut seeded_rng(0))?;
    println!("constant clip: {:?} (fallback {})", sel.frames, sel.fallback);
    Ok(())
}

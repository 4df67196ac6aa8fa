//! Deterministic random streams. All randomness in the crate flows through an
//! explicitly passed [`SeededRng`]; nothing touches a global generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An independent stream derived from `seed`, e.g. one per data worker or
/// per evaluation purpose.
pub fn derived_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` standard-normal draws.
pub fn standard_normal(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identical_seeds_give_identical_streams() {
        let a: Vec<u64> = (0..16).map({
            let mut r = seeded_rng(0);
            move |_| r.random()
        }).collect();
        let b: Vec<u64> = (0..16).map({
            let mut r = seeded_rng(0);
            move |_| r.random()
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_seeds_give_distinct_normal_draws() {
        let a = standard_normal(&mut seeded_rng(0), 8);
        let b = standard_normal(&mut seeded_rng(1), 8);
        assert_ne!(a, b);
    }

    #[test]
    fn derived_streams_differ() {
        let a: u64 = derived_rng(3, 0).random();
        let b: u64 = derived_rng(3, 1).random();
        assert_ne!(a, b);
    }

    // Golden value captured from the first implementation run.
    #[test]
    fn seed_42_first_uniform_is_stable() {
        let x: f64 = seeded_rng(42).random();
        assert_eq!(x.to_bits(), GOLDEN_SEED42_UNIFORM);
    }

    const GOLDEN_SEED42_UNIFORM: u64 = 4604317194420431787;
}

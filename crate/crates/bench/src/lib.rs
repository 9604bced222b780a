//! Fixed benchmark instances shared by the criterion benches.

use certignc::{generate_synthetic, inject_outliers, Problem, SyntheticSpec, World};

/// Noisy 2D ring with loop closures, contaminated at `rate`.
pub fn ring(poses: usize, rate: f64, seed: u64) -> Problem {
    let spec = SyntheticSpec { d: 2, poses, world: World::Ring, ..SyntheticSpec::default() };
    contaminate(generate_synthetic(&spec, seed).expect("valid spec"), rate, seed)
}

/// Boustrophedon grid in `d` dimensions with sparse unit-distance loop closures.
pub fn grid(d: usize, poses: usize, rate: f64, seed: u64) -> Problem {
    let spec = SyntheticSpec { d, poses, world: World::Grid, lc_radius: 1.01, lc_prob: 0.2, ..SyntheticSpec::default() };
    contaminate(generate_synthetic(&spec, seed).expect("valid spec"), rate, seed)
}

fn contaminate(problem: Problem, rate: f64, seed: u64) -> Problem {
    if rate == 0.0 {
        return problem;
    }
    inject_outliers(&problem, rate, seed).expect("valid rate").0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_are_deterministic_and_contaminated() {
        assert_eq!(grid(3, 50, 0.2, 1), grid(3, 50, 0.2, 1));
        let clean = ring(20, 0.0, 4);
        let dirty = ring(20, 0.3, 4);
        assert_eq!(clean.edges.len(), dirty.edges.len());
        assert_ne!(clean.edges, dirty.edges);
    }
}

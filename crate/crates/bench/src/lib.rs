//! Shared fixtures for the benchmarks.

use matlap::matrix_core::sample_normalized;
use matlap::nc_poly::parse_word;
use matlap::rng::stream;
use matlap::{GibbsEnsemble, HermitianTuple, PotentialSpec};

/// `0.5 tau(X^2) + lambda tau(X^4)` on the single slot `t = 1`.
pub fn quartic(lambda: f64) -> PotentialSpec {
    let mut spec = PotentialSpec::quadratic(0.5, 1);
    spec.components[0].word = parse_word("X1 X1 X1 X1").expect("valid word");
    spec.components[0].lambda.re = lambda;
    spec
}

/// Two-matrix potential with a mixed quartic word.
pub fn two_matrix() -> PotentialSpec {
    let mut spec = PotentialSpec::quadratic(0.5, 2);
    spec.components[0].word = parse_word("X1 X2 X1 X2").expect("valid word");
    spec.components[0].lambda.re = 0.05;
    spec
}

/// A GUE-like tuple with `tau(X_l^2)` close to one.
pub fn tuple(n: usize, m: usize, seed: u64) -> HermitianTuple {
    sample_normalized(n, m, 1.0, &mut stream(seed, &[])).expect("valid sizes")
}

/// A quartic ensemble started from a Gaussian state.
pub fn ensemble(n: usize) -> GibbsEnsemble {
    let mut ens = GibbsEnsemble::new(quartic(0.1), n).expect("valid spec");
    ens.set_state(vec![tuple(n, 1, 1)]);
    ens
}

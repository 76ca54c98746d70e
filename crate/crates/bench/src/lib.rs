//! Shared fixtures for the criterion benches.

use probit_mlm::harness::{simulate_binomial, simulate_multinomial, SimSpec};
use probit_mlm::models::BuiltLikelihood;

/// First binomial cluster of the simulation design with `n` outcomes and
/// `k` random effects.
pub fn binomial_instance(n: usize, k: usize, seed: u64) -> BuiltLikelihood {
    let d = &simulate_binomial(&SimSpec::binomial(n, k, 1, seed)).expect("valid design")[0];
    d.cluster.build(&d.params).expect("valid parameters")
}

pub fn multinomial_instance(n: usize, c: usize, seed: u64) -> BuiltLikelihood {
    let d = &simulate_multinomial(&SimSpec::multinomial(n, c, 1, seed)).expect("valid design")[0];
    d.cluster.build(&d.params).expect("valid parameters")
}

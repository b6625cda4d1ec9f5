//! Shared fixtures for the benchmarks.

use nalgebra::{DMatrix, DVector};
use noisybp::experiment::Setup;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference network with one sampled slot of local statistics.
pub fn fig1_slot(seed: u64) -> (Setup, Vec<f64>) {
    let setup = Setup::fig1();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, gamma) = setup.scenario.sample_slot(&mut rng);
    (setup, gamma)
}

/// Random connected network with `n` nodes and moderate couplings.
pub fn random_setup(n: usize, seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Setup::random(n, 0.3, (0.2, 0.4), 10.0, 10.0, &mut rng).expect("valid random setup")
}

/// Random discriminant vector and well-conditioned covariance of size `n`.
pub fn deflection_instance(n: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let sigma = &a * a.transpose() + DMatrix::identity(n, n);
    (delta, sigma)
}

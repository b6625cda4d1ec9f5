//! Deterministic random streams for Monte Carlo trials.
//!
//! Every stream is a pure function of the master seed, a trial index and a
//! substream tag, so results never depend on how trials are scheduled across
//! worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent purposes a trial draws randomness for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Substream {
    /// Transmitter activity, signatures and receiver noise.
    Signal = 0,
    /// Likelihood errors, drawn once per slot.
    Likelihood = 1,
    /// Message errors, drawn per edge per iteration.
    Message = 2,
    /// Link-copy errors used by the averaged window in adaptation.
    LinkCopies = 3,
    /// Error-free reference runs used for calibration.
    Calibration = 4,
    /// Anything else a caller needs (pilots, held-out windows).
    Auxiliary = 5,
}

const SUBSTREAMS: u64 = 8;

pub fn stream(master_seed: u64, trial: u64, substream: Substream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial.wrapping_mul(SUBSTREAMS).wrapping_add(substream as u64));
    rng
}

/// A seed for a nested experiment, mixed so that neighboring inputs give
/// unrelated outputs.
pub fn derive_seed(master_seed: u64, salt: u64) -> u64 {
    let mut z = master_seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(5, 3, Substream::Signal).random();
        let b: u64 = stream(5, 3, Substream::Signal).random();
        let c: u64 = stream(5, 3, Substream::Message).random();
        let d: u64 = stream(5, 4, Substream::Signal).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
    }
}

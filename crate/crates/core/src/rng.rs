//! Reproducible random streams for Monte Carlo replications.
//!
//! A replication owns independent ChaCha8 streams keyed by
//! `(seed, replication index, channel)`, so results do not depend on how
//! replications are scheduled across threads. Patient `t` always consumes
//! the `t`-th toxicity and `t`-th efficacy uniform, whatever arm it is in,
//! which gives common random numbers across arms and truth points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Toxicity = 0,
    Efficacy = 1,
    Design = 2,
}

/// Words reserved per channel before the next one starts.
const CHANNEL_WORDS: u128 = 1 << 40;

pub fn stream(seed: u64, rep: u64, channel: Channel) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng.set_word_pos(channel as u128 * CHANNEL_WORDS);
    rng
}

/// Per-patient uniforms for one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientUniforms {
    pub tox: Vec<f64>,
    pub eff: Vec<f64>,
}

impl PatientUniforms {
    pub fn draw(seed: u64, rep: u64, n: usize) -> Self {
        let mut t = stream(seed, rep, Channel::Toxicity);
        let mut e = stream(seed, rep, Channel::Efficacy);
        Self {
            tox: (0..n).map(|_| t.random::<f64>()).collect(),
            eff: (0..n).map(|_| e.random::<f64>()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tox.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tox.is_empty()
    }
}

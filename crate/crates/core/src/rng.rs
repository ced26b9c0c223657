//! Deterministic seed derivation.
//!
//! Every random decision in a run draws from a ChaCha stream whose seed is
//! derived from the master seed plus a purpose tag and integer coordinates
//! (epoch, client id, ...). Streams are therefore independent of scheduling:
//! the same configuration produces bit-identical results at any thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep derived streams disjoint across subsystems.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum StreamTag {
    ParamInit = 1,
    EpochPermutation = 2,
    CandidatePool = 3,
    ClientUpdate = 4,
    BenignStats = 5,
    ByzantineAssignment = 6,
    DetectorInit = 7,
    DetectorSplit = 8,
    DatasetSynthesis = 9,
    ClassBalance = 10,
    PcaStart = 11,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a tag and coordinates into a stream seed.
pub fn derive_seed(master: u64, tag: StreamTag, coords: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ (tag as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
    for &c in coords {
        h = splitmix64(h ^ c.wrapping_mul(0xa076_1d64_78bd_642f));
    }
    h
}

/// Builds the ChaCha stream for a (master, tag, coordinates) triple.
pub fn stream(master: u64, tag: StreamTag, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, coords))
}

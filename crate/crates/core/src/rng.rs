// SPDX-License-Identifier: MIT OR Apache-2.0

//! SplitMix64: a tiny fixed-algorithm generator so environment placements
//! are reproducible bit-for-bit on every platform and crate version.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform integer in `[0, n)` by multiply-high reduction. `n` must be > 0.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

/// Counter-based seed derivation: the seed of work item `index` in `stream`
/// depends only on its coordinates, never on execution order.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix(mix(master ^ mix(stream.wrapping_add(GOLDEN))).wrapping_add(index.wrapping_mul(GOLDEN)))
}

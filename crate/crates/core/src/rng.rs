//! Keyed, counter-based random streams.
//!
//! A stream is a ChaCha8 keystream whose 256-bit key is the packed
//! [`StreamKey`]. Two streams with equal keys yield the same sequence on every
//! platform; streams with different keys are independent. The word position
//! can be set directly, which gives random access by counter.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the key so that, for example, dropout
/// masks never share randomness with stochastic rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamKind {
    QuantForward = 1,
    QuantBackward = 2,
    Dropout = 3,
    WeightInit = 4,
    Synthetic = 5,
    Partition = 6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub partition: u32,
    pub epoch: u32,
    pub layer: u32,
    pub kind: StreamKind,
}

impl StreamKey {
    pub fn new(seed: u64, kind: StreamKind) -> Self {
        StreamKey { seed, partition: 0, epoch: 0, layer: 0, kind }
    }

    pub fn partition(mut self, p: usize) -> Self {
        self.partition = p as u32;
        self
    }

    pub fn epoch(mut self, e: usize) -> Self {
        self.epoch = e as u32;
        self
    }

    pub fn layer(mut self, l: usize) -> Self {
        self.layer = l as u32;
        self
    }

    fn to_seed(self) -> [u8; 32] {
        let mut s = [0u8; 32];
        s[0..8].copy_from_slice(&self.seed.to_le_bytes());
        s[8..12].copy_from_slice(&self.partition.to_le_bytes());
        s[12..16].copy_from_slice(&self.epoch.to_le_bytes());
        s[16..20].copy_from_slice(&self.layer.to_le_bytes());
        s[20] = self.kind as u8;
        s[31] = 0x5a;
        s
    }
}

#[derive(Clone, Debug)]
pub struct RngStream {
    key: StreamKey,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(key: StreamKey) -> Self {
        RngStream { key, inner: ChaCha8Rng::from_seed(key.to_seed()) }
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// Stream positioned at the `index`-th 64-bit draw.
    pub fn at(key: StreamKey, index: u64) -> Self {
        let mut s = Self::new(key);
        s.inner.set_word_pos(u128::from(index) * 2);
        s
    }

    /// Uniform on [0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

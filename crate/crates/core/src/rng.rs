//! Hierarchical, counter-based random streams.
//!
//! A stream is a 64-bit key plus a counter. Output `i` of a stream is
//! `mix(mix(key + i·γ) ^ rotl(key, 32))`, where `mix` is the SplitMix64
//! finalizer and `γ` the golden-ratio increment. Forking derives a child key
//! from the parent key and a path component, so every stream is a pure
//! function of `(root seed, path)` and draws are independent of call order
//! elsewhere. All arithmetic is wrapping 64-bit, hence identical on every
//! platform.

use rand_core::{impls, RngCore};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const ROOT_SALT: u64 = 0xD134_2543_DE82_EF95;
const FORK_SALT: u64 = 0x94D0_49BB_1331_11EB;

/// Well-known path components used by the trainer and encoder.
pub mod label {
    pub const INIT: u64 = 0x1_0000;
    pub const SHUFFLE: u64 = 0x2_0000;
    pub const STEP: u64 = 0x3_0000;
    pub const RATE: u64 = 0x4_0000;
    pub const MASK: u64 = 0x5_0000;
    pub const LAYER: u64 = 0x6_0000;
    pub const SYNTH: u64 = 0x7_0000;
    pub const EVAL: u64 = 0x8_0000;
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    root: u64,
    path: Vec<u64>,
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root: root_seed,
            path: Vec::new(),
            key: mix64(root_seed ^ ROOT_SALT),
            counter: 0,
        }
    }

    /// Child stream for `component`; the parent is left untouched.
    pub fn fork(&self, component: u64) -> Self {
        let mut path = self.path.clone();
        path.push(component);
        Self {
            root: self.root,
            path,
            key: mix64(self.key.rotate_left(23) ^ mix64(component.wrapping_add(FORK_SALT))),
            counter: 0,
        }
    }

    pub fn fork_path(&self, components: &[u64]) -> Self {
        components.iter().fold(self.clone(), |s, &c| s.fork(c))
    }

    pub fn root_seed(&self) -> u64 {
        self.root
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Identity of the stream, independent of its position.
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Output at `index` without advancing.
    #[inline]
    pub fn at(&self, index: u64) -> u64 {
        let x = self.key.wrapping_add(index.wrapping_mul(GOLDEN_GAMMA));
        mix64(mix64(x) ^ self.key.rotate_left(32))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform deviate in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        to_unit(self.next_u64())
    }

    /// Uniform deviate in `[lo, hi)`; exactly `lo` when `lo == hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unit deviate at a fixed counter position.
    #[inline]
    pub fn unit_at(&self, index: u64) -> f64 {
        to_unit(self.at(index))
    }
}

#[inline]
fn to_unit(v: u64) -> f64 {
    (v >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        RngStream::next_u64(self)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        impls::fill_bytes_via_next(self, dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand_core::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

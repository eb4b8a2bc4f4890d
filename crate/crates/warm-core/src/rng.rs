//! Seeded, splittable random streams.
//!
//! An [`RngState`] is a `(seed, stream)` pair backed by ChaCha8. Splitting
//! numbers streams like a binary heap (`n -> 2n+1, 2n+2`), so every node of
//! the split tree owns a distinct stream of the same key. Once the heap index
//! would overflow, the key is re-derived with SplitMix64 and numbering
//! restarts at the root.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Consumes the state and returns two children. The children depend only
    /// on `(seed, stream)`, never on how many draws the parent made.
    pub fn split(self) -> (RngState, RngState) {
        match self
            .stream
            .checked_mul(2)
            .and_then(|s| s.checked_add(2))
        {
            Some(right) => (
                RngState::with_stream(self.seed, right - 1),
                RngState::with_stream(self.seed, right),
            ),
            None => {
                let key = splitmix64(self.seed ^ splitmix64(self.stream));
                RngState::with_stream(key, 0).split()
            }
        }
    }

    /// Splits off `n` independent children, consuming the parent.
    pub fn split_n(self, n: usize) -> Vec<RngState> {
        let mut out = Vec::with_capacity(n);
        let mut rest = self;
        for _ in 0..n {
            let (child, next) = rest.split();
            out.push(child);
            rest = next;
        }
        out
    }

    /// Child for a labelled sub-task, e.g. the `i`-th fine-tuning of a pool.
    /// Equivalent to taking the `index`-th entry of `split_n`, without
    /// consuming the parent.
    pub fn derive(&self, index: usize) -> RngState {
        let mut rest = RngState::with_stream(self.seed, self.stream);
        for _ in 0..index {
            rest = rest.split().1;
        }
        rest.split().0
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

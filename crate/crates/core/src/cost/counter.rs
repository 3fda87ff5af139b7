/// Scalar multiplication and addition tally for one evaluation context.
///
/// Counters are owned by whoever runs the computation (a tape, a decoding
/// session, a benchmark); there is no global tally.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub mults: u64,
    pub adds: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.mults + self.adds
    }

    /// Account for an `m×k` by `k×p` product: `m·k·p` multiplications and
    /// `m·p·(k−1)` additions.
    #[inline]
    pub fn matmul(&mut self, m: usize, k: usize, p: usize) {
        self.mults += (m * k * p) as u64;
        self.adds += (m * p * k.saturating_sub(1)) as u64;
    }

    #[inline]
    pub fn record(&mut self, mults: u64, adds: u64) {
        self.mults += mults;
        self.adds += adds;
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// Counts accumulated since `earlier` was snapshotted.
    pub fn since(&self, earlier: &OpCounter) -> OpCounter {
        OpCounter {
            mults: self.mults - earlier.mults,
            adds: self.adds - earlier.adds,
        }
    }
}

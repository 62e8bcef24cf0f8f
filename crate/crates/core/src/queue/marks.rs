use std::sync::atomic::{AtomicU64, Ordering};

/// Per-slot ready flags packed 64 to a word.
pub struct MarkBits {
    words: Box<[AtomicU64]>,
    len: usize,
}

impl MarkBits {
    pub fn new(len: usize) -> Self {
        MarkBits {
            words: (0..len.div_ceil(64)).map(|_| AtomicU64::new(0)).collect(),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    fn locate(i: usize) -> (usize, u64) {
        (i / 64, 1u64 << (i % 64))
    }

    /// Returns whether the bit was already set.
    #[inline]
    pub fn set(&self, i: usize) -> bool {
        let (w, bit) = Self::locate(i);
        self.words[w].fetch_or(bit, Ordering::AcqRel) & bit != 0
    }

    #[inline]
    pub fn is_set(&self, i: usize) -> bool {
        let (w, bit) = Self::locate(i);
        self.words[w].load(Ordering::Acquire) & bit != 0
    }

    /// Clear bit `i`, reporting whether it was set.
    #[inline]
    pub fn test_and_clear(&self, i: usize) -> bool {
        let (w, bit) = Self::locate(i);
        self.words[w].fetch_and(!bit, Ordering::AcqRel) & bit != 0
    }

    pub fn to_vec(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.is_set(i)).collect()
    }
}

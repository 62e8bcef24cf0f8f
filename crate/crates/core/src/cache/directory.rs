use std::sync::atomic::AtomicU64;
use std::sync::OnceLock;

const CHUNK_LINES: usize = 1 << 16;

type Chunk = OnceLock<Box<[AtomicU64]>>;

/// Per-line state words for every line of every device, allocated in
/// chunks on first touch.
pub(super) struct LineDirectory {
    devices: Box<[Box<[Chunk]>]>,
    lines: Box<[u64]>,
}

impl LineDirectory {
    pub fn new(lines_per_device: &[u64]) -> Self {
        LineDirectory {
            devices: lines_per_device
                .iter()
                .map(|&n| (0..(n as usize).div_ceil(CHUNK_LINES)).map(|_| OnceLock::new()).collect())
                .collect(),
            lines: lines_per_device.into(),
        }
    }

    pub fn contains(&self, device: u32, index: u64) -> bool {
        self.lines.get(device as usize).is_some_and(|&n| index < n)
    }

    pub fn word(&self, device: u32, index: u64) -> &AtomicU64 {
        let chunk = &self.devices[device as usize][index as usize / CHUNK_LINES];
        let words = chunk.get_or_init(|| (0..CHUNK_LINES).map(|_| AtomicU64::new(0)).collect());
        &words[index as usize % CHUNK_LINES]
    }
}

//! Named, independently seeded random streams.
//!
//! Every run draws from four streams (`init`, `data-order`, `noise`,
//! `probe-init`), each seeded from `sha256(master_seed || name)`. Switching
//! the fine-tuning method never touches the data-order or init streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    DataOrder,
    Noise,
    ProbeInit,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::DataOrder => "data-order",
            Stream::Noise => "noise",
            Stream::ProbeInit => "probe-init",
        }
    }
}

fn digest(master_seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

pub fn stream(master_seed: u64, which: Stream) -> StreamRng {
    named_stream(master_seed, which.name())
}

pub fn named_stream(master_seed: u64, label: &str) -> StreamRng {
    ChaCha8Rng::from_seed(digest(master_seed, label))
}

/// Child seed for a labelled sub-run (chain stages, grid points, ...).
pub fn derive_seed(master_seed: u64, label: &str) -> u64 {
    let d = digest(master_seed, label);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// The four streams of one run.
pub struct RunStreams {
    pub init: StreamRng,
    pub data_order: StreamRng,
    pub noise: StreamRng,
    pub probe_init: StreamRng,
}

impl RunStreams {
    pub fn new(master_seed: u64) -> Self {
        Self {
            init: stream(master_seed, Stream::Init),
            data_order: stream(master_seed, Stream::DataOrder),
            noise: stream(master_seed, Stream::Noise),
            probe_init: stream(master_seed, Stream::ProbeInit),
        }
    }
}

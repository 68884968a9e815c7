//! Replayable random streams addressed by coordinates.
//!
//! Every stream is a ChaCha8 keystream whose 256-bit key is the raw
//! concatenation of the run seed and the stream coordinates, so two distinct
//! coordinate tuples never share a key and any stream can be regenerated
//! without touching the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a stream is used for; part of the key so that e.g. weight
/// initialization and noise for the same coordinates never collide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u32)]
pub enum Domain {
    Noise = 1,
    Init = 2,
    Shuffle = 3,
    Data = 4,
    Eval = 5,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub run: u32,
    pub epoch: u32,
    pub batch: u32,
    pub layer: u32,
    /// Repetition lane; used by multi-execution to draw independent repeats
    /// at the same injection point.
    pub lane: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub domain: Domain,
    pub id: StreamId,
}

impl RngStream {
    pub fn new(seed: u64, domain: Domain) -> Self {
        RngStream {
            seed,
            domain,
            id: StreamId::default(),
        }
    }

    pub fn noise(seed: u64) -> Self {
        Self::new(seed, Domain::Noise)
    }

    pub fn with_domain(self, domain: Domain) -> Self {
        RngStream { domain, ..self }
    }

    pub fn run(mut self, run: u32) -> Self {
        self.id.run = run;
        self
    }

    pub fn epoch(mut self, epoch: u32) -> Self {
        self.id.epoch = epoch;
        self
    }

    pub fn batch(mut self, batch: u32) -> Self {
        self.id.batch = batch;
        self
    }

    pub fn layer(mut self, layer: u32) -> Self {
        self.id.layer = layer;
        self
    }

    pub fn lane(mut self, lane: u32) -> Self {
        self.id.lane = lane;
        self
    }

    fn key(&self) -> [u8; 32] {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        let words = [
            self.domain as u32,
            self.id.run,
            self.id.epoch,
            self.id.batch,
            self.id.layer,
            self.id.lane,
        ];
        for (i, w) in words.iter().enumerate() {
            key[8 + 4 * i..12 + 4 * i].copy_from_slice(&w.to_le_bytes());
        }
        key
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key())
    }
}

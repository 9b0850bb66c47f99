//! Seeded randomness with domain-separated streams.
//!
//! The client's private randomness, the databases' common randomness and
//! message/set generation never share a stream, so their realizations are
//! independent by construction while staying reproducible from the seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Client = 1,
    CommonRandomness = 2,
    Messages = 3,
    SetGeneration = 4,
}

/// A ChaCha20 stream keyed by `seed` on the stream id reserved for `domain`.
pub fn stream(seed: u64, domain: Domain) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(domain as u64);
    rng
}

/// The three seeds that fully determine a protocol run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Seeds {
    pub client: u64,
    pub cr: u64,
    pub msg: u64,
}

impl Seeds {
    pub fn new(client: u64, cr: u64, msg: u64) -> Self {
        Seeds { client, cr, msg }
    }

    pub fn client_rng(&self) -> StreamRng {
        stream(self.client, Domain::Client)
    }

    pub fn cr_rng(&self) -> StreamRng {
        stream(self.cr, Domain::CommonRandomness)
    }

    pub fn msg_rng(&self) -> StreamRng {
        stream(self.msg, Domain::Messages)
    }
}

//! Independent random streams derived from one master seed.
//!
//! Each consumer (data generation, partitioning, initialisation, client
//! sampling, each client's local training) draws from its own stream keyed by
//! `(master seed, purpose, round, client)`. Adding a method or a client never
//! shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Partition,
    Init,
    Select,
    Client,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Partition => 0x7061_7274,
            Stream::Init => 0x696e_6974,
            Stream::Select => 0x7365_6c65,
            Stream::Client => 0x636c_6e74,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, round: u64, client: u64) -> u64 {
    [stream.tag(), round, client]
        .into_iter()
        .fold(splitmix64(master), |acc, part| splitmix64(acc ^ splitmix64(part)))
}

pub fn stream_rng(master: u64, stream: Stream, round: u64, client: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, round, client))
}

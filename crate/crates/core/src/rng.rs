//! Named, independent random streams derived from one master seed.
//!
//! Each consumer gets its own ChaCha stream so adding draws in one place never
//! shifts the randomness seen elsewhere, and per-client streams make parallel
//! client work independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Partition,
    Split,
    Init,
    Pretrain,
    Sampling,
    Lambda,
    Eoam,
    Client(u32),
    Link(u32),
    Selection { client: u32, round: u32 },
    ApTrain { client: u32, round: u32 },
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Partition => 2,
            Stream::Split => 3,
            Stream::Init => 4,
            Stream::Pretrain => 5,
            Stream::Sampling => 6,
            Stream::Lambda => 7,
            Stream::Eoam => 8,
            Stream::Client(c) => (16 << 56) | c as u64,
            Stream::Link(c) => (17 << 56) | c as u64,
            Stream::Selection { client, round } => {
                (18 << 56) | ((round as u64 & 0xff_ffff) << 32) | client as u64
            }
            Stream::ApTrain { client, round } => {
                (19 << 56) | ((round as u64 & 0xff_ffff) << 32) | client as u64
            }
        }
    }
}

pub fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s.id());
    rng
}

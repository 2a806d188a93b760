//! Deterministic random streams.
//!
//! Every consumer gets its own ChaCha8 stream: the key is derived from the
//! master seed and a domain label (`splitmix64(master ^ fnv1a(domain))`),
//! and the ChaCha stream number is the item index (frame id, epoch, ...).
//! Results therefore do not depend on the order or thread in which items
//! are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_rng(master: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master ^ fnv1a(domain)));
    rng.set_stream(index);
    rng
}

//! Named RNG substreams.
//!
//! Every random draw in a run descends from one root seed. A substream is
//! addressed by a label (the pipeline stage) and a list of indices (edge,
//! detector, chunk, ...), so any stage can be replayed on its own and the
//! result never depends on the order in which substreams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derive a 64-bit seed for the substream `(root, label, indices)`.
pub fn substream_seed(root: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ fnv1a(label));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn substream(root: u64, label: &str, indices: &[u64]) -> SimRng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, label, indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_address_same_stream() {
        let a: Vec<u64> = (0..8).map({
            let mut r = substream(7, "emit", &[3, 1]);
            move |_| r.random()
        }).collect();
        let b: Vec<u64> = (0..8).map({
            let mut r = substream(7, "emit", &[3, 1]);
            move |_| r.random()
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn addresses_are_distinct() {
        let seeds = [
            substream_seed(7, "emit", &[0]),
            substream_seed(7, "emit", &[1]),
            substream_seed(7, "detect", &[0]),
            substream_seed(8, "emit", &[0]),
            substream_seed(7, "emit", &[0, 0]),
        ];
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j], "{i} vs {j}");
            }
        }
    }
}

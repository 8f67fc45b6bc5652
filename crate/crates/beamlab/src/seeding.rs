//! Deterministic seed derivation so trials and episodes are pure functions of
//! `(master seed, index)` and safe to run in any order.

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes an ordered list of components into one stream seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x853c49e6748fea9b;
    for &p in parts {
        h = splitmix64(h ^ p.wrapping_mul(0xff51afd7ed558ccd));
    }
    h
}

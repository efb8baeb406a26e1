//! Deterministic seed derivation. Every random draw in training is keyed by
//! a tuple such as (run seed, step, stream, example) so that a resumed run
//! sees exactly the draws an uninterrupted one would.

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |h, &p| splitmix(h ^ splitmix(p)))
}

//! Seed derivation. Every source of randomness in the workspace is a ChaCha
//! stream keyed by a 64-bit value mixed out of (master seed, structural
//! indices), so results never depend on host scheduling or call order.

/// splitmix64 finalizer. Decorrelates structured inputs (seed, round, id).
#[inline]
pub fn mix64(v: u64) -> u64 {
    let mut z = v.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of labels into one sub-seed. Order matters.
#[inline]
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3; // pi, as is tradition
    for &p in parts {
        acc = mix64(acc ^ p);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_is_order_sensitive() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
    }

    #[test]
    fn mix_is_stable() {
        // frozen so seed-derived behavior can't drift silently between builds
        assert_eq!(mix64(0), 16294208416658607535);
        assert_eq!(mix_seed(&[7, 11, 13]), mix_seed(&[7, 11, 13]));
    }
}

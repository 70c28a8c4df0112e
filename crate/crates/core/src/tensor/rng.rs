//! Counter-based randomness: values are pure functions of a key and an
//! index, so dropout masks can be regenerated instead of stored.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finaliser.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn combine(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| mix(acc ^ mix(p)))
}

/// Uniform draw in `[0, 1)` for element `index` under `key`.
pub(crate) fn uniform(key: u64, index: u64) -> f64 {
    (mix(key ^ index.wrapping_mul(GOLDEN)) >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_reproducible_and_in_range() {
        let k = combine(&[7, 3, 1]);
        let draws: Vec<f64> = (0..1000).map(|i| uniform(k, i)).collect();
        assert!(draws.iter().all(|&u| (0.0..1.0).contains(&u)));
        let again: Vec<f64> = (0..1000).map(|i| uniform(k, i)).collect();
        assert_eq!(draws, again);
        let mean = draws.iter().sum::<f64>() / 1000.0;
        assert!((mean - 0.5).abs() < 0.05);
        assert_ne!(combine(&[7, 3, 1]), combine(&[7, 3, 2]));
    }
}

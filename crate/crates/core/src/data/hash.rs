const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Bucket of `field=value` in a table of `vocab_size` rows.
///
/// Stable across runs and platforms. `vocab_size` must be at least 1.
pub fn hash_feature(field: &str, value: &str, vocab_size: usize) -> usize {
    assert!(vocab_size >= 1, "vocab_size must be positive");
    let mut h = FNV_OFFSET;
    for b in field
        .bytes()
        .chain(std::iter::once(b'='))
        .chain(value.bytes())
    {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    (h % vocab_size as u64) as usize
}

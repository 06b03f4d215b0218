//! Counter-based random streams. Every draw is a pure function of
//! (seed, coordinate words), so results do not depend on iteration order,
//! thread scheduling, or how many draws happened before.

/// splitmix64 finalizer.
#[inline(always)]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a seed together with up to a handful of coordinate words.
pub fn key(seed: u64, words: &[u64]) -> u64 {
    let mut h = mix(seed);
    for &w in words {
        h = mix(h ^ w);
    }
    h
}

/// Stable 64-bit hash of a string, for keying streams by name.
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in s.as_bytes() {
        h = mix(h ^ b as u64);
    }
    h
}

/// Uniform in [0, 1) with 53 bits of precision.
pub fn uniform(seed: u64, words: &[u64]) -> f64 {
    (key(seed, words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Bernoulli draw: true with probability `p`.
pub fn bernoulli(p: f64, seed: u64, words: &[u64]) -> bool {
    uniform(seed, words) < p
}

/// Standard normal via Box-Muller on two decorrelated uniforms.
pub fn normal(seed: u64, words: &[u64]) -> f64 {
    let u1 = uniform(seed, words);
    let u2 = (key(seed, words).wrapping_mul(0xda94_2042_e4dd_58b5) >> 11) as f64
        * (1.0 / (1u64 << 53) as f64);
    let r = (-2.0 * (1.0 - u1).ln()).sqrt();
    r * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic Fisher-Yates permutation of 0..n keyed by (seed, words).
pub fn permutation(n: usize, seed: u64, words: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let base = key(seed, words);
    for i in (1..n).rev() {
        let j = (key(base, &[i as u64]) % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_reproducible_and_keyed() {
        assert_eq!(key(7, &[1, 2, 3]), key(7, &[1, 2, 3]));
        assert_ne!(key(7, &[1, 2, 3]), key(8, &[1, 2, 3]));
        assert_ne!(key(7, &[1, 2, 3]), key(7, &[1, 2, 4]));
    }

    #[test]
    fn uniform_mean_is_centered() {
        let n = 100_000;
        let mean: f64 = (0..n).map(|i| uniform(42, &[i])).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn normal_moments() {
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|i| normal(11, &[i])).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean = {mean}");
        assert!((var - 1.0).abs() < 0.05, "var = {var}");
    }

    #[test]
    fn permutation_is_a_bijection() {
        let p = permutation(1000, 3, &[0]);
        let mut seen = vec![false; 1000];
        for &i in &p {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert_ne!(p, permutation(1000, 3, &[1]));
        assert_eq!(p, permutation(1000, 3, &[0]));
    }
}

//! Deterministic signed feature hashing for short texts.

/// FNV-1a, 64-bit.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hash_with_prefix(prefix: &[u8], token: &str) -> u64 {
    let mut buf = Vec::with_capacity(prefix.len() + token.len());
    buf.extend_from_slice(prefix);
    buf.extend_from_slice(token.as_bytes());
    fnv1a(&buf)
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Hashes each token, and each adjacent token pair, into one of `dim`
/// buckets with a ±1 sign drawn from an independent hash, then
/// L2-normalizes. The pairs keep "frequency 5 in 3" apart from
/// "frequency 3 in 5". Returns `None` for text without tokens, which
/// callers treat as the null event.
pub fn embed_text_hash(text: &str, dim: usize) -> Option<Vec<f64>> {
    assert!(dim >= 16, "hash embedding dimension must be at least 16");
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return None;
    }
    let mut features = tokens.clone();
    features.extend(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    let mut v = vec![0.0; dim];
    for t in &features {
        let bucket = (hash_with_prefix(b"bucket:", t) % dim as u64) as usize;
        let sign = if hash_with_prefix(b"sign:", t) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // every token cancelled out; fall back to a fixed bucket
        v[(fnv1a(text.as_bytes()) % dim as u64) as usize] = 1.0;
        return Some(v);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn l2_normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deterministic_and_discriminative() {
        let a = embed_text_hash("frequency 5", 64).unwrap();
        let b = embed_text_hash("frequency 5", 64).unwrap();
        let c = embed_text_hash("frequency 7", 64).unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
        assert!(cosine(&a, &c) < 1.0);
    }

    #[test]
    fn word_order_matters() {
        let a = embed_text_hash("change to frequency 5 in 3 timesteps", 64).unwrap();
        let b = embed_text_hash("change to frequency 3 in 5 timesteps", 64).unwrap();
        assert!(cosine(&a, &b) < 0.99);
    }

    #[test]
    fn empty_text_is_null() {
        assert!(embed_text_hash("", 32).is_none());
        assert!(embed_text_hash("  ,.;", 32).is_none());
    }

    #[test]
    fn case_and_punctuation_insensitive() {
        assert_eq!(
            embed_text_hash("The waveform will go steady.", 32),
            embed_text_hash("the WAVEFORM will go steady", 32)
        );
    }

    proptest! {
        #[test]
        fn unit_norm(text in "[a-zA-Z0-9 ,.]{1,60}", dim in 16usize..128) {
            if let Some(v) = embed_text_hash(&text, dim) {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }
}

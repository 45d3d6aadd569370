//! Text embedding protocol with a dependency-free default.

use crate::error::{Error, Result};

/// Deterministic text -> vector map. Same text must embed to the same
/// vector, and nonempty text must embed to a nonzero vector.
pub trait Embedder {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Feature-hashed bag-of-words term-frequency embedder, L2-normalized.
///
/// The stand-in for an external sentence embedder: deterministic, offline,
/// and stable across platforms (FNV-1a hashing over lowercase word tokens).
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dimension: 256 }
    }
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        Self { dimension }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dimension];
        for word in text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let h = fnv1a(word.as_bytes()) as usize % self.dimension;
            v[h] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        } else if !text.trim().is_empty() {
            // Text with no alphanumeric tokens still embeds deterministically.
            let h = fnv1a(text.as_bytes()) as usize % self.dimension;
            v[h] = 1.0;
        }
        Ok(v)
    }
}

/// Cosine similarity; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let e = HashEmbedder::default();
        let a = e.embed("The seeds pass through your digestive system.").unwrap();
        let b = e.embed("The seeds pass through your digestive system.").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonempty_text_embeds_nonzero() {
        let e = HashEmbedder::default();
        let v = e.embed("!!!").unwrap();
        assert!(v.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn related_texts_score_higher_than_unrelated() {
        let e = HashEmbedder::default();
        let q = e.embed("what happens if you eat watermelon seeds").unwrap();
        let related = e.embed("the watermelon seeds pass through you").unwrap();
        let unrelated = e.embed("fortune cookies were invented in california").unwrap();
        assert!(cosine(&q, &related).unwrap() > cosine(&q, &unrelated).unwrap());
    }
}

//! Sentence-level embeddings and cosine similarity for the diversity penalty.
//!
//! The provider is pluggable: a remote embedding endpoint for real runs, or
//! the built-in deterministic fallback (hashed bag of character n-grams,
//! L2-normalized) so the whole test suite runs with no network.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UspError};

/// A fixed-length real vector with finite entries and non-zero norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(UspError::InvalidField {
                field: "embedding".into(),
                reason: "non-finite entry".into(),
            });
        }
        let norm_sq: f64 = values.iter().map(|v| v * v).sum();
        if norm_sq == 0.0 {
            return Err(UspError::InvalidField {
                field: "embedding".into(),
                reason: "zero vector".into(),
            });
        }
        Ok(Embedding { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity dot(a,b) / (|a||b|), in [-1, 1].
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(UspError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let dot: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * y)
        .sum();
    Ok(dot / (a.norm() * b.norm()))
}

/// Embedding provider.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Embedding>;
}

/// Deterministic fallback: counts of hashed character n-grams, L2-normalized.
#[derive(Debug, Clone)]
pub struct NgramHashEmbedder {
    dim: usize,
    n: usize,
}

impl Default for NgramHashEmbedder {
    fn default() -> Self {
        NgramHashEmbedder { dim: 512, n: 3 }
    }
}

impl NgramHashEmbedder {
    pub fn new(dim: usize, n: usize) -> Self {
        assert!(dim > 0 && n > 0);
        NgramHashEmbedder { dim, n }
    }

    /// Character n-grams of the lowercased text; a text shorter than n
    /// contributes itself as a single gram.
    pub fn ngrams(&self, text: &str) -> Vec<String> {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        if chars.len() < self.n {
            return vec![chars.iter().collect()];
        }
        chars
            .windows(self.n)
            .map(|w| w.iter().collect())
            .collect()
    }

    /// Bucket index of a gram under FNV-1a. Hand-rolled so the mapping is
    /// stable across Rust versions (std hashers carry no such guarantee).
    pub fn bucket(&self, gram: &str) -> usize {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in gram.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x100_0000_01b3);
        }
        (hash % self.dim as u64) as usize
    }
}

impl Embedder for NgramHashEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(UspError::EmptyText);
        }
        let mut counts = vec![0.0_f64; self.dim];
        for gram in self.ngrams(text) {
            counts[self.bucket(&gram)] += 1.0;
        }
        let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut counts {
            *v /= norm;
        }
        Embedding::new(counts)
    }
}

/// Remote embedding endpoint: request `{"texts": [...]}`, response
/// `{"vectors": [[...]]}`.
pub struct RemoteEmbedder {
    url: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, token: Option<String>) -> Self {
        RemoteEmbedder {
            url: url.into(),
            token,
            client: reqwest::blocking::Client::new(),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(UspError::EmptyText);
        }
        let mut request = self
            .client
            .post(&self.url)
            .json(&EmbedRequest { texts: vec![text] });
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .map_err(|e| UspError::ProviderUnreachable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(UspError::BackendRejected {
                status: status.as_u16(),
                body: response.text().unwrap_or_default(),
            });
        }
        let parsed: EmbedResponse = response
            .json()
            .map_err(|e| UspError::ProviderUnreachable(format!("bad payload: {e}")))?;
        let vector = parsed
            .vectors
            .into_iter()
            .next()
            .ok_or_else(|| UspError::ProviderUnreachable("empty vectors".into()))?;
        Embedding::new(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fallback_is_deterministic() {
        let embedder = NgramHashEmbedder::default();
        let a = embedder.embed("the quick brown fox").unwrap();
        let b = embedder.embed("the quick brown fox").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_text_is_rejected() {
        let embedder = NgramHashEmbedder::default();
        assert!(matches!(embedder.embed(""), Err(UspError::EmptyText)));
        assert!(matches!(embedder.embed("   "), Err(UspError::EmptyText)));
    }

    #[test]
    fn disjoint_ngram_buckets_give_zero_cosine() {
        let embedder = NgramHashEmbedder::default();
        let left = "aaaa";
        let right = "bbbb";
        // Verify by explicit n-gram sets: the two texts share no character
        // 3-gram and their gram buckets do not collide.
        let buckets = |t: &str| -> std::collections::BTreeSet<usize> {
            embedder.ngrams(t).iter().map(|g| embedder.bucket(g)).collect()
        };
        let (lb, rb) = (buckets(left), buckets(right));
        assert!(lb.is_disjoint(&rb), "fixture texts must not collide");
        let cos = cosine(
            &embedder.embed(left).unwrap(),
            &embedder.embed(right).unwrap(),
        )
        .unwrap();
        assert!(cos.abs() < 1e-12);
    }

    #[test]
    fn cosine_fixtures() {
        let a = Embedding::new(vec![1.0, 0.0]).unwrap();
        let b = Embedding::new(vec![0.0, 1.0]).unwrap();
        let c = Embedding::new(vec![1.0, 1.0]).unwrap();
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
        let expected = 0.5_f64.sqrt(); // 0.7071...
        assert!((cosine(&a, &c).unwrap() - expected).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = Embedding::new(vec![1.0, 0.0]).unwrap();
        let b = Embedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            cosine(&a, &b),
            Err(UspError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_vector_is_rejected() {
        assert!(Embedding::new(vec![0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            values in proptest::collection::vec(-5.0f64..5.0, 3..8),
            alpha in 0.01f64..100.0,
        ) {
            prop_assume!(values.iter().any(|v| v.abs() > 1e-6));
            let a = Embedding::new(values.clone()).unwrap();
            let scaled = Embedding::new(values.iter().map(|v| v * alpha).collect()).unwrap();
            let b = Embedding::new(values.iter().rev().cloned().collect()).unwrap();
            let c1 = cosine(&a, &b).unwrap();
            let c2 = cosine(&scaled, &b).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-9);
        }

        #[test]
        fn embeddings_do_not_depend_on_corpus_order(texts in proptest::collection::vec("[a-z ]{1,20}", 2..6)) {
            let embedder = NgramHashEmbedder::default();
            let keep: Vec<&String> = texts.iter().filter(|t| !t.trim().is_empty()).collect();
            prop_assume!(!keep.is_empty());
            let forward: Vec<Embedding> =
                keep.iter().map(|t| embedder.embed(t).unwrap()).collect();
            let backward: Vec<Embedding> =
                keep.iter().rev().map(|t| embedder.embed(t).unwrap()).collect();
            for (f, b) in forward.iter().zip(backward.iter().rev()) {
                prop_assert_eq!(f.clone(), b.clone());
            }
        }
    }
}

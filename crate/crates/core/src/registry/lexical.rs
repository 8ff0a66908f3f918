//! Term-frequency vectors over lowercase alphanumeric tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Sparse L2-normalized term-frequency vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LexVector(pub BTreeMap<String, f64>);

impl LexVector {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Dot product; equals cosine similarity since both sides are unit length.
    pub fn cosine(&self, other: &LexVector) -> f64 {
        let (small, large) = if self.0.len() <= other.0.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.0.iter().filter_map(|(t, w)| large.0.get(t).map(|o| w * o)).sum()
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
        .collect()
}

/// Computes the vector stored with each registry record.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> LexVector;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LexicalEmbedder;

impl EmbeddingProvider for LexicalEmbedder {
    fn embed(&self, text: &str) -> LexVector {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in tokenize(text) {
            *tf.entry(t).or_default() += 1.0;
        }
        let norm = tf.values().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in tf.values_mut() {
                *v /= norm;
            }
        }
        LexVector(tf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_norm_and_self_similarity() {
        let v = LexicalEmbedder.embed("Match job seeker profiles with jobs");
        assert!((v.norm() - 1.0).abs() < 1e-9);
        assert!((v.cosine(&v) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_text_has_empty_vector() {
        let v = LexicalEmbedder.embed("  ,; ");
        assert!(v.is_empty());
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn orthogonal_vocabulary_scores_zero() {
        let a = LexicalEmbedder.embed("alpha beta");
        let b = LexicalEmbedder.embed("gamma delta");
        assert_eq!(a.cosine(&b), 0.0);
    }

    #[test]
    fn tokens_are_lowercase_alphanumeric() {
        assert_eq!(
            tokenize("SQL-Executor runs queries!"),
            vec!["sql", "executor", "runs", "queries"]
        );
    }
}

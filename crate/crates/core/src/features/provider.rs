use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Embedding;
use crate::error::{Error, Result};

pub const DEFAULT_TOY_DIM: usize = 16;
const VOCABULARY_VERSION: u32 = 1;
const MAX_ABS_COSINE: f64 = 0.5;
const MAX_DRAWS_PER_VECTOR: usize = 10_000;

/// Maps region text to a fixed-dimension embedding.
///
/// Implementations must be deterministic; `null_embedding` stands for the
/// null token that fills blank space and unconditional branches.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn null_embedding(&self) -> &Embedding;
    fn embed(&self, text: &str) -> Result<Embedding>;
}

/// Class label `k` (written as the decimal text `"k"`) to the `k`-th basis
/// vector; null is the zero vector.
#[derive(Debug, Clone)]
pub struct OneHotProvider {
    classes: usize,
    null: Embedding,
}

impl OneHotProvider {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("one-hot provider needs at least one class"));
        }
        Ok(Self { classes, null: Embedding(vec![0.0; classes]) })
    }

    pub fn embed_label(&self, label: usize) -> Result<Embedding> {
        if label == 0 || label > self.classes {
            return Err(Error::invalid(format!("class label {label} outside 1..={}", self.classes)));
        }
        let mut v = vec![0.0; self.classes];
        v[label - 1] = 1.0;
        Ok(Embedding(v))
    }
}

impl EmbeddingProvider for OneHotProvider {
    fn dim(&self) -> usize {
        self.classes
    }

    fn null_embedding(&self) -> &Embedding {
        &self.null
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let label: usize = text.trim().parse().map_err(|_| Error::UnknownConcept(text.to_string()))?;
        self.embed_label(label)
    }
}

/// On-disk description of a [`ToyProvider`]; enough to regenerate it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyVocabulary {
    pub version: u32,
    pub seed: u64,
    pub dim: usize,
    pub concepts: Vec<String>,
}

impl ToyVocabulary {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Seeded random unit vectors, one per concept, with pairwise `|cos| < 0.5`
/// (the null vector included).
#[derive(Debug, Clone)]
pub struct ToyProvider {
    vocabulary: ToyVocabulary,
    vectors: Vec<Embedding>,
    null: Embedding,
}

impl ToyProvider {
    pub fn new<S: AsRef<str>>(concepts: &[S], dim: usize, seed: u64) -> Result<Self> {
        Self::from_vocabulary(ToyVocabulary {
            version: VOCABULARY_VERSION,
            seed,
            dim,
            concepts: concepts.iter().map(|c| c.as_ref().to_string()).collect(),
        })
    }

    pub fn from_vocabulary(vocabulary: ToyVocabulary) -> Result<Self> {
        if vocabulary.version != VOCABULARY_VERSION {
            return Err(Error::Format(format!("unsupported vocabulary version {}", vocabulary.version)));
        }
        if vocabulary.dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        for (i, c) in vocabulary.concepts.iter().enumerate() {
            if c.trim().is_empty() {
                return Err(Error::invalid(format!("concept {i} has an empty name")));
            }
            if vocabulary.concepts[..i].contains(c) {
                return Err(Error::invalid(format!("duplicate concept `{c}`")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(vocabulary.seed);
        let mut accepted: Vec<Embedding> = Vec::with_capacity(vocabulary.concepts.len() + 1);
        // Index 0 is the null vector; concepts follow in vocabulary order.
        for slot in 0..=vocabulary.concepts.len() {
            let mut draws = 0;
            loop {
                if draws == MAX_DRAWS_PER_VECTOR {
                    let what = if slot == 0 { "the null token".to_string() } else { format!("`{}`", vocabulary.concepts[slot - 1]) };
                    return Err(Error::invalid(format!(
                        "could not draw a vector for {what} with |cos| < {MAX_ABS_COSINE} to the {} earlier vectors \
                         after {MAX_DRAWS_PER_VECTOR} draws; increase the dimension (now {})",
                        accepted.len(),
                        vocabulary.dim
                    )));
                }
                draws += 1;
                let raw: Vec<f64> = (0..vocabulary.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-6 {
                    continue;
                }
                let v = Embedding(raw.into_iter().map(|x| x / norm).collect());
                if accepted.iter().all(|u| u.dot(&v).abs() < MAX_ABS_COSINE) {
                    accepted.push(v);
                    break;
                }
            }
        }
        let null = accepted.remove(0);
        Ok(Self { vocabulary, vectors: accepted, null })
    }

    pub fn vocabulary(&self) -> &ToyVocabulary {
        &self.vocabulary
    }

    pub fn concepts(&self) -> &[String] {
        &self.vocabulary.concepts
    }

    pub fn index_of(&self, text: &str) -> Option<usize> {
        let t = text.trim();
        self.vocabulary.concepts.iter().position(|c| c == t)
    }

    pub fn vector(&self, index: usize) -> &Embedding {
        &self.vectors[index]
    }
}

impl EmbeddingProvider for ToyProvider {
    fn dim(&self) -> usize {
        self.vocabulary.dim
    }

    fn null_embedding(&self) -> &Embedding {
        &self.null
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        self.index_of(text)
            .map(|i| self.vectors[i].clone())
            .ok_or_else(|| Error::UnknownConcept(text.to_string()))
    }
}

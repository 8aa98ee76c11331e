//! Text-side embeddings: a deterministic hash-seeded toy encoder, and a loader
//! for embeddings exported from a real text tower.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_tensor, write_tensor, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize_rows, Matrix};

/// `K × D` unit-norm category embeddings bound to one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings {
    values: Matrix,
    vocab_hash: String,
}

impl TextEmbeddings {
    pub fn new(values: Matrix, vocab: &Vocabulary) -> Result<Self> {
        if values.rows() != vocab.len() {
            return Err(Error::VocabSize {
                expected: vocab.len(),
                found: values.rows(),
            });
        }
        let (normalized, norms) = l2_normalize_rows(&values);
        if norms.iter().any(|&n| !(n > 0.0) || !n.is_finite()) {
            return Err(Error::Invalid(
                "text embedding row with zero or non-finite norm".into(),
            ));
        }
        // Rows that are already unit stay bit-for-bit as given.
        let mut values = values;
        for (k, &n) in norms.iter().enumerate() {
            if (n - 1.0).abs() > 1e-12 {
                values.row_mut(k).copy_from_slice(normalized.row(k));
            }
        }
        Ok(Self {
            values,
            vocab_hash: vocab.hash(),
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    /// Refuse a vocabulary other than the one these embeddings were built for,
    /// unless `force` is set.
    pub fn check_vocab(&self, vocab: &Vocabulary, force: bool) -> Result<()> {
        if self.values.rows() != vocab.len() {
            return Err(Error::VocabSize {
                expected: vocab.len(),
                found: self.values.rows(),
            });
        }
        let h = vocab.hash();
        if !force && h != self.vocab_hash {
            return Err(Error::VocabHash {
                expected: h,
                found: self.vocab_hash.clone(),
            });
        }
        Ok(())
    }

    /// Rows for a subset of categories, in the given order.
    pub fn select(&self, idx: &[usize]) -> Matrix {
        self.values.select_rows(idx)
    }
}

fn prompt_seed(seed: u64, prompt: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Each prompt seeds a Gaussian draw through a keyed hash; a category's vector
/// is the mean over its templates, L2-normalized.
pub fn toy_encode(vocab: &Vocabulary, dim: usize, seed: u64) -> Result<TextEmbeddings> {
    if dim < 2 {
        return Err(Error::Invalid(format!(
            "text embedding dimension must be >= 2, got {dim}"
        )));
    }
    let mut values = Matrix::zeros(vocab.len(), dim);
    for k in 0..vocab.len() {
        let prompts = vocab.prompts(k);
        let row = values.row_mut(k);
        for p in &prompts {
            let mut rng = ChaCha8Rng::seed_from_u64(prompt_seed(seed, p));
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += z / prompts.len() as f64;
            }
        }
    }
    TextEmbeddings::new(values, vocab)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TextEmbeddingSidecar {
    pub names: Vec<String>,
    pub templates: Vec<String>,
    pub seed: Option<u64>,
    pub vocab_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write `K × D` values plus a JSON sidecar next to them.
pub fn save_text_embeddings(
    path: &Path,
    emb: &TextEmbeddings,
    vocab: &Vocabulary,
    seed: Option<u64>,
) -> Result<()> {
    emb.check_vocab(vocab, false)?;
    let m = emb.matrix();
    write_tensor(path, &[m.rows(), m.cols()], m.as_slice())?;
    let sidecar = TextEmbeddingSidecar {
        names: vocab.names().to_vec(),
        templates: vocab.templates().to_vec(),
        seed,
        vocab_hash: emb.vocab_hash.clone(),
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&sp, e))
}

/// Load a `K × D` tensor; rows are re-normalized and bound to `vocab`.
pub fn load_text_embeddings(path: &Path, vocab: &Vocabulary) -> Result<TextEmbeddings> {
    let t = read_tensor(path)?;
    if t.dims.len() != 2 {
        return Err(Error::format(
            path,
            format!("expected a K x D tensor, got dims {:?}", t.dims),
        ));
    }
    if t.dims[0] != vocab.len() {
        return Err(Error::VocabSize {
            expected: vocab.len(),
            found: t.dims[0],
        });
    }
    TextEmbeddings::new(Matrix::from_vec(t.dims[0], t.dims[1], t.values), vocab)
}

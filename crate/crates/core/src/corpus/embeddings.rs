use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Range for rows of words missing from the pretrained file.
pub const RANDOM_INIT_SCALE: f32 = 0.1;

/// Frozen word vectors, one row per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: Array2<f32>,
}

impl EmbeddingTable {
    pub fn from_matrix(rows: Array2<f32>) -> Self {
        EmbeddingTable { rows }
    }

    /// Every row drawn uniformly from `[-0.1, 0.1]`.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Array2::from_shape_fn((vocab_size, dim), |_| {
            rng.gen_range(-RANDOM_INIT_SCALE..=RANDOM_INIT_SCALE)
        });
        EmbeddingTable { rows }
    }

    /// Reads a `word v1 ... vD` text file. Vocabulary words found in the file
    /// take the file vector; the rest keep their seeded random row.
    pub fn load(path: &Path, vocab: &Vocab, dim: usize, seed: u64) -> Result<Self> {
        let mut table = Self::random(vocab.len(), dim, seed);
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = i + 1;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<f32> = parts
                .map(|v| {
                    v.parse::<f32>().map_err(|_| Error::Format {
                        path: path.to_path_buf(),
                        line: lineno,
                        message: format!("cannot parse {v:?} as a float"),
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: format!("expected {dim} values, found {}", values.len()),
                });
            }
            if let Some(id) = vocab.get(word) {
                table.rows.row_mut(id).assign(&ndarray::ArrayView1::from(&values));
            }
        }
        Ok(table)
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.rows
    }

    pub fn row(&self, id: TokenId) -> ndarray::ArrayView1<'_, f32> {
        self.rows.row(id)
    }

    /// Stacks the rows for `ids` into an `n × dim` matrix of `f64`.
    pub fn lookup(&self, ids: &[TokenId]) -> Tensor {
        let mut out = Tensor::zeros((ids.len(), self.dim()));
        for (mut dst, &id) in out.rows_mut().into_iter().zip(ids) {
            dst.zip_mut_with(&self.rows.row(id), |d, &s| *d = f64::from(s));
        }
        out
    }
}

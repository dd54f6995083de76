use super::Modality;
use crate::error::{shape_err, Error, Result};
use crate::numerics::Matrix;
use crate::rope::Position;

/// Embedded tokens: one column of `embeddings` per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Matrix,
    pub modality: Vec<Modality>,
    pub positions: Vec<Position>,
}

impl TokenSequence {
    pub fn new(embeddings: Matrix, modality: Vec<Modality>, positions: Vec<Position>) -> Result<Self> {
        let n = embeddings.cols();
        if modality.len() != n || positions.len() != n {
            return Err(shape_err(format!(
                "{} embedding columns, {} modality tags, {} positions",
                n,
                modality.len(),
                positions.len()
            )));
        }
        for (i, (m, p)) in modality.iter().zip(&positions).enumerate() {
            if *m == Modality::Text && !(p.t == p.h && p.h == p.w) {
                return Err(Error::InvalidArgument(format!(
                    "text token {i} has non-uniform position {p:?}"
                )));
            }
        }
        if !embeddings.is_finite() {
            return Err(Error::InvalidArgument("embeddings contain non-finite values".into()));
        }
        Ok(Self {
            embeddings,
            modality,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.embeddings.rows()
    }

    /// Tokens `range` as their own sequence (positions are kept as-is).
    pub fn slice(&self, range: std::ops::Range<usize>) -> TokenSequence {
        TokenSequence {
            embeddings: self.embeddings.col_block(range.start, range.len()),
            modality: self.modality[range.clone()].to_vec(),
            positions: self.positions[range].to_vec(),
        }
    }

    pub fn count(&self, m: Modality) -> usize {
        self.modality.iter().filter(|&&x| x == m).count()
    }
}

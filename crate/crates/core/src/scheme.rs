//! Types shared by the two retrieval schemes.

use thiserror::Error;

use crate::field::{FieldElement, FieldError};
use crate::params::ParamsError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemeError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("desired index {index} outside [0, {k})")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("desired set has {got} distinct indices, expected {expected}")]
    WrongDesiredCount { expected: usize, got: usize },
    #[error("message length {got} does not match the scheme's length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("query references {what} {index} beyond {limit}")]
    ReferenceOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("decode failed: {0}")]
    Decode(String),
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("repetition count {nu} leaves a fractional plain-randomness quota")]
    FractionalQuota { nu: usize },
    #[error("malformed query encoding: {0}")]
    Encoding(&'static str),
    #[error("table construction failed: {0}")]
    Construction(String),
}

/// A validated, sorted set of distinct message indices in `[0, K)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IndexSet {
    k: usize,
    indices: Vec<usize>,
}

impl IndexSet {
    pub fn new(k: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self, SchemeError> {
        let mut indices: Vec<usize> = indices.into_iter().collect();
        if let Some(&index) = indices.iter().find(|&&i| i >= k) {
            return Err(SchemeError::IndexOutOfRange { index, k });
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(IndexSet { k, indices })
    }

    pub fn universe(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    /// Every subset of `[0, k)` with `p` elements, in lexicographic order.
    pub fn all_of_size(k: usize, p: usize) -> Vec<IndexSet> {
        combinations(k, p)
            .into_iter()
            .map(|indices| IndexSet { k, indices })
            .collect()
    }
}

/// Lexicographically ordered `r`-subsets of `0..n`.
pub fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    if r > n {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.clone());
        let mut i = r;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - r {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// The symbols of one desired message recovered by a decoder, by position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievedMessage {
    pub message: usize,
    pub symbols: Vec<Option<FieldElement>>,
}

impl RetrievedMessage {
    pub fn recovered(&self) -> usize {
        self.symbols.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.symbols.iter().all(Option::is_some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_are_lexicographic() {
        assert_eq!(
            combinations(4, 2),
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
        assert_eq!(combinations(3, 0), vec![Vec::<usize>::new()]);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert!(combinations(2, 3).is_empty());
        assert_eq!(combinations(8, 4).len(), 70);
    }

    #[test]
    fn index_set_validation() {
        let s = IndexSet::new(5, [3, 1, 3]).unwrap();
        assert_eq!(s.as_slice(), &[1, 3]);
        assert!(s.contains(3) && !s.contains(2));
        assert_eq!(
            IndexSet::new(3, [3]),
            Err(SchemeError::IndexOutOfRange { index: 3, k: 3 })
        );
        assert_eq!(IndexSet::all_of_size(4, 2).len(), 6);
    }
}

//! Minimum Hamming distance decoding.

use rayon::prelude::*;

use crate::coding::CodingMatrix;
use crate::{Error, Result};

/// Concatenated meta-class predictions (1-based) of all base learners for
/// one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionVector {
    codes: Vec<u32>,
}

impl PredictionVector {
    pub fn new(codes: Vec<u32>) -> Self {
        Self { codes }
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }
}

impl From<Vec<u32>> for PredictionVector {
    fn from(codes: Vec<u32>) -> Self {
        Self::new(codes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeResult {
    /// Smallest class index among the rows at minimum distance.
    pub class_index: usize,
    pub distance: usize,
    /// Number of rows attaining the minimum distance.
    pub tie_count: usize,
}

pub fn hamming_distance(a: &[u32], b: &[u32]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), actual: b.len() });
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

pub fn decode(m: &CodingMatrix, p: &PredictionVector) -> Result<DecodeResult> {
    decode_codes(m, p.codes())
}

pub(crate) fn decode_codes(m: &CodingMatrix, codes: &[u32]) -> Result<DecodeResult> {
    if codes.len() != m.n_learners() {
        return Err(Error::LengthMismatch { expected: m.n_learners(), actual: codes.len() });
    }
    if let Some(&bad) = codes.iter().find(|&&c| c == 0 || c as usize > m.n_meta()) {
        return Err(Error::Range { value: bad as i64, what: format!("meta-class alphabet 1..={}", m.n_meta()) });
    }
    let entries = m.entries();
    let mut best = DecodeResult { class_index: 0, distance: usize::MAX, tie_count: 0 };
    for class in 0..m.n_classes() {
        let row = entries.row(class);
        let d = row.iter().zip(codes).filter(|(x, y)| x != y).count();
        if d < best.distance {
            best = DecodeResult { class_index: class, distance: d, tie_count: 1 };
        } else if d == best.distance {
            best.tie_count += 1;
        }
    }
    Ok(best)
}

/// Decode every vector in order. Runs in parallel; the result does not
/// depend on the thread count.
pub fn decode_batch(m: &CodingMatrix, ps: &[PredictionVector]) -> Result<Vec<DecodeResult>> {
    ps.par_iter().enumerate().map(|(i, p)| decode(m, p).map_err(|e| e.context(format!("sample {i}")))).collect()
}

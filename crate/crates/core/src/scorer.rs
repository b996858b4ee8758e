//! Late-interaction relevance scoring and the pooled single-vector baseline.
//!
//! ```text
//! r(Q, D) = Σ_i max_j  Q_i · D_j
//! ```
//!
//! Inputs are `f32`; every dot product and sum is accumulated in `f64`, so the
//! result does not depend on thread count or batch layout.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DocumentRecord, TokenMatrix};

/// A relevance score `r(q, d)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Score(pub f64);

impl Score {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// How per-query-token similarities are reduced over document tokens.
///
/// `Max` is the late-interaction operator. `Mean` and `Sum` exist for
/// ablations; both are sensitive to document length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
    Sum,
}

/// Inner product of two equal-length rows, accumulated in four `f64` lanes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..4 {
            acc[k] += f64::from(ca[k]) * f64::from(cb[k]);
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_pair(q: &TokenMatrix, d: &TokenMatrix) -> Result<()> {
    if q.dim() != d.dim() {
        return Err(Error::dim("maxsim", q.dim(), d.dim()));
    }
    if q.rows() == 0 {
        return Err(Error::Empty("query has no tokens"));
    }
    if d.rows() == 0 {
        return Err(Error::Empty("document has no tokens"));
    }
    Ok(())
}

/// Late-interaction score: sum over query tokens of the best document-token match.
pub fn maxsim(q: &TokenMatrix, d: &TokenMatrix) -> Result<Score> {
    score_with(q, d, Aggregation::Max)
}

pub fn score_with(q: &TokenMatrix, d: &TokenMatrix, agg: Aggregation) -> Result<Score> {
    check_pair(q, d)?;
    let total = q
        .iter_rows()
        .map(|qi| {
            let sims = d.iter_rows().map(|dj| dot(qi, dj));
            match agg {
                Aggregation::Max => sims.fold(f64::NEG_INFINITY, f64::max),
                Aggregation::Sum => sims.sum(),
                Aggregation::Mean => sims.sum::<f64>() / d.rows() as f64,
            }
        })
        .sum();
    Ok(Score(total))
}

/// For each query token, the index of its best document token.
///
/// Ties go to the lowest document-token index.
pub fn maxsim_argmax(q: &TokenMatrix, d: &TokenMatrix) -> Result<Vec<usize>> {
    check_pair(q, d)?;
    Ok(q.iter_rows()
        .map(|qi| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, dj) in d.iter_rows().enumerate() {
                let s = dot(qi, dj);
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0
        })
        .collect())
}

/// Scores one query against many documents; `out[i]` belongs to `docs[i]`.
pub fn maxsim_batch(q: &TokenMatrix, docs: &[DocumentRecord]) -> Result<Vec<Score>> {
    docs.par_iter().map(|d| maxsim(q, &d.tokens)).collect()
}

/// Pools a text [CLS] vector and any number of visual token blocks into one vector
/// by summing every row.
pub fn dpr_pool(text_cls: &[f32], visual_blocks: &[&TokenMatrix]) -> Result<Vec<f64>> {
    let mut pooled: Vec<f64> = text_cls.iter().map(|&x| f64::from(x)).collect();
    for block in visual_blocks {
        if block.dim() != pooled.len() {
            return Err(Error::dim("dpr_pool", pooled.len(), block.dim()));
        }
        for row in block.iter_rows() {
            for (acc, &x) in pooled.iter_mut().zip(row) {
                *acc += f64::from(x);
            }
        }
    }
    Ok(pooled)
}

/// Inner product of two pooled vectors.
pub fn dpr_score(q_pooled: &[f64], d_pooled: &[f64]) -> Result<Score> {
    if q_pooled.len() != d_pooled.len() {
        return Err(Error::dim("dpr_score", q_pooled.len(), d_pooled.len()));
    }
    Ok(Score(
        q_pooled.iter().zip(d_pooled).map(|(a, b)| a * b).sum(),
    ))
}

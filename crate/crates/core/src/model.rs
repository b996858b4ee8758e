//! Domain types shared by every stage of the engine.
//!
//! Token embeddings are stored as `f32` (the on-disk precision). Anything that
//! is accumulated (scores, pooled vectors, network parameters) is `f64`.

use std::collections::HashSet;
use std::fmt;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a row has unit L2 norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// Experiment dimensions shared by a corpus, its queries and the mapping network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Vision feature width.
    pub d_v: usize,
    /// Token embedding width of the text retriever.
    pub d_l: usize,
    /// Visual tokens produced per visual feature.
    pub n_vt: usize,
    /// Region-of-interest features per query.
    pub n_roi: usize,
}

impl Dims {
    /// CLIP ViT-B/32 feature width, ColBERTv2 token width, 32 visual tokens and 9 ROIs.
    pub const DEFAULT: Dims = Dims {
        d_v: 768,
        d_l: 128,
        n_vt: 32,
        n_roi: 9,
    };

    pub fn check(&self) -> Result<()> {
        for (name, v) in [("d_v", self.d_v), ("d_l", self.d_l), ("n_vt", self.n_vt)] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

impl Default for Dims {
    fn default() -> Self {
        Dims::DEFAULT
    }
}

/// Provenance of one row of a composed token matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenLabel {
    Text,
    GlobalImage,
    /// Visual tokens of the k-th selected region (0-based).
    Roi(u32),
    DocImage,
}

/// An `rows x dim` matrix of token embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    labels: Option<Vec<TokenLabel>>,
}

impl TokenMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(dim) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{} values cannot form a {rows}x{dim} matrix",
                data.len()
            )));
        }
        Ok(TokenMatrix {
            rows,
            dim,
            data,
            labels: None,
        })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has width {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        TokenMatrix::new(rows.len(), dim, data)
    }

    pub fn with_labels(mut self, labels: Vec<TokenLabel>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(Error::LengthMismatch {
                context: "row labels",
                left: labels.len(),
                right: self.rows,
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Labels every row with the same tag.
    pub fn labelled(self, label: TokenLabel) -> Self {
        let rows = self.rows;
        TokenMatrix {
            labels: Some(vec![label; rows]),
            ..self
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn labels(&self) -> Option<&[TokenLabel]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Rows carrying `label`, in order. Empty when the matrix is unlabelled.
    pub fn rows_with_label(&self, label: TokenLabel) -> Vec<&[f32]> {
        match &self.labels {
            Some(labels) => labels
                .iter()
                .enumerate()
                .filter(|(_, l)| **l == label)
                .map(|(i, _)| self.row(i))
                .collect(),
            None => Vec::new(),
        }
    }

    /// Stacks blocks vertically. Labels are kept only if every block is labelled.
    pub fn vstack(blocks: &[&TokenMatrix]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or(Error::Empty("vstack of zero blocks"))?;
        let dim = first.dim;
        let mut data = Vec::with_capacity(blocks.iter().map(|b| b.data.len()).sum());
        let mut labels = Some(Vec::new());
        for b in blocks {
            if b.dim != dim {
                return Err(Error::dim("vstack", dim, b.dim));
            }
            data.extend_from_slice(&b.data);
            labels = match (labels, &b.labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend_from_slice(l);
                    Some(acc)
                }
                _ => None,
            };
        }
        let rows = data.len() / dim.max(1);
        Ok(TokenMatrix {
            rows,
            dim,
            data,
            labels,
        })
    }

    /// Scales every row to unit L2 norm. All-zero rows are left untouched.
    pub fn normalize_rows(&mut self) {
        for row in self.data.chunks_exact_mut(self.dim.max(1)) {
            normalize_in_place(row);
        }
    }

    pub fn rows_are_unit_norm(&self) -> bool {
        self.iter_rows()
            .all(|r| (l2_norm(r) - 1.0).abs() <= UNIT_NORM_TOLERANCE)
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn normalize_in_place(row: &mut [f32]) {
    let norm = l2_norm(row);
    if norm > 0.0 {
        for x in row.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Global,
    Roi,
}

/// Pixel-space bounding box of a detected region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn area(&self) -> f64 {
        f64::from(self.w) * f64::from(self.h)
    }
}

/// Output of the vision encoder for a whole image or one region crop.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeature {
    pub data: Vec<f32>,
    pub kind: FeatureKind,
    pub bbox: Option<BBox>,
    pub class_name: Option<String>,
}

impl VisualFeature {
    pub fn global(data: Vec<f32>) -> Self {
        VisualFeature {
            data,
            kind: FeatureKind::Global,
            bbox: None,
            class_name: None,
        }
    }

    pub fn roi(data: Vec<f32>, bbox: BBox, class_name: impl Into<String>) -> Self {
        VisualFeature {
            data,
            kind: FeatureKind::Roi,
            bbox: Some(bbox),
            class_name: Some(class_name.into()),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }
}

/// Two-layer tanh MLP projecting one visual feature to `n_vt` tokens of width `d_l`.
///
/// Weights are row-major: `w1` is `d_v x hidden`, `w2` is `hidden x (n_vt * d_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingNetwork {
    pub d_v: usize,
    pub hidden: usize,
    pub n_vt: usize,
    pub d_l: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MappingNetwork {
    /// Hidden width used by default: half the flattened output width.
    pub fn default_hidden(n_vt: usize, d_l: usize) -> usize {
        (n_vt * d_l / 2).max(1)
    }

    pub fn zeros(d_v: usize, hidden: usize, n_vt: usize, d_l: usize) -> Self {
        let out = n_vt * d_l;
        MappingNetwork {
            d_v,
            hidden,
            n_vt,
            d_l,
            w1: vec![0.0; d_v * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * out],
            b2: vec![0.0; out],
        }
    }

    /// Seeded uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(dims: &Dims, seed: u64) -> Self {
        let hidden = Self::default_hidden(dims.n_vt, dims.d_l);
        Self::init_with_hidden(dims.d_v, hidden, dims.n_vt, dims.d_l, seed)
    }

    pub fn init_with_hidden(d_v: usize, hidden: usize, n_vt: usize, d_l: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(d_v, hidden, n_vt, d_l);
        let a1 = 1.0 / (d_v.max(1) as f64).sqrt();
        let a2 = 1.0 / (hidden.max(1) as f64).sqrt();
        for w in net.w1.iter_mut().chain(net.b1.iter_mut()) {
            *w = rng.random_range(-a1..=a1);
        }
        for w in net.w2.iter_mut().chain(net.b2.iter_mut()) {
            *w = rng.random_range(-a2..=a2);
        }
        net
    }

    pub fn out_width(&self) -> usize {
        self.n_vt * self.d_l
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// All parameters in the order `w1, b1, w2, b2`.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }
}

/// A question with its token embeddings and (optionally) its image features.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBundle {
    pub query_id: String,
    /// Question text, including any text-based vision appended to it.
    pub question_text: String,
    pub question_tokens: TokenMatrix,
    /// `None` for text-only query sets.
    pub global_feature: Option<VisualFeature>,
    /// Region features in selection order. May be shorter than `n_roi`; the
    /// composer pads with the global feature.
    pub roi_features: Vec<VisualFeature>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub tokens: TokenMatrix,
    pub text: Option<String>,
    pub image_feature: Option<VisualFeature>,
    /// Precomputed pooled embedding for the single-vector baseline.
    pub pooled: Option<Vec<f32>>,
}

impl DocumentRecord {
    pub fn new(doc_id: impl Into<String>, tokens: TokenMatrix) -> Self {
        DocumentRecord {
            doc_id: doc_id.into(),
            tokens,
            text: None,
            image_feature: None,
            pooled: None,
        }
    }
}

/// One candidate answer generated from one retrieved document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub answer: String,
    pub gen_logprob: f64,
}

/// Everything needed to score one question.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub question_id: String,
    /// Normalized human answers; multiplicity is preserved.
    pub answers: Vec<String>,
    pub retrieved_doc_ids: Vec<String>,
    /// Aligned with `retrieved_doc_ids` when present.
    pub candidate_answers: Option<Vec<CandidateAnswer>>,
    /// A directly supplied final answer, used when no candidates are given.
    pub generated_answer: Option<String>,
    pub no_knowledge_answer: Option<String>,
}

impl EvalRecord {
    pub fn new<S: AsRef<str>>(question_id: impl Into<String>, answers: &[S]) -> Self {
        EvalRecord {
            question_id: question_id.into(),
            answers: answers
                .iter()
                .map(|a| normalize_answer(a.as_ref()))
                .collect(),
            retrieved_doc_ids: Vec::new(),
            candidate_answers: None,
            generated_answer: None,
            no_knowledge_answer: None,
        }
    }
}

/// Answer normalization used for every string comparison: trim, then lowercase.
pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// A broken invariant found by [`Validate::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoRows,
    ZeroDim,
    NonFinite { row: usize, col: usize },
    NotUnitNorm { row: usize, norm: f64 },
    LabelCount { labels: usize, rows: usize },
    TokenDim { expected: usize, found: usize },
    FeatureDim { expected: usize, found: usize },
    FeatureDimMismatch,
    NonFiniteFeature { index: usize },
    MissingBbox,
    DegenerateBbox,
    RoiKind,
    GlobalKind,
    TooManyRois { max: usize, found: usize },
    RoisWithoutGlobal,
    DuplicateDocId(String),
    EmptyDocId,
    PooledDim { expected: usize, found: usize },
    NoAnswers,
    CandidateCount { candidates: usize, docs: usize },
    NetworkShape(String),
    NonFiniteParameter,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoRows => write!(f, "matrix has no rows"),
            Violation::ZeroDim => write!(f, "matrix has zero width"),
            Violation::NonFinite { row, col } => write!(f, "non-finite value at ({row},{col})"),
            Violation::NotUnitNorm { row, norm } => {
                write!(f, "row {row} has norm {norm}, expected unit norm")
            }
            Violation::LabelCount { labels, rows } => {
                write!(f, "{labels} row labels for {rows} rows")
            }
            Violation::TokenDim { expected, found } => {
                write!(f, "token dim {found}, corpus d_L is {expected}")
            }
            Violation::FeatureDim { expected, found } => {
                write!(f, "feature dim {found}, corpus d_V is {expected}")
            }
            Violation::FeatureDimMismatch => write!(f, "feature dim mismatch"),
            Violation::NonFiniteFeature { index } => {
                write!(f, "non-finite feature value at {index}")
            }
            Violation::MissingBbox => write!(f, "ROI feature without bounding box"),
            Violation::DegenerateBbox => write!(f, "bounding box with non-positive extent"),
            Violation::RoiKind => write!(f, "region list contains a non-ROI feature"),
            Violation::GlobalKind => write!(f, "global feature is not of kind GLOBAL"),
            Violation::TooManyRois { max, found } => {
                write!(f, "{found} ROI features, at most {max} allowed")
            }
            Violation::RoisWithoutGlobal => write!(f, "ROI features without a global feature"),
            Violation::DuplicateDocId(id) => write!(f, "duplicate doc_id {id:?}"),
            Violation::EmptyDocId => write!(f, "empty doc_id"),
            Violation::PooledDim { expected, found } => {
                write!(f, "pooled vector dim {found}, expected {expected}")
            }
            Violation::NoAnswers => write!(f, "answer set is empty"),
            Violation::CandidateCount { candidates, docs } => {
                write!(
                    f,
                    "{candidates} candidate answers for {docs} retrieved documents"
                )
            }
            Violation::NetworkShape(msg) => write!(f, "mapping network shape: {msg}"),
            Violation::NonFiniteParameter => write!(f, "non-finite mapping network parameter"),
        }
    }
}

/// What a record is checked against.
#[derive(Debug, Clone, Copy, Default)]
pub struct ValidationContext {
    pub dims: Option<Dims>,
    pub normalize_rows: bool,
}

impl ValidationContext {
    pub fn new(dims: Dims, normalize_rows: bool) -> Self {
        ValidationContext {
            dims: Some(dims),
            normalize_rows,
        }
    }
}

pub trait Validate {
    /// Every invariant violation; empty means valid. Never fails.
    fn validate(&self, ctx: &ValidationContext) -> Vec<Violation>;

    fn is_valid(&self, ctx: &ValidationContext) -> bool {
        self.validate(ctx).is_empty()
    }
}

impl Validate for TokenMatrix {
    fn validate(&self, ctx: &ValidationContext) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.rows == 0 {
            out.push(Violation::NoRows);
        }
        if self.dim == 0 {
            out.push(Violation::ZeroDim);
            return out;
        }
        if let Some(dims) = ctx.dims {
            if dims.d_l != self.dim {
                out.push(Violation::TokenDim {
                    expected: dims.d_l,
                    found: self.dim,
                });
            }
        }
        for (i, row) in self.iter_rows().enumerate() {
            if let Some(j) = row.iter().position(|x| !x.is_finite()) {
                out.push(Violation::NonFinite { row: i, col: j });
                continue;
            }
            if ctx.normalize_rows {
                let norm = l2_norm(row);
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    out.push(Violation::NotUnitNorm { row: i, norm });
                }
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.rows {
                out.push(Violation::LabelCount {
                    labels: labels.len(),
                    rows: self.rows,
                });
            }
        }
        out
    }
}

impl Validate for VisualFeature {
    fn validate(&self, ctx: &ValidationContext) -> Vec<Violation> {
        let mut out = Vec::new();
        if let Some(dims) = ctx.dims {
            if dims.d_v != self.dim() {
                out.push(Violation::FeatureDim {
                    expected: dims.d_v,
                    found: self.dim(),
                });
            }
        }
        if let Some(index) = self.data.iter().position(|x| !x.is_finite()) {
            out.push(Violation::NonFiniteFeature { index });
        }
        if self.kind == FeatureKind::Roi {
            match self.bbox {
                None => out.push(Violation::MissingBbox),
                Some(b) if !(b.w > 0.0 && b.h > 0.0) => out.push(Violation::DegenerateBbox),
                Some(_) => {}
            }
        }
        out
    }
}

impl Validate for MappingNetwork {
    fn validate(&self, ctx: &ValidationContext) -> Vec<Violation> {
        let mut out = Vec::new();
        let out_w = self.out_width();
        for (name, len, want) in [
            ("w1", self.w1.len(), self.d_v * self.hidden),
            ("b1", self.b1.len(), self.hidden),
            ("w2", self.w2.len(), self.hidden * out_w),
            ("b2", self.b2.len(), out_w),
        ] {
            if len != want {
                out.push(Violation::NetworkShape(format!(
                    "{name} has {len} values, expected {want}"
                )));
            }
        }
        if let Some(dims) = ctx.dims {
            if (dims.d_v, dims.n_vt, dims.d_l) != (self.d_v, self.n_vt, self.d_l) {
                out.push(Violation::NetworkShape(format!(
                    "network is {}->{}x{}, corpus is {}->{}x{}",
                    self.d_v, self.n_vt, self.d_l, dims.d_v, dims.n_vt, dims.d_l
                )));
            }
        }
        if self.params().any(|p| !p.is_finite()) {
            out.push(Violation::NonFiniteParameter);
        }
        out
    }
}

impl Validate for QueryBundle {
    fn validate(&self, ctx: &ValidationContext) -> Vec<Violation> {
        let mut out = self.question_tokens.validate(ctx);
        match &self.global_feature {
            Some(g) => {
                out.extend(g.validate(ctx));
                if g.kind != FeatureKind::Global {
                    out.push(Violation::GlobalKind);
                }
                if self.roi_features.iter().any(|r| r.dim() != g.dim()) {
                    out.push(Violation::FeatureDimMismatch);
                }
            }
            None if !self.roi_features.is_empty() => out.push(Violation::RoisWithoutGlobal),
            None => {}
        }
        for r in &self.roi_features {
            if r.kind != FeatureKind::Roi {
                out.push(Violation::RoiKind);
            }
            out.extend(r.validate(ctx));
        }
        if let Some(dims) = ctx.dims {
            if self.roi_features.len() > dims.n_roi {
                out.push(Violation::TooManyRois {
                    max: dims.n_roi,
                    found: self.roi_features.len(),
                });
            }
        }
        out
    }
}

impl Validate for DocumentRecord {
    fn validate(&self, ctx: &ValidationContext) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.doc_id.is_empty() {
            out.push(Violation::EmptyDocId);
        }
        out.extend(self.tokens.validate(ctx));
        if let Some(img) = &self.image_feature {
            out.extend(img.validate(ctx));
        }
        if let Some(p) = &self.pooled {
            if p.len() != self.tokens.dim() {
                out.push(Violation::PooledDim {
                    expected: self.tokens.dim(),
                    found: p.len(),
                });
            }
        }
        out
    }
}

impl Validate for [DocumentRecord] {
    fn validate(&self, ctx: &ValidationContext) -> Vec<Violation> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for doc in self {
            out.extend(doc.validate(ctx));
            if !seen.insert(doc.doc_id.as_str()) {
                out.push(Violation::DuplicateDocId(doc.doc_id.clone()));
            }
        }
        out
    }
}

impl Validate for EvalRecord {
    fn validate(&self, _ctx: &ValidationContext) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.answers.is_empty() {
            out.push(Violation::NoAnswers);
        }
        if let Some(c) = &self.candidate_answers {
            if c.len() != self.retrieved_doc_ids.len() {
                out.push(Violation::CandidateCount {
                    candidates: c.len(),
                    docs: self.retrieved_doc_ids.len(),
                });
            }
        }
        out
    }
}

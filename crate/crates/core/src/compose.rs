//! Building query and document token matrices.
//!
//! A query is the question's text tokens followed by the mapped tokens of the
//! global image feature and of each selected region:
//!
//! ```text
//! Q = [ text ; F_M(g) ; F_M(r_1) ; ... ; F_M(r_n_roi) ]    rows = l_q + (n_roi + 1) * n_vt
//! ```

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{
    DocumentRecord, FeatureKind, MappingNetwork, QueryBundle, TokenLabel, TokenMatrix,
    VisualFeature,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComposeOptions {
    pub n_roi: usize,
    pub normalize_rows: bool,
}

/// Intermediate values of one MLP forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    /// `tanh` activations of the hidden layer.
    pub hidden: Vec<f64>,
    /// Flattened `n_vt * d_l` output before any row normalization.
    pub out: Vec<f64>,
}

pub(crate) fn mlp_forward(net: &MappingNetwork, x: &[f64]) -> Forward {
    let h = net.hidden;
    let o = net.out_width();
    let mut hidden = net.b1.clone();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let w = &net.w1[i * h..(i + 1) * h];
        for (acc, &wk) in hidden.iter_mut().zip(w) {
            *acc += xi * wk;
        }
    }
    for v in hidden.iter_mut() {
        *v = v.tanh();
    }
    let mut out = net.b2.clone();
    for (k, &hk) in hidden.iter().enumerate() {
        let w = &net.w2[k * o..(k + 1) * o];
        for (acc, &wm) in out.iter_mut().zip(w) {
            *acc += hk * wm;
        }
    }
    Forward { hidden, out }
}

/// Normalizes each `d_l`-wide row in place and returns the pre-normalization norms.
pub(crate) fn normalize_token_rows(out: &mut [f64], d_l: usize) -> Vec<f64> {
    out.chunks_exact_mut(d_l)
        .map(|row| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            norm
        })
        .collect()
}

/// Projects one visual feature to `n_vt` tokens: `tanh(x W1 + b1) W2 + b2`, reshaped row-major.
pub fn map_visual(
    feature: &VisualFeature,
    net: &MappingNetwork,
    normalize_rows: bool,
) -> Result<TokenMatrix> {
    if feature.dim() != net.d_v {
        return Err(Error::dim("map_visual", net.d_v, feature.dim()));
    }
    let x: Vec<f64> = feature.data.iter().map(|&v| f64::from(v)).collect();
    let mut out = mlp_forward(net, &x).out;
    if normalize_rows {
        normalize_token_rows(&mut out, net.d_l);
    }
    TokenMatrix::new(
        net.n_vt,
        net.d_l,
        out.into_iter().map(|v| v as f32).collect(),
    )
}

/// A detected region considered for inclusion in the query.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiCandidate<'a> {
    pub feature: &'a VisualFeature,
    pub area: f64,
    /// The class name occurs in the question as a whole word (case-insensitive).
    pub mentioned: bool,
}

impl<'a> RoiCandidate<'a> {
    /// `None` when the feature has no bounding box with positive area.
    pub fn new(feature: &'a VisualFeature, question_text: &str) -> Option<Self> {
        let area = feature.bbox?.area();
        if area.is_nan() || area <= 0.0 {
            return None;
        }
        let mentioned = feature
            .class_name
            .as_deref()
            .is_some_and(|c| mentions(question_text, c));
        Some(RoiCandidate {
            feature,
            area,
            mentioned,
        })
    }

    fn class_name(&self) -> &str {
        self.feature.class_name.as_deref().unwrap_or("")
    }
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whole-word, case-insensitive match of `phrase` inside `text`.
pub fn mentions(text: &str, phrase: &str) -> bool {
    let needle = words(phrase);
    if needle.is_empty() {
        return false;
    }
    words(text)
        .windows(needle.len())
        .any(|w| w == needle.as_slice())
}

fn roi_order(a: &RoiCandidate<'_>, b: &RoiCandidate<'_>) -> Ordering {
    b.mentioned
        .cmp(&a.mentioned)
        .then_with(|| b.area.total_cmp(&a.area))
        .then_with(|| a.class_name().cmp(b.class_name()))
}

/// Orders regions by (mentioned in question, larger area, class name) and keeps
/// the first `n_roi`. Features without a usable bounding box are skipped; equal
/// keys keep their input order.
pub fn select_rois<'a>(
    features: &'a [VisualFeature],
    question_text: &str,
    n_roi: usize,
) -> Vec<&'a VisualFeature> {
    let mut candidates: Vec<RoiCandidate<'a>> = features
        .iter()
        .filter_map(|f| RoiCandidate::new(f, question_text))
        .collect();
    candidates.sort_by(roi_order);
    candidates
        .into_iter()
        .take(n_roi)
        .map(|c| c.feature)
        .collect()
}

/// Replaces the bundle's region list by its top `n_roi` selection.
pub fn apply_roi_selection(bundle: &mut QueryBundle, n_roi: usize) {
    let selected: Vec<VisualFeature> =
        select_rois(&bundle.roi_features, &bundle.question_text, n_roi)
            .into_iter()
            .cloned()
            .collect();
    bundle.roi_features = selected;
}

/// Composes the query token matrix with labelled blocks.
///
/// Region slots beyond the available regions are filled with the global
/// feature so that every visual query has exactly `l_q + (n_roi + 1) * n_vt`
/// rows. Text-only bundles compose to their text tokens.
pub fn compose_query(
    bundle: &QueryBundle,
    net: Option<&MappingNetwork>,
    opts: ComposeOptions,
) -> Result<TokenMatrix> {
    let text = bundle.question_tokens.clone().labelled(TokenLabel::Text);
    let Some(global) = &bundle.global_feature else {
        if !bundle.roi_features.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "query {} has region features but no global feature",
                bundle.query_id
            )));
        }
        return Ok(text);
    };
    let net = net.ok_or_else(|| {
        Error::InvalidConfig(format!(
            "query {} has visual features but no mapping network was supplied",
            bundle.query_id
        ))
    })?;
    if net.d_l != text.dim() {
        return Err(Error::dim("compose_query text tokens", net.d_l, text.dim()));
    }
    for r in &bundle.roi_features {
        if r.dim() != global.dim() {
            return Err(Error::dim(
                "compose_query roi feature",
                global.dim(),
                r.dim(),
            ));
        }
        if r.kind != FeatureKind::Roi {
            return Err(Error::InvalidConfig(
                "region list holds a non-ROI feature".into(),
            ));
        }
    }

    let global_block =
        map_visual(global, net, opts.normalize_rows)?.labelled(TokenLabel::GlobalImage);
    let mut blocks = vec![text, global_block];
    for slot in 0..opts.n_roi {
        let feature = bundle.roi_features.get(slot).unwrap_or(global);
        blocks.push(
            map_visual(feature, net, opts.normalize_rows)?.labelled(TokenLabel::Roi(slot as u32)),
        );
    }
    let refs: Vec<&TokenMatrix> = blocks.iter().collect();
    TokenMatrix::vstack(&refs)
}

/// Document tokens, optionally followed by the mapped tokens of the document image.
pub fn compose_document(
    record: &DocumentRecord,
    net: Option<&MappingNetwork>,
    multimodal: bool,
    normalize_rows: bool,
) -> Result<TokenMatrix> {
    let text = record.tokens.clone().labelled(TokenLabel::Text);
    if !multimodal {
        return Ok(text);
    }
    let image = record
        .image_feature
        .as_ref()
        .ok_or_else(|| Error::MissingImageFeature(record.doc_id.clone()))?;
    let net = net.ok_or_else(|| {
        Error::InvalidConfig("multimodal documents need a mapping network".into())
    })?;
    if net.d_l != text.dim() {
        return Err(Error::dim("compose_document", net.d_l, text.dim()));
    }
    let block = map_visual(image, net, normalize_rows)?.labelled(TokenLabel::DocImage);
    TokenMatrix::vstack(&[&text, &block])
}

//! Seeded synthetic corpora with planted relevance, and aligned pair tasks.
//!
//! Every random draw comes from one `ChaCha8Rng` stream, consumed in a fixed
//! order, so the output is a pure function of the spec.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compose::{apply_roi_selection, compose_query, ComposeOptions};
use crate::error::{Error, Result};
use crate::metrics::AnswerEntry;
use crate::model::{
    normalize_in_place, BBox, Dims, DocumentRecord, MappingNetwork, QueryBundle, TokenLabel,
    TokenMatrix, VisualFeature,
};
use crate::store::corpus::{AlignedPairs, Corpus};
use crate::store::manifest::{CorpusManifest, ManifestKind};

const CLASS_NAMES: [&str; 12] = [
    "cat",
    "dog",
    "car",
    "tree",
    "person",
    "bus",
    "horse",
    "boat",
    "bird",
    "clock",
    "umbrella",
    "traffic light",
];

/// Which blocks of the composed query supply the tokens planted into the gold document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlantSource {
    #[default]
    All,
    Text,
    /// Global and region tokens.
    Visual,
    Roi,
}

impl PlantSource {
    fn accepts(self, label: TokenLabel) -> bool {
        match self {
            PlantSource::All => true,
            PlantSource::Text => label == TokenLabel::Text,
            PlantSource::Visual => label != TokenLabel::Text,
            PlantSource::Roi => matches!(label, TokenLabel::Roi(_)),
        }
    }
}

fn default_small_dims() -> Dims {
    Dims {
        d_v: 32,
        d_l: 16,
        n_vt: 4,
        n_roi: 3,
    }
}

fn default_tokens_per_doc() -> [usize; 2] {
    [16, 48]
}

fn default_question_tokens() -> usize {
    8
}

fn default_roi_candidates() -> [usize; 2] {
    [0, 6]
}

fn default_planted() -> f64 {
    0.5
}

fn default_sigma() -> f64 {
    0.1
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Parameters of a synthetic retrieval corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub doc_count: usize,
    pub query_count: usize,
    #[serde(default = "default_tokens_per_doc")]
    pub tokens_per_doc: [usize; 2],
    #[serde(default = "default_question_tokens")]
    pub question_tokens: usize,
    /// Inclusive range of detected regions per query image.
    #[serde(default = "default_roi_candidates")]
    pub roi_candidates: [usize; 2],
    /// Fraction of the source query tokens copied into the gold document.
    #[serde(default = "default_planted")]
    pub planted_relevance: f64,
    /// Standard deviation of the Gaussian noise added to planted copies.
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub plant_source: PlantSource,
    /// Documents per topic. Documents of a topic share `topic_tokens` rows,
    /// which also appear in the text of queries whose gold document is in it.
    #[serde(default = "default_one")]
    pub topic_size: usize,
    #[serde(default)]
    pub topic_tokens: usize,
    #[serde(default = "default_true")]
    pub normalize_rows: bool,
    #[serde(default)]
    pub multimodal_docs: bool,
    #[serde(default = "default_small_dims")]
    pub dims: Dims,
}

impl SyntheticSpec {
    /// A spec with defaults for everything but the seed and counts.
    pub fn new(seed: u64, doc_count: usize, query_count: usize) -> Self {
        SyntheticSpec {
            seed,
            doc_count,
            query_count,
            tokens_per_doc: default_tokens_per_doc(),
            question_tokens: default_question_tokens(),
            roi_candidates: default_roi_candidates(),
            planted_relevance: default_planted(),
            noise_sigma: default_sigma(),
            plant_source: PlantSource::All,
            topic_size: 1,
            topic_tokens: 0,
            normalize_rows: true,
            multimodal_docs: false,
            dims: default_small_dims(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.planted_relevance) {
            return bad("planted_relevance must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if self.doc_count == 0 {
            return bad("doc_count must be at least 1");
        }
        let [lo, hi] = self.tokens_per_doc;
        if lo == 0 || lo > hi {
            return bad("tokens_per_doc must be [min, max] with 1 <= min <= max");
        }
        if self.question_tokens == 0 {
            return bad("question_tokens must be at least 1");
        }
        if self.roi_candidates[0] > self.roi_candidates[1] {
            return bad("roi_candidates must be [min, max] with min <= max");
        }
        if self.topic_size == 0 {
            return bad("topic_size must be at least 1");
        }
        if self.topic_tokens > lo || self.topic_tokens > self.question_tokens {
            return bad("topic_tokens cannot exceed the shortest document or the question length");
        }
        self.dims.check()
    }
}

/// Parameters of the aligned image-to-document training task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignedSpec {
    pub seed: u64,
    pub pairs: usize,
    #[serde(default = "default_small_dims")]
    pub dims: Dims,
    /// Document rows that are a fixed linear image of the feature.
    #[serde(default = "default_linear_tokens")]
    pub linear_tokens: usize,
    /// Additional unrelated document rows.
    #[serde(default = "default_filler_tokens")]
    pub filler_tokens: usize,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_true")]
    pub normalize_rows: bool,
}

fn default_linear_tokens() -> usize {
    4
}

fn default_filler_tokens() -> usize {
    4
}

impl AlignedSpec {
    pub fn new(seed: u64, pairs: usize) -> Self {
        AlignedSpec {
            seed,
            pairs,
            dims: default_small_dims(),
            linear_tokens: default_linear_tokens(),
            filler_tokens: default_filler_tokens(),
            noise_sigma: default_sigma(),
            normalize_rows: true,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.pairs == 0 || self.linear_tokens == 0 {
            return Err(Error::InvalidConfig(
                "pairs and linear_tokens must be at least 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(
                "noise_sigma must be finite and non-negative".into(),
            ));
        }
        self.dims.check()
    }
}

/// A generator spec file: `kind = "corpus"` (default) or `kind = "pairs"`.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthSpec {
    Corpus(SyntheticSpec),
    Pairs(AlignedSpec),
}

impl SynthSpec {
    /// Parses a TOML spec. A missing required key yields `missing field: <key>`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("spec: {e}")))?;
        let kind = match table.remove("kind") {
            None => "corpus".to_string(),
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(Error::InvalidConfig("kind must be a string".into())),
        };
        let required: &[&str] = match kind.as_str() {
            "corpus" => &["seed", "doc_count", "query_count"],
            "pairs" => &["seed", "pairs"],
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown spec kind {other:?} (expected \"corpus\" or \"pairs\")"
                )))
            }
        };
        if let Some(missing) = required.iter().find(|k| !table.contains_key(**k)) {
            return Err(Error::InvalidConfig(format!("missing field: {missing}")));
        }
        let de = |e: toml::de::Error| Error::InvalidConfig(format!("spec: {e}"));
        let spec = if kind == "corpus" {
            let s: SyntheticSpec = table.try_into().map_err(de)?;
            s.check()?;
            SynthSpec::Corpus(s)
        } else {
            let s: AlignedSpec = table.try_into().map_err(de)?;
            s.check()?;
            SynthSpec::Pairs(s)
        };
        Ok(spec)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect()
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize, normalize: bool) -> Vec<Vec<f32>> {
    (0..rows)
        .map(|_| {
            let mut r = gaussian(rng, dim);
            if normalize {
                normalize_in_place(&mut r);
            }
            r
        })
        .collect()
}

fn noisy_copy(rng: &mut ChaCha8Rng, row: &[f32], sigma: f64, normalize: bool) -> Vec<f32> {
    let mut out: Vec<f32> = row
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(rng);
            (f64::from(v) + sigma * n) as f32
        })
        .collect();
    if normalize {
        normalize_in_place(&mut out);
    }
    out
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

/// The answer string planted into a query's gold document text.
pub fn synthetic_answer(query_index: usize) -> String {
    format!("answer-{query_index:06}")
}

struct DocDraft {
    rows: Vec<Vec<f32>>,
    /// Rows that may still be overwritten by a planted copy.
    free: Vec<usize>,
    text: String,
}

/// Builds a corpus, its queries, gold map and answers. Requires a valid spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.check()?;
    let dims = spec.dims;
    let norm = spec.normalize_rows;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let net = MappingNetwork::init(&dims, rng.random());

    let dw = id_width(spec.doc_count);
    let doc_ids: Vec<String> = (0..spec.doc_count).map(|i| format!("d{i:0dw$}")).collect();
    let mut drafts: Vec<DocDraft> = doc_ids
        .iter()
        .map(|id| {
            let len = rng.random_range(spec.tokens_per_doc[0]..=spec.tokens_per_doc[1]);
            DocDraft {
                rows: gaussian_rows(&mut rng, len, dims.d_l, norm),
                free: (0..len).collect(),
                text: format!("synthetic document {id}"),
            }
        })
        .collect();

    let topics_on = spec.topic_size > 1 && spec.topic_tokens > 0;
    let n_topics = spec.doc_count.div_ceil(spec.topic_size);
    let topic_rows: Vec<Vec<Vec<f32>>> = if topics_on {
        (0..n_topics)
            .map(|_| gaussian_rows(&mut rng, spec.topic_tokens, dims.d_l, norm))
            .collect()
    } else {
        Vec::new()
    };
    if topics_on {
        for (i, draft) in drafts.iter_mut().enumerate() {
            for row in &topic_rows[i / spec.topic_size] {
                let slot = draft
                    .free
                    .swap_remove(rng.random_range(0..draft.free.len()));
                draft.rows[slot] = noisy_copy(&mut rng, row, spec.noise_sigma, norm);
            }
        }
    }

    let multimodal_images: Vec<Option<VisualFeature>> = (0..spec.doc_count)
        .map(|_| {
            spec.multimodal_docs
                .then(|| VisualFeature::global(gaussian(&mut rng, dims.d_v)))
        })
        .collect();

    let qw = id_width(spec.query_count);
    let opts = ComposeOptions {
        n_roi: dims.n_roi,
        normalize_rows: norm,
    };
    let mut queries = Vec::with_capacity(spec.query_count);
    let mut gold = BTreeMap::new();
    let mut answers = Vec::with_capacity(spec.query_count);
    for qi in 0..spec.query_count {
        let query_id = format!("q{qi:0qw$}");
        let gold_idx = rng.random_range(0..spec.doc_count);

        let mut text_rows = gaussian_rows(&mut rng, spec.question_tokens, dims.d_l, norm);
        if topics_on {
            for (k, row) in topic_rows[gold_idx / spec.topic_size].iter().enumerate() {
                text_rows[k] = noisy_copy(&mut rng, row, spec.noise_sigma, norm);
            }
        }
        let global = VisualFeature::global(gaussian(&mut rng, dims.d_v));
        let n_cand = rng.random_range(spec.roi_candidates[0]..=spec.roi_candidates[1]);
        let rois: Vec<VisualFeature> = (0..n_cand)
            .map(|_| {
                let class = CLASS_NAMES[rng.random_range(0..CLASS_NAMES.len())];
                let bbox = BBox {
                    x: rng.random_range(0..400) as f32,
                    y: rng.random_range(0..300) as f32,
                    w: rng.random_range(8..=256) as f32,
                    h: rng.random_range(8..=256) as f32,
                };
                VisualFeature::roi(gaussian(&mut rng, dims.d_v), bbox, class)
            })
            .collect();
        let question_text = match rois.is_empty() {
            true => format!("question {qi}: what is shown in this picture?"),
            false => {
                let c = rois[rng.random_range(0..rois.len())]
                    .class_name
                    .clone()
                    .unwrap_or_default();
                format!("question {qi}: what can you tell about the {c}?")
            }
        };
        let bundle = QueryBundle {
            query_id: query_id.clone(),
            question_text,
            question_tokens: TokenMatrix::from_rows(&text_rows)?,
            global_feature: Some(global),
            roi_features: rois,
        };

        let mut selected = bundle.clone();
        apply_roi_selection(&mut selected, dims.n_roi);
        let q = compose_query(&selected, Some(&net), opts)?;
        let labels = q.labels().expect("composed queries are labelled");
        let mut source: Vec<usize> = (0..q.rows())
            .filter(|&r| spec.plant_source.accepts(labels[r]))
            .collect();
        let n_plant = (spec.planted_relevance * source.len() as f64).round() as usize;
        source.shuffle(&mut rng);
        source.truncate(n_plant);
        source.sort_unstable();

        let draft = &mut drafts[gold_idx];
        while draft.free.len() < source.len() {
            draft.free.push(draft.rows.len());
            let extra = gaussian_rows(&mut rng, 1, dims.d_l, norm);
            draft.rows.extend(extra);
        }
        for &r in &source {
            let slot = draft
                .free
                .swap_remove(rng.random_range(0..draft.free.len()));
            draft.rows[slot] = noisy_copy(&mut rng, q.row(r), spec.noise_sigma, norm);
        }
        let answer = synthetic_answer(qi);
        draft.text.push_str(&format!(" | {answer}"));

        gold.insert(query_id.clone(), doc_ids[gold_idx].clone());
        answers.push(AnswerEntry {
            question_id: query_id,
            answers: vec![answer.clone(), answer.clone(), answer],
            generated: None,
            no_knowledge: None,
        });
        queries.push(bundle);
    }

    let docs = drafts
        .into_iter()
        .zip(doc_ids)
        .zip(multimodal_images)
        .map(|((draft, id), image)| {
            let tokens = TokenMatrix::from_rows(&draft.rows)?;
            let pooled = mean_row(&tokens, norm);
            Ok(DocumentRecord {
                doc_id: id,
                tokens,
                text: Some(draft.text),
                image_feature: image,
                pooled: Some(pooled),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut manifest = CorpusManifest::new(dims, norm);
    manifest.multimodal_docs = spec.multimodal_docs;
    manifest.doc_count = docs.len();
    manifest.query_count = queries.len();
    Ok(Corpus {
        manifest,
        docs,
        queries,
        gold,
        answers,
        net: Some(net),
    })
}

/// Mean of the rows, unit-normalized when `normalize` is set: a stand-in for
/// an encoder's pooled [CLS] summary of the same text.
pub fn mean_row(m: &TokenMatrix, normalize: bool) -> Vec<f32> {
    let mut acc = vec![0.0f64; m.dim()];
    for row in m.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    let mut out: Vec<f32> = acc.iter().map(|a| (a / m.rows() as f64) as f32).collect();
    if normalize {
        normalize_in_place(&mut out);
    }
    out
}

/// Pairs whose documents contain a noisy linear image of the feature plus filler rows.
pub fn generate_aligned_pairs(spec: &AlignedSpec) -> Result<AlignedPairs> {
    spec.check()?;
    let Dims { d_v, d_l, .. } = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.linear_tokens * d_l;
    let scale = 1.0 / (d_v as f64).sqrt();
    let projection: Vec<f64> = gaussian(&mut rng, d_v * width)
        .into_iter()
        .map(|v| f64::from(v) * scale)
        .collect();

    let mut features = Vec::with_capacity(spec.pairs);
    let mut docs = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        let x = gaussian(&mut rng, d_v);
        let mut image = vec![0.0f64; width];
        for (i, &xi) in x.iter().enumerate() {
            let row = &projection[i * width..(i + 1) * width];
            for (acc, &a) in image.iter_mut().zip(row) {
                *acc += f64::from(xi) * a;
            }
        }
        let mut rows: Vec<Vec<f32>> = image
            .chunks_exact(d_l)
            .map(|r| {
                let r: Vec<f32> = r.iter().map(|&v| v as f32).collect();
                noisy_copy(&mut rng, &r, spec.noise_sigma, spec.normalize_rows)
            })
            .collect();
        rows.extend(gaussian_rows(
            &mut rng,
            spec.filler_tokens,
            d_l,
            spec.normalize_rows,
        ));
        docs.push(TokenMatrix::from_rows(&rows)?);
        features.push(VisualFeature::global(x));
    }
    let mut manifest = CorpusManifest::new(spec.dims, spec.normalize_rows);
    manifest.kind = ManifestKind::Pairs;
    manifest.doc_count = spec.pairs;
    manifest.query_count = spec.pairs;
    Ok(AlignedPairs {
        manifest,
        features,
        docs,
    })
}

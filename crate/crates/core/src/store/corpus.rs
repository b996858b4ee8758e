//! Corpus and pair directories: a manifest, `FLMR` blobs, and JSON-lines sidecars.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{parse_answers, write_answers, AnswerEntry};
use crate::model::{
    BBox, DocumentRecord, FeatureKind, MappingNetwork, QueryBundle, TokenLabel, TokenMatrix,
    Validate, ValidationContext, VisualFeature,
};
use crate::store::format::{decode_embeddings, decode_network, encode_embeddings, encode_network};
use crate::store::manifest::{CorpusManifest, ManifestKind, MANIFEST_FILE};
use crate::store::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocMeta {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMeta {
    pub kind: FeatureKind,
    /// `[x, y, w, h]` in pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f32; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryMeta {
    pub query_id: String,
    pub question_text: String,
    /// One entry per row of the query's feature record: the global feature first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<FeatureMeta>,
}

pub(crate) fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(i + 1, e.to_string())))
        .collect()
}

pub(crate) fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("sidecar serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_doc_meta(text: &str) -> Result<Vec<DocMeta>> {
    parse_jsonl(text)
}

pub fn parse_query_meta(text: &str) -> Result<Vec<QueryMeta>> {
    parse_jsonl(text)
}

/// `query_id <TAB> doc_id` per line; blank lines and `#` comments are skipped.
pub fn parse_gold(text: &str) -> Result<BTreeMap<String, String>> {
    let mut gold = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(q), Some(d), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(i + 1, "expected query_id<TAB>doc_id"));
        };
        if q.is_empty() || d.is_empty() {
            return Err(Error::parse(i + 1, "empty id"));
        }
        if gold.insert(q.to_string(), d.to_string()).is_some() {
            return Err(Error::parse(i + 1, format!("duplicate query_id {q:?}")));
        }
    }
    Ok(gold)
}

fn gold_to_text(gold: &BTreeMap<String, String>) -> String {
    gold.iter().map(|(q, d)| format!("{q}\t{d}\n")).collect()
}

fn feature_from(data: &[f32], meta: &FeatureMeta) -> VisualFeature {
    VisualFeature {
        data: data.to_vec(),
        kind: meta.kind,
        bbox: meta.bbox.map(|[x, y, w, h]| BBox { x, y, w, h }),
        class_name: meta.class_name.clone(),
    }
}

fn feature_meta(f: &VisualFeature) -> FeatureMeta {
    FeatureMeta {
        kind: f.kind,
        bbox: f.bbox.map(|b| [b.x, b.y, b.w, b.h]),
        class_name: f.class_name.clone(),
    }
}

fn single_row_blob(vectors: &[&[f32]], label: TokenLabel) -> Result<Vec<u8>> {
    let mats = vectors
        .iter()
        .map(|v| TokenMatrix::new(1, v.len(), v.to_vec()).map(|m| m.labelled(label)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TokenMatrix> = mats.iter().collect();
    encode_embeddings(&refs)
}

fn read_blob(dir: &Path, rel: &str) -> Result<Vec<TokenMatrix>> {
    decode_embeddings(&std::fs::read(dir.join(rel))?)
}

fn check_count(what: &str, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!(
            "{what}: {found} records, manifest says {expected}"
        )));
    }
    Ok(())
}

/// An in-memory retrieval corpus and its query set.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub docs: Vec<DocumentRecord>,
    /// Queries with all candidate regions; selection happens at composition time.
    pub queries: Vec<QueryBundle>,
    pub gold: BTreeMap<String, String>,
    pub answers: Vec<AnswerEntry>,
    pub net: Option<MappingNetwork>,
}

impl Corpus {
    pub fn validation_context(&self) -> ValidationContext {
        ValidationContext::new(self.manifest.dims(), self.manifest.normalize_rows)
    }

    /// Writes every blob and sidecar, then the manifest. Counts and file names
    /// in the manifest are filled in from the contents.
    pub fn save(&self, dir: &Path) -> Result<CorpusManifest> {
        std::fs::create_dir_all(dir)?;
        let mut m = self.manifest.clone();
        m.kind = ManifestKind::Corpus;
        m.doc_count = self.docs.len();
        m.query_count = self.queries.len();
        m.files = Default::default();

        if !self.docs.is_empty() {
            let toks: Vec<&TokenMatrix> = self.docs.iter().map(|d| &d.tokens).collect();
            write_atomic(&dir.join("docs.flmr"), &encode_embeddings(&toks)?)?;
            m.files.doc_tokens = Some("docs.flmr".into());
            let meta: Vec<DocMeta> = self
                .docs
                .iter()
                .map(|d| DocMeta {
                    doc_id: d.doc_id.clone(),
                    text: d.text.clone(),
                })
                .collect();
            write_atomic(&dir.join("docs.jsonl"), to_jsonl(&meta).as_bytes())?;
            m.files.doc_meta = Some("docs.jsonl".into());

            if let Some(images) = all_some(self.docs.iter().map(|d| d.image_feature.as_ref())) {
                let rows: Vec<&[f32]> = images.iter().map(|f| f.data.as_slice()).collect();
                write_atomic(
                    &dir.join("doc_images.flmr"),
                    &single_row_blob(&rows, TokenLabel::DocImage)?,
                )?;
                m.files.doc_images = Some("doc_images.flmr".into());
            }
            if let Some(pooled) = all_some(self.docs.iter().map(|d| d.pooled.as_ref())) {
                let rows: Vec<&[f32]> = pooled.iter().map(|p| p.as_slice()).collect();
                write_atomic(
                    &dir.join("doc_pooled.flmr"),
                    &single_row_blob(&rows, TokenLabel::Text)?,
                )?;
                m.files.doc_pooled = Some("doc_pooled.flmr".into());
            }
        }

        if !self.queries.is_empty() {
            let toks: Vec<&TokenMatrix> = self.queries.iter().map(|q| &q.question_tokens).collect();
            write_atomic(&dir.join("queries.flmr"), &encode_embeddings(&toks)?)?;
            m.files.query_tokens = Some("queries.flmr".into());

            let visual = self
                .queries
                .iter()
                .filter(|q| q.global_feature.is_some())
                .count();
            if visual != 0 && visual != self.queries.len() {
                return Err(Error::Format(
                    "either every query has a global feature or none does".into(),
                ));
            }
            let mut metas = Vec::with_capacity(self.queries.len());
            let mut feats = Vec::new();
            for q in &self.queries {
                let mut fm = Vec::new();
                if let Some(g) = &q.global_feature {
                    let rows: Vec<&VisualFeature> =
                        std::iter::once(g).chain(&q.roi_features).collect();
                    let mut data = Vec::new();
                    let mut labels = Vec::new();
                    for (i, f) in rows.iter().enumerate() {
                        if f.dim() != g.dim() {
                            return Err(Error::dim("query features", g.dim(), f.dim()));
                        }
                        data.extend_from_slice(&f.data);
                        labels.push(if i == 0 {
                            TokenLabel::GlobalImage
                        } else {
                            TokenLabel::Roi(i as u32 - 1)
                        });
                        fm.push(feature_meta(f));
                    }
                    feats.push(TokenMatrix::new(rows.len(), g.dim(), data)?.with_labels(labels)?);
                }
                metas.push(QueryMeta {
                    query_id: q.query_id.clone(),
                    question_text: q.question_text.clone(),
                    features: fm,
                });
            }
            if !feats.is_empty() {
                let refs: Vec<&TokenMatrix> = feats.iter().collect();
                write_atomic(&dir.join("query_features.flmr"), &encode_embeddings(&refs)?)?;
                m.files.query_features = Some("query_features.flmr".into());
            }
            write_atomic(&dir.join("queries.jsonl"), to_jsonl(&metas).as_bytes())?;
            m.files.query_meta = Some("queries.jsonl".into());
        }

        if !self.gold.is_empty() {
            write_atomic(&dir.join("gold.tsv"), gold_to_text(&self.gold).as_bytes())?;
            m.files.gold = Some("gold.tsv".into());
        }
        if !self.answers.is_empty() {
            write_atomic(
                &dir.join("answers.jsonl"),
                write_answers(&self.answers).as_bytes(),
            )?;
            m.files.answers = Some("answers.jsonl".into());
        }
        if let Some(net) = &self.net {
            write_atomic(&dir.join("net.ckpt"), &encode_network(net)?)?;
            m.files.net = Some("net.ckpt".into());
        }
        write_atomic(&dir.join(MANIFEST_FILE), m.to_toml().as_bytes())?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = CorpusManifest::load(dir)?;
        if manifest.kind != ManifestKind::Corpus {
            return Err(Error::Format(format!(
                "{} is not a corpus directory",
                dir.display()
            )));
        }
        let files = &manifest.files;
        let ctx = ValidationContext::new(manifest.dims(), manifest.normalize_rows);

        let mut docs = Vec::new();
        if let Some(rel) = &files.doc_tokens {
            let toks = read_blob(dir, rel)?;
            let meta = match &files.doc_meta {
                Some(m) => parse_doc_meta(&std::fs::read_to_string(dir.join(m))?)?,
                None => return Err(Error::Format("doc_tokens without doc_meta".into())),
            };
            check_count("doc_meta", meta.len(), toks.len())?;
            check_count("doc_tokens", toks.len(), manifest.doc_count)?;
            let images = files
                .doc_images
                .as_ref()
                .map(|r| read_blob(dir, r))
                .transpose()?;
            let pooled = files
                .doc_pooled
                .as_ref()
                .map(|r| read_blob(dir, r))
                .transpose()?;
            for extra in [&images, &pooled].into_iter().flatten() {
                check_count("per-document vectors", extra.len(), toks.len())?;
                if extra.iter().any(|m| m.rows() != 1) {
                    return Err(Error::Format(
                        "per-document vectors must have one row".into(),
                    ));
                }
            }
            for (i, (tokens, meta)) in toks.into_iter().zip(meta).enumerate() {
                let mut d = DocumentRecord::new(meta.doc_id, tokens);
                d.text = meta.text;
                d.image_feature = images
                    .as_ref()
                    .map(|im| VisualFeature::global(im[i].data().to_vec()));
                d.pooled = pooled.as_ref().map(|p| p[i].data().to_vec());
                docs.push(d);
            }
        }
        let violations = docs.as_slice().validate(&ctx);
        if let Some(v) = violations.first() {
            return Err(Error::Format(format!("corpus invalid: {v}")));
        }

        let mut queries = Vec::new();
        if let Some(rel) = &files.query_tokens {
            let toks = read_blob(dir, rel)?;
            let meta = match &files.query_meta {
                Some(m) => parse_query_meta(&std::fs::read_to_string(dir.join(m))?)?,
                None => return Err(Error::Format("query_tokens without query_meta".into())),
            };
            check_count("query_meta", meta.len(), toks.len())?;
            check_count("query_tokens", toks.len(), manifest.query_count)?;
            let feats = files
                .query_features
                .as_ref()
                .map(|r| read_blob(dir, r))
                .transpose()?;
            if let Some(f) = &feats {
                check_count("query_features", f.len(), toks.len())?;
            }
            for (i, (tokens, meta)) in toks.into_iter().zip(meta).enumerate() {
                let (global, rois) = match &feats {
                    Some(f) => split_features(&f[i], &meta)?,
                    None if meta.features.is_empty() => (None, Vec::new()),
                    None => {
                        return Err(Error::Format(format!(
                            "query {} lists features but the corpus has no feature blob",
                            meta.query_id
                        )))
                    }
                };
                let q = QueryBundle {
                    query_id: meta.query_id,
                    question_text: meta.question_text,
                    question_tokens: tokens,
                    global_feature: global,
                    roi_features: rois,
                };
                let mut v = q.question_tokens.validate(&ctx);
                v.extend(q.global_feature.iter().flat_map(|g| g.validate(&ctx)));
                v.extend(q.roi_features.iter().flat_map(|r| r.validate(&ctx)));
                if let Some(v) = v.first() {
                    return Err(Error::Format(format!("query {} invalid: {v}", q.query_id)));
                }
                queries.push(q);
            }
        }

        let gold = match &files.gold {
            Some(rel) => parse_gold(&std::fs::read_to_string(dir.join(rel))?)?,
            None => BTreeMap::new(),
        };
        let answers = match &files.answers {
            Some(rel) => parse_answers(&std::fs::read_to_string(dir.join(rel))?)?,
            None => Vec::new(),
        };
        let net = match &files.net {
            Some(rel) => Some(decode_network(&std::fs::read(dir.join(rel))?)?),
            None => None,
        };
        Ok(Corpus {
            manifest,
            docs,
            queries,
            gold,
            answers,
            net,
        })
    }
}

fn all_some<'a, T: 'a>(items: impl Iterator<Item = Option<&'a T>>) -> Option<Vec<&'a T>> {
    let v: Vec<Option<&T>> = items.collect();
    if v.is_empty() || v.iter().any(Option::is_none) {
        return None;
    }
    Some(v.into_iter().flatten().collect())
}

fn split_features(
    rows: &TokenMatrix,
    meta: &QueryMeta,
) -> Result<(Option<VisualFeature>, Vec<VisualFeature>)> {
    if rows.rows() != meta.features.len() {
        return Err(Error::Format(format!(
            "query {}: {} feature rows but {} feature descriptions",
            meta.query_id,
            rows.rows(),
            meta.features.len()
        )));
    }
    if meta.features[0].kind != FeatureKind::Global
        || meta.features[1..]
            .iter()
            .any(|f| f.kind != FeatureKind::Roi)
    {
        return Err(Error::Format(format!(
            "query {}: features must be one global followed by ROIs",
            meta.query_id
        )));
    }
    let global = feature_from(rows.row(0), &meta.features[0]);
    let rois = (1..rows.rows())
        .map(|i| feature_from(rows.row(i), &meta.features[i]))
        .collect();
    Ok((Some(global), rois))
}

/// Image-feature/document pairs for training the mapping network.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPairs {
    pub manifest: CorpusManifest,
    pub features: Vec<VisualFeature>,
    pub docs: Vec<TokenMatrix>,
}

impl AlignedPairs {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<CorpusManifest> {
        if self.features.len() != self.docs.len() {
            return Err(Error::LengthMismatch {
                context: "aligned pairs",
                left: self.features.len(),
                right: self.docs.len(),
            });
        }
        std::fs::create_dir_all(dir)?;
        let mut m = self.manifest.clone();
        m.kind = ManifestKind::Pairs;
        m.doc_count = self.docs.len();
        m.query_count = self.features.len();
        m.files = Default::default();
        let rows: Vec<&[f32]> = self.features.iter().map(|f| f.data.as_slice()).collect();
        write_atomic(
            &dir.join("features.flmr"),
            &single_row_blob(&rows, TokenLabel::GlobalImage)?,
        )?;
        m.files.pair_features = Some("features.flmr".into());
        let refs: Vec<&TokenMatrix> = self.docs.iter().collect();
        write_atomic(&dir.join("docs.flmr"), &encode_embeddings(&refs)?)?;
        m.files.doc_tokens = Some("docs.flmr".into());
        write_atomic(&dir.join(MANIFEST_FILE), m.to_toml().as_bytes())?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = CorpusManifest::load(dir)?;
        if manifest.kind != ManifestKind::Pairs {
            return Err(Error::Format(format!(
                "{} is not a pairs directory",
                dir.display()
            )));
        }
        let (Some(f), Some(d)) = (&manifest.files.pair_features, &manifest.files.doc_tokens) else {
            return Err(Error::Format(
                "pairs manifest needs pair_features and doc_tokens".into(),
            ));
        };
        let feats = read_blob(dir, f)?;
        let docs = read_blob(dir, d)?;
        check_count("pair_features", feats.len(), manifest.query_count)?;
        check_count("doc_tokens", docs.len(), manifest.doc_count)?;
        if feats.len() != docs.len() {
            return Err(Error::LengthMismatch {
                context: "aligned pairs",
                left: feats.len(),
                right: docs.len(),
            });
        }
        let ctx = ValidationContext::new(manifest.dims(), manifest.normalize_rows);
        let features: Vec<VisualFeature> = feats
            .into_iter()
            .map(|m| VisualFeature::global(m.into_data()))
            .collect();
        for (i, (f, d)) in features.iter().zip(&docs).enumerate() {
            if let Some(v) = f.validate(&ctx).into_iter().chain(d.validate(&ctx)).next() {
                return Err(Error::Format(format!("pair {i} invalid: {v}")));
            }
        }
        Ok(AlignedPairs {
            manifest,
            features,
            docs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gold_parsing() {
        let g = parse_gold("# header\nq1\td3\n\nq2\td1\r\n").unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g["q2"], "d1");
        assert!(parse_gold("q1 d3\n").is_err());
        assert!(parse_gold("q1\td3\nq1\td4\n").is_err());
        assert!(parse_gold("q1\td3\textra\n").is_err());
    }

    #[test]
    fn query_meta_rejects_unknown_fields() {
        assert!(parse_query_meta(r#"{"query_id":"q","question_text":"t","bogus":1}"#).is_err());
        let m = parse_query_meta(
            r#"{"query_id":"q","question_text":"t","features":[{"kind":"global"},{"kind":"roi","bbox":[0,0,3,4],"class_name":"cat"}]}"#,
        )
        .unwrap();
        assert_eq!(m[0].features.len(), 2);
    }
}

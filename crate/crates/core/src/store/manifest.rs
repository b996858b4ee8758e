//! `manifest.toml`: the self-describing header of a corpus or pair directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dims;
use crate::store::format::FORMAT_VERSION;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ManifestKind {
    /// Documents plus queries for retrieval.
    #[default]
    Corpus,
    /// Aligned (image feature, document) pairs for mapping-network training.
    Pairs,
}

/// Paths (relative to the manifest's directory) of the blobs and sidecars.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFiles {
    pub doc_tokens: Option<String>,
    pub doc_meta: Option<String>,
    pub doc_images: Option<String>,
    pub doc_pooled: Option<String>,
    pub query_tokens: Option<String>,
    pub query_features: Option<String>,
    pub query_meta: Option<String>,
    pub pair_features: Option<String>,
    pub gold: Option<String>,
    pub answers: Option<String>,
    pub net: Option<String>,
}

impl ManifestFiles {
    fn all(&self) -> impl Iterator<Item = (&'static str, &String)> {
        [
            ("doc_tokens", &self.doc_tokens),
            ("doc_meta", &self.doc_meta),
            ("doc_images", &self.doc_images),
            ("doc_pooled", &self.doc_pooled),
            ("query_tokens", &self.query_tokens),
            ("query_features", &self.query_features),
            ("query_meta", &self.query_meta),
            ("pair_features", &self.pair_features),
            ("gold", &self.gold),
            ("answers", &self.answers),
            ("net", &self.net),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    #[serde(default)]
    pub kind: ManifestKind,
    pub d_v: usize,
    pub d_l: usize,
    pub n_vt: usize,
    pub n_roi: usize,
    pub doc_count: usize,
    pub query_count: usize,
    pub normalize_rows: bool,
    /// Documents carry an image whose mapped tokens are appended at indexing time.
    #[serde(default)]
    pub multimodal_docs: bool,
    #[serde(default)]
    pub files: ManifestFiles,
}

impl CorpusManifest {
    pub fn new(dims: Dims, normalize_rows: bool) -> Self {
        CorpusManifest {
            format_version: FORMAT_VERSION,
            kind: ManifestKind::Corpus,
            d_v: dims.d_v,
            d_l: dims.d_l,
            n_vt: dims.n_vt,
            n_roi: dims.n_roi,
            doc_count: 0,
            query_count: 0,
            normalize_rows,
            multimodal_docs: false,
            files: ManifestFiles::default(),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d_v: self.d_v,
            d_l: self.d_l,
            n_vt: self.n_vt,
            n_roi: self.n_roi,
        }
    }

    /// Parses and checks the manifest text without touching the filesystem.
    pub fn parse(text: &str) -> Result<Self> {
        let m: CorpusManifest =
            toml::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: m.format_version,
                expected: FORMAT_VERSION,
            });
        }
        m.dims().check()?;
        for (key, path) in m.files.all() {
            let p = Path::new(path);
            if path.is_empty()
                || p.is_absolute()
                || p.components()
                    .any(|c| matches!(c, std::path::Component::ParentDir))
            {
                return Err(Error::Format(format!(
                    "manifest: files.{key} must be a relative path inside the directory, got {path:?}"
                )));
            }
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Loads `dir/manifest.toml` and checks that every referenced file exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m = Self::parse(&text)?;
        for (key, rel) in m.files.all() {
            if !dir.join(rel).is_file() {
                return Err(Error::Format(format!(
                    "manifest: files.{key} = {rel:?} does not exist in {}",
                    dir.display()
                )));
            }
        }
        Ok(m)
    }

    pub fn resolve(dir: &Path, rel: &Option<String>) -> Option<PathBuf> {
        rel.as_ref().map(|r| dir.join(r))
    }
}

//! Top-K MaxSim search: an exhaustive oracle and a two-stage centroid index.
//!
//! The centroid index clusters every document token with k-means. A query
//! probes the `nprobe` nearest centroids of each of its tokens, takes the union
//! of documents found in those posting lists, and reranks them exactly.

use std::collections::HashSet;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DocumentRecord, TokenMatrix};
use crate::scorer::{maxsim, Score};
use crate::store::corpus::{parse_doc_meta, to_jsonl, DocMeta};
use crate::store::format::{Reader, Writer, FORMAT_VERSION, KIND_POSTINGS};
use crate::store::{decode_embeddings, encode_embeddings, write_atomic};

pub const INDEX_FILE: &str = "index.toml";
pub const DEFAULT_KMEANS_ITERS: usize = 25;

const DOCS_FILE: &str = "docs.flmr";
const META_FILE: &str = "docs.jsonl";
const CENTROIDS_FILE: &str = "centroids.flmr";
const POSTINGS_FILE: &str = "postings.flmr";

/// One ranked search result.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub doc_id: String,
    pub score: Score,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    pub iterations: usize,
    pub inertia: f64,
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached. A cluster that empties is moved onto the
/// point farthest from its current centroid.
pub fn kmeans(points: &[f32], dim: usize, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{} values do not form rows of width {dim}",
            points.len()
        )));
    }
    let m = points.len() / dim;
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if k > m {
        return Err(Error::TooFewPoints { k, points: m });
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..m));
    let mut d2: Vec<f64> = (0..m)
        .map(|i| sq_dist(point(i), point(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the target just past the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            (0..m).find(|i| !chosen.contains(i)).expect("k <= m")
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), point(next)));
        }
    }
    let mut centroids: Vec<f32> = chosen.iter().flat_map(|&i| point(i).to_vec()).collect();

    let assign = |centroids: &[f32]| -> Vec<(usize, f64)> {
        (0..m)
            .into_par_iter()
            .map(|i| nearest(point(i), centroids, dim))
            .collect()
    };
    let mut current = assign(&centroids);
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in current.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += f64::from(v);
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = (s / counts[c] as f64) as f32;
                }
            }
        }
        let mut taken = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..m)
                .filter(|i| !taken.contains(i))
                .max_by(|&a, &b| current[a].1.total_cmp(&current[b].1).then(b.cmp(&a)));
            if let Some(far) = far {
                taken.insert(far);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(point(far));
            }
        }
        let next = assign(&centroids);
        let changed = next.iter().zip(&current).any(|(a, b)| a.0 != b.0);
        current = next;
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        k,
        dim,
        centroids,
        assignments: current.iter().map(|&(c, _)| c as u32).collect(),
        iterations,
        inertia: current.iter().map(|&(_, d)| d).sum(),
    })
}

/// Orders by score descending, then doc_id ascending, and keeps the first `k`.
fn rank(docs: &[DocumentRecord], scored: Vec<(usize, f64)>, k: usize) -> Vec<Hit> {
    let mut scored = scored;
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| docs[a.0].doc_id.cmp(&docs[b.0].doc_id))
    });
    scored.truncate(k);
    scored
        .into_iter()
        .map(|(i, s)| Hit {
            doc_id: docs[i].doc_id.clone(),
            score: Score(s),
        })
        .collect()
}

fn score_candidates(
    docs: &[DocumentRecord],
    q: &TokenMatrix,
    idx: &[usize],
) -> Result<Vec<(usize, f64)>> {
    idx.par_iter()
        .map(|&i| maxsim(q, &docs[i].tokens).map(|s| (i, s.value())))
        .collect()
}

fn check_docs(docs: &[DocumentRecord]) -> Result<usize> {
    let first = docs.first().ok_or(Error::Empty("index has no documents"))?;
    let dim = first.tokens.dim();
    let mut seen = HashSet::new();
    for d in docs {
        if d.tokens.dim() != dim {
            return Err(Error::dim("index documents", dim, d.tokens.dim()));
        }
        if !seen.insert(d.doc_id.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "duplicate doc_id {:?}",
                d.doc_id
            )));
        }
    }
    Ok(dim)
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    Ok(())
}

/// Brute-force search over every document.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactIndex {
    docs: Vec<DocumentRecord>,
    dim: usize,
}

impl ExactIndex {
    pub fn new(docs: Vec<DocumentRecord>) -> Result<Self> {
        let dim = check_docs(&docs)?;
        Ok(ExactIndex { docs, dim })
    }

    pub fn docs(&self) -> &[DocumentRecord] {
        &self.docs
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn search(&self, q: &TokenMatrix, k: usize) -> Result<Vec<Hit>> {
        check_k(k)?;
        let all: Vec<usize> = (0..self.docs.len()).collect();
        Ok(rank(&self.docs, score_candidates(&self.docs, q, &all)?, k))
    }
}

pub fn search_exact(index: &ExactIndex, q: &TokenMatrix, k: usize) -> Result<Vec<Hit>> {
    index.search(q, k)
}

/// One token occurrence in a posting list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub row: u32,
}

/// `⌈√tokens⌉`, at least 1.
pub fn default_centroids(total_tokens: usize) -> usize {
    let mut c = (total_tokens as f64).sqrt().ceil() as usize;
    while c > 1 && (c - 1) * (c - 1) >= total_tokens {
        c -= 1;
    }
    while c * c < total_tokens {
        c += 1;
    }
    c.max(1)
}

pub fn default_nprobe(n_centroids: usize) -> usize {
    (n_centroids / 8).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidIndex {
    docs: Vec<DocumentRecord>,
    dim: usize,
    /// `C × dim`.
    centroids: TokenMatrix,
    postings: Vec<Vec<Posting>>,
    /// Distinct documents per posting list, ascending.
    doc_lists: Vec<Vec<u32>>,
    nprobe: usize,
    seed: u64,
    iterations: usize,
}

fn doc_lists(postings: &[Vec<Posting>]) -> Vec<Vec<u32>> {
    postings
        .iter()
        .map(|list| {
            let mut docs: Vec<u32> = list.iter().map(|p| p.doc).collect();
            docs.sort_unstable();
            docs.dedup();
            docs
        })
        .collect()
}

impl CentroidIndex {
    /// Clusters all document tokens into `n_centroids` centroids.
    pub fn build(docs: Vec<DocumentRecord>, n_centroids: usize, seed: u64) -> Result<Self> {
        let dim = check_docs(&docs)?;
        let total: usize = docs.iter().map(|d| d.tokens.rows()).sum();
        if n_centroids > total {
            return Err(Error::TooFewPoints {
                k: n_centroids,
                points: total,
            });
        }
        let u32_len = |n: usize| {
            u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
        };
        u32_len(docs.len())?;
        let mut points = Vec::with_capacity(total * dim);
        let mut owners = Vec::with_capacity(total);
        for (d, doc) in docs.iter().enumerate() {
            points.extend_from_slice(doc.tokens.data());
            for r in 0..doc.tokens.rows() {
                owners.push(Posting {
                    doc: d as u32,
                    row: u32_len(r)?,
                });
            }
        }
        let km = kmeans(&points, dim, n_centroids, seed, DEFAULT_KMEANS_ITERS)?;
        let mut postings = vec![Vec::new(); n_centroids];
        for (owner, &c) in owners.into_iter().zip(&km.assignments) {
            postings[c as usize].push(owner);
        }
        Ok(CentroidIndex {
            dim,
            centroids: TokenMatrix::new(n_centroids, dim, km.centroids)?,
            doc_lists: doc_lists(&postings),
            postings,
            nprobe: default_nprobe(n_centroids),
            docs,
            seed,
            iterations: km.iterations,
        })
    }

    pub fn with_nprobe(mut self, nprobe: usize) -> Result<Self> {
        self.check_nprobe(nprobe)?;
        self.nprobe = nprobe;
        Ok(self)
    }

    fn check_nprobe(&self, nprobe: usize) -> Result<()> {
        if nprobe == 0 || nprobe > self.n_centroids() {
            return Err(Error::InvalidConfig(format!(
                "nprobe must lie in [1, {}], got {nprobe}",
                self.n_centroids()
            )));
        }
        Ok(())
    }

    pub fn n_centroids(&self) -> usize {
        self.centroids.rows()
    }

    pub fn nprobe(&self) -> usize {
        self.nprobe
    }

    pub fn docs(&self) -> &[DocumentRecord] {
        &self.docs
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &TokenMatrix {
        &self.centroids
    }

    pub fn postings(&self) -> &[Vec<Posting>] {
        &self.postings
    }

    /// Union of documents in the `nprobe` nearest posting lists of every query
    /// token, ascending by position.
    pub fn candidates(&self, q: &TokenMatrix, nprobe: usize) -> Result<Vec<usize>> {
        self.check_nprobe(nprobe)?;
        if q.dim() != self.dim {
            return Err(Error::dim("query tokens", self.dim, q.dim()));
        }
        let mut hit = vec![false; self.docs.len()];
        let mut order: Vec<(usize, f64)> = Vec::with_capacity(self.n_centroids());
        for row in q.iter_rows() {
            order.clear();
            order.extend(
                self.centroids
                    .iter_rows()
                    .enumerate()
                    .map(|(c, centroid)| (c, sq_dist(row, centroid))),
            );
            order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            for &(c, _) in &order[..nprobe] {
                for &d in &self.doc_lists[c] {
                    hit[d as usize] = true;
                }
            }
        }
        Ok(hit
            .iter()
            .enumerate()
            .filter(|(_, &h)| h)
            .map(|(i, _)| i)
            .collect())
    }

    /// Candidate generation followed by an exact rerank. An empty candidate
    /// set gives an empty result.
    pub fn search(&self, q: &TokenMatrix, k: usize, nprobe: usize) -> Result<Vec<Hit>> {
        check_k(k)?;
        let cands = self.candidates(q, nprobe)?;
        Ok(rank(
            &self.docs,
            score_candidates(&self.docs, q, &cands)?,
            k,
        ))
    }
}

pub fn build_centroid_index(
    docs: Vec<DocumentRecord>,
    n_centroids: usize,
    seed: u64,
) -> Result<CentroidIndex> {
    CentroidIndex::build(docs, n_centroids, seed)
}

pub fn search_centroid(
    index: &CentroidIndex,
    q: &TokenMatrix,
    k: usize,
    nprobe: usize,
) -> Result<Vec<Hit>> {
    index.search(q, k, nprobe)
}

/// Serializes posting lists as a kind-3 `FLMR` file.
pub fn encode_postings(postings: &[Vec<Posting>], n_docs: usize) -> Result<Vec<u8>> {
    let mut w = Writer::new(KIND_POSTINGS);
    w.len_u32(postings.len())?;
    w.len_u32(n_docs)?;
    for list in postings {
        w.len_u32(list.len())?;
    }
    for p in postings.iter().flatten() {
        w.u32(p.doc);
        w.u32(p.row);
    }
    Ok(w.finish())
}

/// Returns the posting lists and the document count they refer to.
pub fn decode_postings(bytes: &[u8]) -> Result<(Vec<Vec<Posting>>, usize)> {
    let mut r = Reader::open(bytes, KIND_POSTINGS)?;
    let c = r.usize()?;
    let n_docs = r.usize()?;
    if c == 0 {
        return Err(Error::Format("postings: zero centroids".into()));
    }
    r.ensure(c, 4)?;
    let counts = (0..c).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let mut postings = Vec::with_capacity(c);
    for n in counts {
        r.ensure(n, 8)?;
        let mut list = Vec::with_capacity(n);
        for _ in 0..n {
            let doc = r.u32()?;
            let row = r.u32()?;
            if doc as usize >= n_docs {
                return Err(Error::Format(format!(
                    "postings: document {doc} out of range for {n_docs} documents"
                )));
            }
            list.push(Posting { doc, row });
        }
        postings.push(list);
    }
    r.finish()?;
    Ok((postings, n_docs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    Exact,
    Centroid,
}

/// `index.toml`: parameters and counts of a saved index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexManifest {
    pub format_version: u32,
    pub mode: IndexMode,
    pub dim: usize,
    pub doc_count: usize,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_centroids: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nprobe: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kmeans_iterations: Option<usize>,
}

impl IndexManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: IndexManifest =
            toml::from_str(text).map_err(|e| Error::Format(format!("index manifest: {e}")))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: m.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if m.mode == IndexMode::Centroid && (m.n_centroids.is_none() || m.nprobe.is_none()) {
            return Err(Error::Format(
                "index manifest: centroid mode needs n_centroids and nprobe".into(),
            ));
        }
        Ok(m)
    }
}

/// Either kind of index, as stored in an index directory.
#[derive(Debug, Clone, PartialEq)]
pub enum Index {
    Exact(ExactIndex),
    Centroid(CentroidIndex),
}

impl Index {
    pub fn docs(&self) -> &[DocumentRecord] {
        match self {
            Index::Exact(i) => i.docs(),
            Index::Centroid(i) => i.docs(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Index::Exact(i) => i.dim(),
            Index::Centroid(i) => i.dim(),
        }
    }

    /// Exact search for an exact index; centroid search with `nprobe`, or the
    /// index default when `None`, otherwise.
    pub fn search(&self, q: &TokenMatrix, k: usize, nprobe: Option<usize>) -> Result<Vec<Hit>> {
        match self {
            Index::Exact(i) => i.search(q, k),
            Index::Centroid(i) => i.search(q, k, nprobe.unwrap_or(i.nprobe())),
        }
    }

    pub fn manifest(&self) -> IndexManifest {
        let docs = self.docs();
        let mut m = IndexManifest {
            format_version: FORMAT_VERSION,
            mode: IndexMode::Exact,
            dim: self.dim(),
            doc_count: docs.len(),
            token_count: docs.iter().map(|d| d.tokens.rows()).sum(),
            n_centroids: None,
            nprobe: None,
            seed: None,
            kmeans_iterations: None,
        };
        if let Index::Centroid(c) = self {
            m.mode = IndexMode::Centroid;
            m.n_centroids = Some(c.n_centroids());
            m.nprobe = Some(c.nprobe);
            m.seed = Some(c.seed);
            m.kmeans_iterations = Some(c.iterations);
        }
        m
    }

    /// Writes the blobs, the document sidecar, and `index.toml` last.
    pub fn save(&self, dir: &Path) -> Result<IndexManifest> {
        std::fs::create_dir_all(dir)?;
        let docs = self.docs();
        let mats: Vec<&TokenMatrix> = docs.iter().map(|d| &d.tokens).collect();
        write_atomic(&dir.join(DOCS_FILE), &encode_embeddings(&mats)?)?;
        let meta: Vec<DocMeta> = docs
            .iter()
            .map(|d| DocMeta {
                doc_id: d.doc_id.clone(),
                text: d.text.clone(),
            })
            .collect();
        write_atomic(&dir.join(META_FILE), to_jsonl(&meta).as_bytes())?;
        if let Index::Centroid(c) = self {
            write_atomic(
                &dir.join(CENTROIDS_FILE),
                &encode_embeddings(&[&c.centroids])?,
            )?;
            write_atomic(
                &dir.join(POSTINGS_FILE),
                &encode_postings(&c.postings, docs.len())?,
            )?;
        }
        let m = self.manifest();
        let text = toml::to_string(&m).expect("index manifest serializes");
        write_atomic(&dir.join(INDEX_FILE), text.as_bytes())?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = IndexManifest::parse(&std::fs::read_to_string(dir.join(INDEX_FILE))?)?;
        let mats = decode_embeddings(&std::fs::read(dir.join(DOCS_FILE))?)?;
        let meta = parse_doc_meta(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        if mats.len() != m.doc_count || meta.len() != m.doc_count {
            return Err(Error::Format(format!(
                "index: manifest lists {} documents, found {} matrices and {} metadata lines",
                m.doc_count,
                mats.len(),
                meta.len()
            )));
        }
        let docs: Vec<DocumentRecord> = mats
            .into_iter()
            .zip(meta)
            .map(|(tokens, meta)| DocumentRecord {
                text: meta.text,
                ..DocumentRecord::new(meta.doc_id, tokens)
            })
            .collect();
        let tokens: usize = docs.iter().map(|d| d.tokens.rows()).sum();
        if tokens != m.token_count || docs.first().is_some_and(|d| d.tokens.dim() != m.dim) {
            return Err(Error::Format(
                "index: token count or width disagrees with index.toml".into(),
            ));
        }
        match m.mode {
            IndexMode::Exact => Ok(Index::Exact(ExactIndex::new(docs)?)),
            IndexMode::Centroid => {
                let mut centroids = decode_embeddings(&std::fs::read(dir.join(CENTROIDS_FILE))?)?;
                let (postings, n_docs) = decode_postings(&std::fs::read(dir.join(POSTINGS_FILE))?)?;
                let c = m.n_centroids.expect("checked by parse");
                if centroids.len() != 1 || centroids[0].rows() != c || centroids[0].dim() != m.dim {
                    return Err(Error::Format(
                        "index: centroid matrix shape disagrees with index.toml".into(),
                    ));
                }
                if postings.len() != c || n_docs != docs.len() {
                    return Err(Error::Format(
                        "index: postings shape disagrees with index.toml".into(),
                    ));
                }
                let mut seen: Vec<Vec<bool>> =
                    docs.iter().map(|d| vec![false; d.tokens.rows()]).collect();
                for p in postings.iter().flatten() {
                    let slot = seen[p.doc as usize]
                        .get_mut(p.row as usize)
                        .ok_or_else(|| {
                            Error::Format(format!("index: posting row {} out of range", p.row))
                        })?;
                    if std::mem::replace(slot, true) {
                        return Err(Error::Format(
                            "index: token assigned to two centroids".into(),
                        ));
                    }
                }
                if seen.iter().flatten().any(|s| !s) {
                    return Err(Error::Format("index: token missing from postings".into()));
                }
                let index = CentroidIndex {
                    dim: m.dim,
                    centroids: centroids.remove(0),
                    doc_lists: doc_lists(&postings),
                    postings,
                    nprobe: 1,
                    docs,
                    seed: m.seed.unwrap_or(0),
                    iterations: m.kmeans_iterations.unwrap_or(0),
                };
                Ok(Index::Centroid(
                    index.with_nprobe(m.nprobe.expect("checked by parse"))?,
                ))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_docs(
        seed: u64,
        n: usize,
        rows: std::ops::RangeInclusive<usize>,
        dim: usize,
    ) -> Vec<DocumentRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let r = rng.random_range(rows.clone());
                let data: Vec<f32> = (0..r * dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .map(|v: f64| v as f32)
                    .collect();
                DocumentRecord::new(
                    format!("doc{i:03}"),
                    TokenMatrix::new(r, dim, data).unwrap(),
                )
            })
            .collect()
    }

    fn random_query(seed: u64, rows: usize, dim: usize) -> TokenMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|v: f64| v as f32)
            .collect();
        TokenMatrix::new(rows, dim, data).unwrap()
    }

    #[test]
    fn kmeans_single_cluster_is_the_mean() {
        let pts = [0.0f32, 0.0, 2.0, 0.0, 4.0, 6.0];
        let km = kmeans(&pts, 2, 1, 1, 10).unwrap();
        assert_eq!(km.centroids, vec![2.0, 2.0]);
        assert_eq!(km.assignments, vec![0, 0, 0]);
    }

    #[test]
    fn kmeans_k_equals_m_has_zero_inertia() {
        let pts: Vec<f32> = (0..20).map(|i| (i * i) as f32 * 0.37).collect();
        let km = kmeans(&pts, 2, 10, 5, 50).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut a = km.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        assert!(matches!(
            kmeans(&[1.0, 2.0], 1, 3, 0, 5),
            Err(Error::TooFewPoints { k: 3, points: 2 })
        ));
        assert!(kmeans(&[1.0, 2.0], 1, 0, 0, 5).is_err());
        assert!(kmeans(&[1.0, 2.0, 3.0], 2, 1, 0, 5).is_err());
    }

    #[test]
    fn kmeans_duplicate_points_and_determinism() {
        let pts = vec![1.0f32; 12];
        let km = kmeans(&pts, 3, 3, 2, 10).unwrap();
        assert_eq!(km.inertia, 0.0);
        let pts: Vec<f32> = random_query(3, 50, 4).into_data();
        assert_eq!(
            kmeans(&pts, 4, 6, 9, 20).unwrap(),
            kmeans(&pts, 4, 6, 9, 20).unwrap()
        );
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut agree = 0;
        let mut total = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut pts = Vec::new();
            let mut labels = Vec::new();
            for i in 0..200 {
                let center = if i % 2 == 0 { -5.0 } else { 5.0 };
                for _ in 0..3 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    pts.push((center + n) as f32);
                }
                labels.push(i % 2);
            }
            let km = kmeans(&pts, 3, 2, seed, 50).unwrap();
            let direct = labels
                .iter()
                .zip(&km.assignments)
                .filter(|(l, a)| **l as u32 == **a)
                .count();
            agree += direct.max(labels.len() - direct);
            total += labels.len();
        }
        assert!(agree as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn exact_search_ties_and_full_ranking() {
        let t = TokenMatrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        let docs = vec![
            DocumentRecord::new("b", t.clone()),
            DocumentRecord::new("a", t.clone()),
            DocumentRecord::new("c", TokenMatrix::from_rows(&[[0.5f32, 0.0]]).unwrap()),
        ];
        let idx = ExactIndex::new(docs).unwrap();
        let hits = idx.search(&t, 10).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(hits[2].score, Score(0.5));
        assert!(idx.search(&t, 0).is_err());
        assert!(ExactIndex::new(vec![]).is_err());
    }

    #[test]
    fn centroid_full_probe_matches_exact() {
        let docs = random_docs(1, 60, 3..=9, 8);
        let exact = ExactIndex::new(docs.clone()).unwrap();
        let cidx = CentroidIndex::build(docs, 12, 4).unwrap();
        for s in 0..10 {
            let q = random_query(50 + s, 5, 8);
            assert_eq!(
                cidx.search(&q, 7, 12).unwrap(),
                exact.search(&q, 7).unwrap()
            );
        }
        assert!(cidx.search(&random_query(1, 2, 8), 3, 0).is_err());
        assert!(cidx.search(&random_query(1, 2, 8), 3, 13).is_err());
    }

    #[test]
    fn single_doc_single_centroid() {
        let docs = random_docs(2, 1, 5..=5, 4);
        let c = CentroidIndex::build(docs, 1, 0).unwrap();
        assert_eq!(c.postings().len(), 1);
        assert_eq!(c.postings()[0].len(), 5);
        let too_many = CentroidIndex::build(random_docs(2, 1, 5..=5, 4), 6, 0);
        assert!(matches!(too_many, Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn default_parameters() {
        assert_eq!(default_centroids(1000), 32);
        assert_eq!(default_centroids(1024), 32);
        assert_eq!(default_centroids(1025), 33);
        assert_eq!(default_centroids(1), 1);
        assert_eq!(default_nprobe(32), 4);
        assert_eq!(default_nprobe(5), 1);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let docs = random_docs(7, 20, 2..=6, 4);
        let c = Index::Centroid(
            CentroidIndex::build(docs.clone(), 6, 1)
                .unwrap()
                .with_nprobe(2)
                .unwrap(),
        );
        c.save(&dir.path().join("c")).unwrap();
        assert_eq!(Index::load(&dir.path().join("c")).unwrap(), c);
        let e = Index::Exact(ExactIndex::new(docs).unwrap());
        e.save(&dir.path().join("e")).unwrap();
        assert_eq!(Index::load(&dir.path().join("e")).unwrap(), e);
    }

    #[test]
    fn postings_codec_errors() {
        let p = vec![vec![Posting { doc: 0, row: 1 }], vec![]];
        let bytes = encode_postings(&p, 1).unwrap();
        assert_eq!(decode_postings(&bytes).unwrap(), (p.clone(), 1));
        assert!(matches!(
            decode_postings(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));
        let bad = encode_postings(&p, 0);
        assert!(decode_postings(&bad.unwrap()).is_err());
        let mut huge = bytes.clone();
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_postings(&huge).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn postings_conserve_tokens(seed in any::<u64>(), n in 1usize..15, c in 1usize..6) {
            let docs = random_docs(seed, n, 1..=5, 3);
            let total: usize = docs.iter().map(|d| d.tokens.rows()).sum();
            prop_assume!(c <= total);
            let idx = CentroidIndex::build(docs, c, seed).unwrap();
            prop_assert_eq!(idx.postings().iter().map(Vec::len).sum::<usize>(), total);
        }

        #[test]
        fn centroid_scores_are_exact_and_recall_grows(seed in any::<u64>()) {
            let docs = random_docs(seed, 25, 2..=6, 4);
            let exact = ExactIndex::new(docs.clone()).unwrap();
            let idx = CentroidIndex::build(docs.clone(), 8, seed).unwrap();
            let q = random_query(seed ^ 1, 3, 4);
            let truth: HashSet<String> = exact.search(&q, 5).unwrap().into_iter().map(|h| h.doc_id).collect();
            let mut prev = 0;
            for nprobe in 1..=8 {
                let hits = idx.search(&q, 5, nprobe).unwrap();
                for h in &hits {
                    let d = docs.iter().find(|d| d.doc_id == h.doc_id).unwrap();
                    prop_assert_eq!(h.score, maxsim(&q, &d.tokens).unwrap());
                }
                let found = hits.iter().filter(|h| truth.contains(&h.doc_id)).count();
                prop_assert!(found >= prev);
                prev = found;
            }
            prop_assert_eq!(prev, truth.len());
        }

        #[test]
        fn postings_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_postings(&bytes);
        }
    }
}

//! Query composition, search, retrieval probabilities and joint answer
//! selection, plus the run file that carries results between commands.
//!
//! Run file: one line per query, tab-separated.
//!
//! ```text
//! query_id  doc_ids  scores  probs  [answers_json  gen_logprobs]
//! ```
//!
//! List fields are comma-joined. Floats are written with the shortest
//! representation that parses back to the same value. The two trailing
//! columns are optional and come together: a JSON array of candidate answers
//! aligned with the documents, and their generation log-probabilities.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;

use crate::compose::{apply_roi_selection, compose_query, ComposeOptions};
use crate::error::{Error, Result};
use crate::index::Index;
use crate::metrics::AnswerEntry;
use crate::model::{normalize_answer, CandidateAnswer, EvalRecord, MappingNetwork, QueryBundle};

/// Softmax over retrieved scores, stabilized by subtracting the maximum.
pub fn retrieval_probs(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("retrieval scores"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig(format!("score {i} is not finite")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Position of the winning candidate, 0-based.
    pub index: usize,
    pub answer: String,
    /// `log p_gen + log p_ret` of the winner.
    pub joint_logprob: f64,
}

/// Picks the candidate maximizing generation log-prob plus log retrieval
/// probability. Ties go to the earlier (higher-ranked) candidate.
pub fn joint_select(candidates: &[CandidateAnswer], probs: &[f64]) -> Result<Selection> {
    if candidates.len() != probs.len() {
        return Err(Error::LengthMismatch {
            context: "candidates vs retrieval probabilities",
            left: candidates.len(),
            right: probs.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate answers"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, (c, &p)) in candidates.iter().zip(probs).enumerate() {
        if p.is_nan() || p < 0.0 || c.gen_logprob.is_nan() {
            return Err(Error::InvalidConfig(format!(
                "candidate {k} has an invalid probability"
            )));
        }
        let joint = c.gen_logprob + p.ln();
        if best.is_none_or(|(_, b)| joint > b) {
            best = Some((k, joint));
        }
    }
    let (index, joint_logprob) = best.expect("non-empty");
    Ok(Selection {
        index,
        answer: candidates[index].answer.clone(),
        joint_logprob,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    /// Descending by score; empty when a centroid probe found no candidates.
    pub entries: Vec<RankedDoc>,
    /// Aligned with `entries` when present.
    pub candidates: Option<Vec<CandidateAnswer>>,
}

impl RetrievalResult {
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn doc_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.doc_id.clone()).collect()
    }

    /// The jointly selected answer, when candidates are attached.
    pub fn selected_answer(&self) -> Result<Option<Selection>> {
        match &self.candidates {
            Some(c) if !c.is_empty() => {
                let probs: Vec<f64> = self.entries.iter().map(|e| e.prob).collect();
                joint_select(c, &probs).map(Some)
            }
            _ => Ok(None),
        }
    }
}

/// Selects regions, composes, searches and converts scores to probabilities
/// for every query. Queries run in parallel; the output keeps input order.
pub fn run_retrieval(
    queries: &[QueryBundle],
    index: &Index,
    net: Option<&MappingNetwork>,
    opts: ComposeOptions,
    k: usize,
    nprobe: Option<usize>,
) -> Result<Vec<RetrievalResult>> {
    queries
        .par_iter()
        .map(|bundle| {
            let mut bundle = bundle.clone();
            apply_roi_selection(&mut bundle, opts.n_roi);
            let q = compose_query(&bundle, net, opts)?;
            if q.dim() != index.dim() {
                return Err(Error::dim(
                    "query vs index token width",
                    index.dim(),
                    q.dim(),
                ));
            }
            let hits = index.search(&q, k, nprobe)?;
            let scores: Vec<f64> = hits.iter().map(|h| h.score.value()).collect();
            let probs = if hits.is_empty() {
                Vec::new()
            } else {
                retrieval_probs(&scores)?
            };
            Ok(RetrievalResult {
                query_id: bundle.query_id,
                entries: hits
                    .into_iter()
                    .zip(probs)
                    .map(|(h, prob)| RankedDoc {
                        doc_id: h.doc_id,
                        score: h.score.value(),
                        prob,
                    })
                    .collect(),
                candidates: None,
            })
        })
        .collect()
}

fn check_field(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r', ',']) {
        return Err(Error::Format(format!(
            "{what} {s:?} cannot be written to a run file (empty, or contains a tab, comma or newline)"
        )));
    }
    Ok(())
}

fn join_floats(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_run(results: &[RetrievalResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        check_field("query_id", &r.query_id)?;
        for e in &r.entries {
            check_field("doc_id", &e.doc_id)?;
        }
        let ids: Vec<&str> = r.entries.iter().map(|e| e.doc_id.as_str()).collect();
        out.push_str(&r.query_id);
        out.push('\t');
        out.push_str(&ids.join(","));
        out.push('\t');
        out.push_str(&join_floats(r.entries.iter().map(|e| e.score)));
        out.push('\t');
        out.push_str(&join_floats(r.entries.iter().map(|e| e.prob)));
        if let Some(c) = &r.candidates {
            if c.len() != r.entries.len() {
                return Err(Error::LengthMismatch {
                    context: "run file candidates vs documents",
                    left: c.len(),
                    right: r.entries.len(),
                });
            }
            let answers: Vec<&str> = c.iter().map(|c| c.answer.as_str()).collect();
            out.push('\t');
            out.push_str(&serde_json::to_string(&answers).expect("strings serialize"));
            out.push('\t');
            out.push_str(&join_floats(c.iter().map(|c| c.gen_logprob)));
        }
        out.push('\n');
    }
    Ok(out)
}

fn split_list(field: &str) -> Vec<&str> {
    if field.is_empty() {
        Vec::new()
    } else {
        field.split(',').collect()
    }
}

fn parse_floats(line: usize, what: &str, field: &str, finite: bool) -> Result<Vec<f64>> {
    split_list(field)
        .into_iter()
        .map(|s| {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::parse(line, format!("{what}: {s:?} is not a number")))?;
            if finite && !v.is_finite() {
                return Err(Error::parse(line, format!("{what}: {s:?} is not finite")));
            }
            Ok(v)
        })
        .collect()
}

pub fn parse_run(text: &str) -> Result<Vec<RetrievalResult>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 && fields.len() != 6 {
            return Err(Error::parse(
                line,
                format!("expected 4 or 6 tab-separated fields, got {}", fields.len()),
            ));
        }
        let query_id = fields[0];
        if query_id.is_empty() {
            return Err(Error::parse(line, "empty query_id"));
        }
        if !seen.insert(query_id.to_string()) {
            return Err(Error::parse(
                line,
                format!("duplicate query_id {query_id:?}"),
            ));
        }
        let ids = split_list(fields[1]);
        if ids.iter().any(|d| d.is_empty()) {
            return Err(Error::parse(line, "empty doc_id"));
        }
        let scores = parse_floats(line, "scores", fields[2], true)?;
        let probs = parse_floats(line, "probs", fields[3], true)?;
        if scores.len() != ids.len() || probs.len() != ids.len() {
            return Err(Error::parse(
                line,
                "doc_ids, scores and probs differ in length",
            ));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::parse(line, "probability outside [0, 1]"));
        }
        let candidates = if fields.len() == 6 {
            let answers: Vec<String> = serde_json::from_str(fields[4])
                .map_err(|e| Error::parse(line, format!("candidate answers: {e}")))?;
            let logprobs = parse_floats(line, "gen_logprobs", fields[5], false)?;
            if answers.len() != ids.len() || logprobs.len() != ids.len() {
                return Err(Error::parse(
                    line,
                    "candidate columns differ in length from doc_ids",
                ));
            }
            if logprobs.iter().any(|l| l.is_nan() || *l > 0.0) {
                return Err(Error::parse(
                    line,
                    "gen_logprobs must be log-probabilities (<= 0)",
                ));
            }
            Some(
                answers
                    .into_iter()
                    .zip(logprobs)
                    .map(|(answer, gen_logprob)| CandidateAnswer {
                        answer,
                        gen_logprob,
                    })
                    .collect(),
            )
        } else {
            None
        };
        out.push(RetrievalResult {
            query_id: query_id.to_string(),
            entries: ids
                .into_iter()
                .zip(scores.into_iter().zip(probs))
                .map(|(d, (score, prob))| RankedDoc {
                    doc_id: d.to_string(),
                    score,
                    prob,
                })
                .collect(),
            candidates,
        });
    }
    Ok(out)
}

/// Mean score of the top-ranked document over queries that retrieved anything.
pub fn mean_top1(results: &[RetrievalResult]) -> Option<f64> {
    let tops: Vec<f64> = results
        .iter()
        .filter_map(|r| r.entries.first().map(|e| e.score))
        .collect();
    (!tops.is_empty()).then(|| tops.iter().sum::<f64>() / tops.len() as f64)
}

fn preview(ids: &[&str]) -> String {
    let shown: Vec<&str> = ids.iter().take(10).copied().collect();
    let more = ids.len().saturating_sub(shown.len());
    match more {
        0 => shown.join(", "),
        n => format!("{} and {n} more", shown.join(", ")),
    }
}

/// Pairs run lines with answer entries by question id. Every id must appear
/// on both sides. The final answer is the joint selection when the run line
/// carries candidates, else the entry's `generated` answer.
pub fn join_run_answers(
    results: &[RetrievalResult],
    answers: &[AnswerEntry],
) -> Result<Vec<EvalRecord>> {
    let by_id: HashMap<&str, &AnswerEntry> = answers
        .iter()
        .map(|a| (a.question_id.as_str(), a))
        .collect();
    let run_ids: BTreeSet<&str> = results.iter().map(|r| r.query_id.as_str()).collect();
    let only_run: Vec<&str> = run_ids
        .iter()
        .copied()
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let mut only_answers: Vec<&str> = by_id
        .keys()
        .copied()
        .filter(|id| !run_ids.contains(id))
        .collect();
    only_answers.sort_unstable();
    if !only_run.is_empty() || !only_answers.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "question ids differ between run and answers: {} only in run [{}], {} only in answers [{}]",
            only_run.len(),
            preview(&only_run),
            only_answers.len(),
            preview(&only_answers)
        )));
    }
    results
        .iter()
        .map(|r| {
            let a = by_id[r.query_id.as_str()];
            let mut rec = EvalRecord::new(&r.query_id, &a.answers);
            rec.retrieved_doc_ids = r.doc_ids();
            rec.candidate_answers = r.candidates.clone();
            rec.generated_answer = match r.selected_answer()? {
                Some(sel) => Some(normalize_answer(&sel.answer)),
                None => a.generated.as_deref().map(normalize_answer),
            };
            rec.no_knowledge_answer = a.no_knowledge.as_deref().map(normalize_answer);
            Ok(rec)
        })
        .collect()
}

//! Answer and retrieval metrics: VQA score, exact match, pseudo-relevance
//! recall at K, and hit success rate.
//!
//! Every comparison runs on [`normalize_answer`]ed strings. Answer lists are
//! multisets, so repeated annotations count once per occurrence.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_answer, EvalRecord};
use crate::store::corpus::{parse_jsonl, to_jsonl};

/// How an answer string has to appear in a document to count as a hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    /// Plain substring containment: "scar" hits "oscar".
    #[default]
    Substring,
    /// The match must not be flanked by alphanumeric characters.
    WordBoundary,
}

impl std::str::FromStr for MatchPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "substring" => Ok(MatchPolicy::Substring),
            "word" | "word_boundary" | "word-boundary" => Ok(MatchPolicy::WordBoundary),
            other => Err(Error::InvalidConfig(format!(
                "unknown match policy {other:?}"
            ))),
        }
    }
}

fn occurrences(y: &str, answers: &[String]) -> usize {
    let y = normalize_answer(y);
    answers.iter().filter(|a| normalize_answer(a) == y).count()
}

/// `min(count / 3, 1)`. An empty answer list scores 0.
pub fn vqa_score(y: &str, answers: &[String]) -> f64 {
    (occurrences(y, answers) as f64 / 3.0).min(1.0)
}

pub fn exact_match(y: &str, answers: &[String]) -> f64 {
    if occurrences(y, answers) > 0 {
        1.0
    } else {
        0.0
    }
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    haystack.match_indices(needle).any(|(start, m)| {
        let before = haystack[..start].chars().next_back();
        let after = haystack[start + m.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Whether the document text contains any (non-empty) normalized answer.
pub fn doc_hit(doc_text: &str, answers: &[String], policy: MatchPolicy) -> bool {
    let text = normalize_answer(doc_text);
    answers
        .iter()
        .map(|a| normalize_answer(a))
        .filter(|a| !a.is_empty())
        .any(|a| match policy {
            MatchPolicy::Substring => text.contains(&a),
            MatchPolicy::WordBoundary => contains_word(&text, &a),
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallAtK {
    pub value: f64,
    /// Fewer than K documents were retrieved; the value covers what exists.
    pub truncated: bool,
}

pub fn pr_recall_at_k<S: AsRef<str>>(
    retrieved_texts: &[S],
    answers: &[String],
    k: usize,
    policy: MatchPolicy,
) -> Result<RecallAtK> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let hit = retrieved_texts
        .iter()
        .take(k)
        .any(|t| doc_hit(t.as_ref(), answers, policy));
    Ok(RecallAtK {
        value: if hit { 1.0 } else { 0.0 },
        truncated: retrieved_texts.len() < k,
    })
}

/// 1 when the answer with retrieval is correct and the one without is not.
/// `None` when the no-knowledge answer is missing.
pub fn hit_success_rate(y: &str, y_no_knowledge: Option<&str>, answers: &[String]) -> Option<f64> {
    let nk = y_no_knowledge?;
    let hit = exact_match(y, answers) == 1.0 && exact_match(nk, answers) == 0.0;
    Some(if hit { 1.0 } else { 0.0 })
}

/// One line of an answers file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerEntry {
    pub question_id: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_knowledge: Option<String>,
}

/// Parses JSONL answers. Every entry needs a non-empty answer list and a unique id.
pub fn parse_answers(text: &str) -> Result<Vec<AnswerEntry>> {
    let entries: Vec<AnswerEntry> = parse_jsonl(text)?;
    let mut seen = HashSet::new();
    for e in &entries {
        if e.answers.is_empty() {
            return Err(Error::Format(format!(
                "question {:?} has no answers",
                e.question_id
            )));
        }
        if !seen.insert(e.question_id.as_str()) {
            return Err(Error::Format(format!(
                "duplicate question_id {:?}",
                e.question_id
            )));
        }
    }
    Ok(entries)
}

pub fn write_answers(entries: &[AnswerEntry]) -> String {
    to_jsonl(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuestionMetrics {
    pub question_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vqa_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
    /// Aligned with [`MetricReport::ks`]; empty when no document texts were given.
    pub pr_recall: Vec<f64>,
    pub truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hsr: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReportCounts {
    pub questions: usize,
    /// Questions with a final answer, i.e. those in the VQA score and EM means.
    pub answered: usize,
    pub hsr_counted: usize,
    pub hsr_excluded: usize,
    /// Questions with fewer retrieved documents than the largest K.
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub policy: MatchPolicy,
    pub ks: Vec<usize>,
    pub vqa_score: Option<f64>,
    pub em: Option<f64>,
    /// Means aligned with `ks`; empty when recall was not computed.
    pub pr_recall: Vec<f64>,
    pub hsr: Option<f64>,
    pub counts: ReportCounts,
    pub questions: Vec<QuestionMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Short human-readable summary, one metric per line.
    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        for (k, v) in self.ks.iter().zip(&self.pr_recall) {
            out.push_str(&format!("PRRecall@{k}\t{v:.4}\n"));
        }
        out.push_str(&format!("VQA Score\t{}\n", fmt(self.vqa_score)));
        out.push_str(&format!("EM\t{}\n", fmt(self.em)));
        out.push_str(&format!("HSR\t{}\n", fmt(self.hsr)));
        out.push_str(&format!(
            "questions\t{} (answered {}, hsr {}, truncated {})\n",
            self.counts.questions,
            self.counts.answered,
            self.counts.hsr_counted,
            self.counts.truncated
        ));
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores every record. The final answer of a record is its `generated_answer`;
/// records without one are left out of the VQA score and EM means.
/// Recall is computed only when `doc_texts` is given, and every retrieved id
/// must then be present in it.
pub fn evaluate(
    records: &[EvalRecord],
    doc_texts: Option<&HashMap<String, String>>,
    ks: &[usize],
    policy: MatchPolicy,
) -> Result<MetricReport> {
    if ks.contains(&0) {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut counts = ReportCounts {
        questions: records.len(),
        ..ReportCounts::default()
    };
    let mut questions = Vec::with_capacity(records.len());
    for r in records {
        if r.answers.is_empty() {
            return Err(Error::Format(format!(
                "question {:?} has no answers",
                r.question_id
            )));
        }
        let answer = r.generated_answer.clone();
        let vqa = answer.as_deref().map(|y| vqa_score(y, &r.answers));
        let em = answer.as_deref().map(|y| exact_match(y, &r.answers));
        let hsr = answer
            .as_deref()
            .and_then(|y| hit_success_rate(y, r.no_knowledge_answer.as_deref(), &r.answers));
        let mut pr_recall = Vec::new();
        let mut truncated = false;
        if let Some(texts) = doc_texts {
            let retrieved = r
                .retrieved_doc_ids
                .iter()
                .take(max_k)
                .map(|id| {
                    texts.get(id).map(String::as_str).ok_or_else(|| {
                        Error::Format(format!("retrieved document {id:?} has no text"))
                    })
                })
                .collect::<Result<Vec<&str>>>()?;
            for &k in ks {
                let rk = pr_recall_at_k(&retrieved, &r.answers, k, policy)?;
                truncated |= rk.truncated;
                pr_recall.push(rk.value);
            }
        }
        counts.answered += usize::from(answer.is_some());
        counts.truncated += usize::from(truncated);
        match hsr {
            Some(_) => counts.hsr_counted += 1,
            None => counts.hsr_excluded += 1,
        }
        questions.push(QuestionMetrics {
            question_id: r.question_id.clone(),
            answer,
            vqa_score: vqa,
            em,
            pr_recall,
            truncated,
            hsr,
        });
    }
    let pr_recall = match doc_texts {
        Some(_) if !questions.is_empty() => (0..ks.len())
            .map(|i| mean(questions.iter().map(|q| q.pr_recall[i])).unwrap_or(0.0))
            .collect(),
        _ => Vec::new(),
    };
    Ok(MetricReport {
        policy,
        ks: ks.to_vec(),
        vqa_score: mean(questions.iter().filter_map(|q| q.vqa_score)),
        em: mean(questions.iter().filter_map(|q| q.em)),
        pr_recall,
        hsr: mean(questions.iter().filter_map(|q| q.hsr)),
        counts,
        questions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(items: &[&str]) -> Vec<String> {
        items.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn vqa_score_cases() {
        let answers = s(&["dog", "dog", "dog", "dog", "cat", "puppy"]);
        assert_eq!(vqa_score("dog", &answers), 1.0);
        assert_eq!(vqa_score("cat", &answers), 1.0 / 3.0);
        assert_eq!(vqa_score("horse", &answers), 0.0);
        assert_eq!(vqa_score(" Dog ", &answers), 1.0);
        assert_eq!(vqa_score("x", &[]), 0.0);
        assert_eq!(vqa_score("cat", &s(&["cat", "cat"])), 2.0 / 3.0);
    }

    #[test]
    fn exact_match_cases() {
        let answers = s(&["red", "blue"]);
        assert_eq!(exact_match("RED", &answers), 1.0);
        assert_eq!(exact_match("green", &answers), 0.0);
    }

    #[test]
    fn doc_hit_cases() {
        assert!(doc_hit(
            "cats sleep 16 hours",
            &s(&["16 hours"]),
            MatchPolicy::Substring
        ));
        assert!(!doc_hit(
            "cats sleep a lot",
            &s(&["16 hours"]),
            MatchPolicy::Substring
        ));
        assert!(doc_hit("Oscar", &s(&["scar"]), MatchPolicy::Substring));
        assert!(!doc_hit("Oscar", &s(&["scar"]), MatchPolicy::WordBoundary));
        assert!(doc_hit(
            "a scar, healed",
            &s(&["scar"]),
            MatchPolicy::WordBoundary
        ));
        assert!(doc_hit(
            "oscar scar",
            &s(&["scar"]),
            MatchPolicy::WordBoundary
        ));
        assert!(!doc_hit(
            "anything",
            &s(&["", "  "]),
            MatchPolicy::Substring
        ));
    }

    #[test]
    fn pr_recall_cases() {
        let docs = ["a", "b", "the answer is 42", "c", "d"];
        let answers = s(&["42"]);
        let r = pr_recall_at_k(&docs, &answers, 5, MatchPolicy::Substring).unwrap();
        assert_eq!(
            r,
            RecallAtK {
                value: 1.0,
                truncated: false
            }
        );
        assert_eq!(
            pr_recall_at_k(&docs, &answers, 2, MatchPolicy::Substring)
                .unwrap()
                .value,
            0.0
        );
        let short = pr_recall_at_k(&docs[..3], &answers, 10, MatchPolicy::Substring).unwrap();
        assert_eq!(
            short,
            RecallAtK {
                value: 1.0,
                truncated: true
            }
        );
        assert!(pr_recall_at_k(&docs, &answers, 0, MatchPolicy::Substring).is_err());
    }

    #[test]
    fn hsr_cases() {
        let answers = s(&["paris"]);
        assert_eq!(hit_success_rate("paris", Some("lyon"), &answers), Some(1.0));
        assert_eq!(
            hit_success_rate("paris", Some("Paris"), &answers),
            Some(0.0)
        );
        assert_eq!(hit_success_rate("rome", Some("lyon"), &answers), Some(0.0));
        assert_eq!(hit_success_rate("paris", None, &answers), None);
    }

    #[test]
    fn answers_file_roundtrip_and_errors() {
        let entries = vec![
            AnswerEntry {
                question_id: "q1".into(),
                answers: s(&["a", "a", "b"]),
                generated: Some("a".into()),
                no_knowledge: None,
            },
            AnswerEntry {
                question_id: "q2".into(),
                answers: s(&["c"]),
                generated: None,
                no_knowledge: Some("d".into()),
            },
        ];
        let text = write_answers(&entries);
        assert_eq!(parse_answers(&text).unwrap(), entries);
        assert!(parse_answers("{\"question_id\":\"q\",\"answers\":[]}").is_err());
        let dup = "{\"question_id\":\"q\",\"answers\":[\"a\"]}\n{\"question_id\":\"q\",\"answers\":[\"b\"]}";
        assert!(parse_answers(dup).is_err());
        let err = parse_answers("\n{\"question_id\":1}").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn evaluate_means_and_counts() {
        let mut a = EvalRecord::new("q1", &["dog", "dog", "dog"]);
        a.generated_answer = Some("dog".into());
        a.no_knowledge_answer = Some("cat".into());
        a.retrieved_doc_ids = vec!["d1".into(), "d2".into()];
        let mut b = EvalRecord::new("q2", &["blue"]);
        b.generated_answer = Some("red".into());
        b.retrieved_doc_ids = vec!["d2".into(), "d1".into()];
        let texts: HashMap<String, String> = [("d1", "a dog barks"), ("d2", "the sky is blue")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let rep = evaluate(&[a, b], Some(&texts), &[1, 5], MatchPolicy::Substring).unwrap();
        assert_eq!(rep.vqa_score, Some(0.5));
        assert_eq!(rep.em, Some(0.5));
        assert_eq!(rep.pr_recall, vec![1.0, 1.0]);
        assert_eq!(rep.hsr, Some(1.0));
        assert_eq!(rep.counts.hsr_excluded, 1);
        assert_eq!(rep.counts.truncated, 2);
        assert!(rep.summary().contains("PRRecall@5\t1.0000"));

        let missing = EvalRecord {
            retrieved_doc_ids: vec!["nope".into()],
            ..EvalRecord::new("q3", &["x"])
        };
        assert!(evaluate(&[missing], Some(&texts), &[1], MatchPolicy::Substring).is_err());
    }

    fn answer_strategy() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["a", "b", "c", "a b", "B", " c "]).prop_map(String::from)
    }

    proptest! {
        #[test]
        fn vqa_bounded_by_em(y in answer_strategy(), answers in prop::collection::vec(answer_strategy(), 1..12)) {
            let v = vqa_score(&y, &answers);
            let e = exact_match(&y, &answers);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v <= e && e <= 1.0);
        }

        #[test]
        fn metrics_ignore_answer_order(
            y in answer_strategy(),
            mut answers in prop::collection::vec(answer_strategy(), 1..12),
            text in "[a-c ]{0,12}",
            seed in any::<u64>(),
        ) {
            let before = (vqa_score(&y, &answers), exact_match(&y, &answers), doc_hit(&text, &answers, MatchPolicy::Substring));
            let n = answers.len();
            answers.rotate_left((seed % n as u64) as usize);
            answers.reverse();
            let after = (vqa_score(&y, &answers), exact_match(&y, &answers), doc_hit(&text, &answers, MatchPolicy::Substring));
            prop_assert_eq!(before, after);
        }

        #[test]
        fn recall_monotone_in_k(texts in prop::collection::vec("[a-d ]{0,8}", 0..12), answers in prop::collection::vec(answer_strategy(), 1..4)) {
            let mut prev = 0.0;
            for k in 1..=13 {
                let v = pr_recall_at_k(&texts, &answers, k, MatchPolicy::Substring).unwrap().value;
                prop_assert!(v >= prev);
                prev = v;
            }
        }

        #[test]
        fn word_boundary_implies_substring(text in "[a-c ,]{0,16}", answers in prop::collection::vec(answer_strategy(), 1..4)) {
            if doc_hit(&text, &answers, MatchPolicy::WordBoundary) {
                prop_assert!(doc_hit(&text, &answers, MatchPolicy::Substring));
            }
        }
    }
}

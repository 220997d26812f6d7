//! Automatic metrics for generated questions: BLEU-1/4, ROUGE-L and a base
//! METEOR (exact and stem matches only, no synonym table).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::tokenize;
use crate::error::{Error, Result};

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

pub const METEOR_NOTE: &str = "meteor: exact + stem matching, no synonym matching";

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Cumulative BLEU up to order `n` with uniform weights.
///
/// N-gram counts are clipped by the maximum count in any reference. An order
/// above 1 with no matches uses the add-one estimate `1 / (total + 1)`. The
/// brevity penalty uses the reference length closest to the candidate
/// (shorter wins ties).
pub fn bleu(candidate: &[String], references: &[Vec<String>], n: usize) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::invalid("BLEU needs at least one reference"));
    }
    if candidate.is_empty() || n == 0 {
        return Err(Error::invalid("BLEU needs a non-empty candidate and order >= 1"));
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand = ngrams(candidate, k);
        let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in references {
            for (g, c) in ngrams(r, k) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total: usize = cand.values().sum();
        let clipped: usize = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if clipped > 0 {
            clipped as f64 / total as f64
        } else if k == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln() / n as f64;
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_sum.exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure `(1 + β²)PR / (R + β²P)` with `β = 1.2`.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

const SUFFIXES: &[&str] = &[
    "ations", "ation", "ness", "ment", "ings", "ing", "ies", "ied", "ers", "est", "ed", "er", "ly", "es", "s",
];

/// Light suffix-stripping stemmer: removes the longest listed suffix that
/// leaves a stem of at least three characters.
pub fn stem(word: &str) -> String {
    for suf in SUFFIXES {
        if let Some(base) = word.strip_suffix(suf) {
            if base.chars().count() >= 3 {
                return match *suf {
                    "ies" | "ied" => format!("{base}y"),
                    _ => base.to_string(),
                };
            }
        }
    }
    word.to_string()
}

/// Candidate-to-reference alignment: exact matches first, then stem matches
/// among what is left. Each candidate token, in order, takes the unmatched
/// reference position that continues the previous alignment if possible,
/// else the earliest one.
fn align(candidate: &[String], reference: &[String]) -> Vec<Option<usize>> {
    let mut cand_to_ref: Vec<Option<usize>> = vec![None; candidate.len()];
    let mut used = vec![false; reference.len()];
    let stems_c: Vec<String> = candidate.iter().map(|w| stem(w)).collect();
    let stems_r: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    for stage in 0..2 {
        let mut last: Option<usize> = None;
        for i in 0..candidate.len() {
            if let Some(j) = cand_to_ref[i] {
                last = Some(j);
                continue;
            }
            let matches = |j: usize| {
                !used[j]
                    && if stage == 0 {
                        candidate[i] == reference[j]
                    } else {
                        stems_c[i] == stems_r[j]
                    }
            };
            let next = last.map(|l| l + 1).filter(|&j| j < reference.len() && matches(j));
            if let Some(j) = next.or_else(|| (0..reference.len()).find(|&j| matches(j))) {
                cand_to_ref[i] = Some(j);
                used[j] = true;
                last = Some(j);
            }
        }
    }
    cand_to_ref
}

/// Base METEOR: `F = 10PR / (R + 9P)` times `1 - 0.5·(chunks/matches)³`.
pub fn meteor_base(candidate: &[String], reference: &[String]) -> f64 {
    let alignment = align(candidate, reference);
    let matched: Vec<usize> = alignment.iter().flatten().copied().collect();
    let m = matched.len();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<Option<usize>> = None;
    for a in &alignment {
        match (prev, a) {
            (Some(Some(p)), Some(j)) if *j == p + 1 => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = Some(*a);
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub key: String,
    pub bleu1: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: Option<String>,
    pub note: String,
    pub counts: BTreeMap<String, u64>,
    pub means: BTreeMap<String, f64>,
    pub examples: Vec<ExampleScores>,
}

impl MetricReport {
    pub fn mean(&self, metric: &str) -> f64 {
        self.means.get(metric).copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Scores aligned predictions against (possibly several) references each.
pub fn score_pairs(pairs: &[(String, Vec<String>, Vec<Vec<String>>)]) -> Result<MetricReport> {
    let examples = pairs
        .iter()
        .map(|(key, pred, refs)| {
            if pred.is_empty() {
                return Ok(ExampleScores {
                    key: key.clone(),
                    bleu1: 0.0,
                    bleu4: 0.0,
                    meteor: 0.0,
                    rouge_l: 0.0,
                });
            }
            let best = |f: &dyn Fn(&[String]) -> f64| refs.iter().map(|r| f(r)).fold(0.0, f64::max);
            Ok(ExampleScores {
                key: key.clone(),
                bleu1: bleu(pred, refs, 1)?,
                bleu4: bleu(pred, refs, 4)?,
                meteor: best(&|r| meteor_base(pred, r)),
                rouge_l: best(&|r| rouge_l(pred, r)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = examples.len().max(1) as f64;
    let mut means = BTreeMap::new();
    means.insert("bleu1".into(), examples.iter().map(|e| e.bleu1).sum::<f64>() / n);
    means.insert("bleu4".into(), examples.iter().map(|e| e.bleu4).sum::<f64>() / n);
    means.insert("meteor".into(), examples.iter().map(|e| e.meteor).sum::<f64>() / n);
    means.insert("rouge_l".into(), examples.iter().map(|e| e.rouge_l).sum::<f64>() / n);
    let mut counts = BTreeMap::new();
    counts.insert("examples".into(), examples.len() as u64);
    counts.insert("references".into(), pairs.iter().map(|p| p.2.len() as u64).sum());
    Ok(MetricReport {
        config_hash: None,
        note: METEOR_NOTE.into(),
        counts,
        means,
        examples,
    })
}

/// Alignment key of a prediction or reference record: the question id when
/// present, otherwise the source review sentence.
fn record_key(v: &Value) -> Option<String> {
    let pid = v.get("product_id")?.as_str()?;
    if let Some(q) = v.get("question_id").and_then(Value::as_str) {
        return Some(format!("{pid}|{q}"));
    }
    let rid = v.get("review_id")?.as_str()?;
    let idx = v.get("sent_idx")?.as_u64()?;
    Some(format!("{pid}|{rid}#{idx}"))
}

fn record_text(v: &Value) -> Option<&str> {
    v.get("generated_question")
        .or_else(|| v.get("question"))
        .and_then(Value::as_str)
}

fn read_records(path: &Path) -> Result<BTreeMap<String, Vec<Vec<String>>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: &str| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.into(),
        };
        let v: Value = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
        let key = record_key(&v).ok_or_else(|| bad("record lacks a product_id plus question_id or review_id/sent_idx"))?;
        let q = record_text(&v).ok_or_else(|| bad("record lacks a question"))?;
        out.entry(key).or_default().push(tokenize(q));
    }
    Ok(out)
}

/// Evaluates a prediction file against a reference file. Both are
/// line-delimited records; keys must match exactly.
pub fn evaluate(pred_path: &Path, ref_path: &Path) -> Result<MetricReport> {
    let preds = read_records(pred_path)?;
    let refs = read_records(ref_path)?;
    let pk: BTreeSet<&String> = preds.keys().collect();
    let rk: BTreeSet<&String> = refs.keys().collect();
    if pk != rk {
        let mut offending: Vec<String> = pk.symmetric_difference(&rk).map(|k| k.to_string()).collect();
        let total = offending.len();
        offending.truncate(10);
        let what = if pk.is_disjoint(&rk) { "no keys in common" } else { "key sets differ" };
        return Err(Error::Alignment(format!(
            "{what}; {total} unmatched keys, e.g. {}",
            offending.join(", ")
        )));
    }
    let pairs: Vec<_> = preds
        .into_iter()
        .map(|(k, mut p)| {
            let r = refs[&k].clone();
            (k, p.swap_remove(0), r)
        })
        .collect();
    score_pairs(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_cases() {
        let x = t("how long does the battery last");
        assert_eq!(bleu(&x, &[x.clone()], 1).unwrap(), 1.0);
        assert!((bleu(&x, &[x.clone()], 4).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu(&t("a b"), &[t("c d")], 1).unwrap(), 0.0);
        let b1 = bleu(&t("how long does battery last"), &[x.clone()], 1).unwrap();
        assert!((b1 - (-0.2f64).exp()).abs() < 1e-12);
        assert!((b1 - 0.8187).abs() < 1e-4);
        assert!(bleu(&x, &[], 1).is_err());
    }

    #[test]
    fn bleu_clips_and_smooths() {
        // "the the the" vs "the cat": clipped unigram precision 1/3.
        let b = bleu(&t("the the the"), &[t("the cat")], 1).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
        // No bigram matches: add-one estimate 1/(2+1).
        let b = bleu(&t("a b c"), &[t("c b a")], 2).unwrap();
        assert!((b - (1.0f64 * (1.0 / 3.0)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&t("a b c"), &t("a b c")), 1.0);
        assert_eq!(rouge_l(&t("a b"), &t("c d")), 0.0);
        let expected = 2.44 * 0.75 / (1.0 + 1.44 * 0.75);
        assert!((rouge_l(&t("a b c d"), &t("a c d")) - expected).abs() < 1e-12);
        assert!((expected - 0.8798).abs() < 1e-4);
    }

    #[test]
    fn meteor_cases() {
        // Identical: P = R = 1, one chunk of 3 matches.
        let s = meteor_base(&t("a b c"), &t("a b c"));
        assert!((s - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
        assert_eq!(meteor_base(&t("a b"), &t("c d")), 0.0);
        // One match of two each: F = 10·(1/4)/(1/2 + 9/2) = 0.5, penalty 0.5.
        assert!((meteor_base(&t("a x"), &t("a y")) - 0.25).abs() < 1e-12);
        // Stem match counts.
        assert!((meteor_base(&t("fits"), &t("fit")) - 0.5).abs() < 1e-12);
        // Swapped halves: two chunks.
        let s = meteor_base(&t("c d a b"), &t("a b c d"));
        assert!((s - (1.0 - 0.5 * (2.0f64 / 4.0).powi(3))).abs() < 1e-12);
    }

    #[test]
    fn stemmer() {
        assert_eq!(stem("batteries"), "battery");
        assert_eq!(stem("charging"), "charg");
        assert_eq!(stem("charged"), "charg");
        assert_eq!(stem("is"), "is");
        assert_eq!(stem("cases"), "cas");
    }

    fn write(dir: &Path, name: &str, lines: &[&str]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn evaluate_files() {
        let dir = tempfile::tempdir().unwrap();
        let refs = write(
            dir.path(),
            "ref.jsonl",
            &[
                r#"{"product_id":"p","review_id":"r","sent_idx":0,"question":"does it fit"}"#,
                r#"{"product_id":"p","review_id":"r","sent_idx":1,"question":"is it red"}"#,
                r#"{"product_id":"q","review_id":"s","sent_idx":0,"question":"how long does the battery last"}"#,
            ],
        );
        let same = evaluate(&refs, &refs).unwrap();
        assert_eq!(same.mean("bleu1"), 1.0);
        assert_eq!(same.mean("rouge_l"), 1.0);

        let preds = write(
            dir.path(),
            "pred.jsonl",
            &[
                r#"{"product_id":"p","review_id":"r","sent_idx":0,"review_sentence":"x","generated_question":"does it fit","score":-1.0}"#,
                r#"{"product_id":"p","review_id":"r","sent_idx":1,"review_sentence":"x","generated_question":"blue","score":-1.0}"#,
                r#"{"product_id":"q","review_id":"s","sent_idx":0,"review_sentence":"x","generated_question":"how long does battery last","score":-1.0}"#,
            ],
        );
        let report = evaluate(&preds, &refs).unwrap();
        let expected = (1.0 + 0.0 + (-0.2f64).exp()) / 3.0;
        assert!((report.mean("bleu1") - expected).abs() < 1e-12);
        assert_eq!(report.counts["examples"], 3);

        let other = write(
            dir.path(),
            "other.jsonl",
            &[r#"{"product_id":"z","review_id":"r","sent_idx":0,"question":"x"}"#],
        );
        let err = evaluate(&other, &refs).unwrap_err().to_string();
        assert!(err.contains("no keys in common") && err.contains("z|r#0"), "{err}");
    }

    fn brute_lcs(a: &[String], b: &[String]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
            let mut it = b.iter();
            if sub.iter().all(|s| it.any(|x| x == *s)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(prop_oneof!["a", "b", "c", "d"].prop_map(String::from), 1..=8)
    }

    proptest! {
        #[test]
        fn lcs_matches_enumeration(a in words(), b in words()) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn self_scores_are_one_and_all_in_range(a in words(), b in words(), c in words()) {
            prop_assert!((bleu(&a, &[a.clone()], 4).unwrap() - 1.0).abs() < 1e-12);
            prop_assert_eq!(rouge_l(&a, &a), 1.0);
            for s in [bleu(&a, &[b.clone()], 1).unwrap(), bleu(&a, &[b.clone()], 4).unwrap(), rouge_l(&a, &b), meteor_base(&a, &b)] {
                prop_assert!((0.0..=1.0).contains(&s));
            }
            let fwd = bleu(&a, &[b.clone(), c.clone()], 4).unwrap();
            let rev = bleu(&a, &[c, b], 4).unwrap();
            prop_assert_eq!(fwd, rev);
        }
    }
}

//! Corpus ingestion: QA pairs and review sentences read from line-delimited
//! JSON, tokenized, annotated with POS/BIO features, plus the vocabulary and
//! frozen embedding table built over them.

mod annotate;
mod embeddings;
mod tokenize;
mod vocab;

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

pub use annotate::{Annotator, Bio, LexiconAnnotator, PosTag};
pub use embeddings::{EmbeddingTable, RANDOM_INIT_SCALE};
pub use tokenize::{lowercase, split_sentences, split_tokens, tokenize};
pub use vocab::{TokenId, Vocab, BOS, EOS, PAD, UNK};

use crate::archive::{Archive, ArchiveWriter};
use crate::config::RunConfig;
use crate::error::{Error, Result};

/// One user-posed question with its answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub product_id: String,
    pub question_id: String,
    pub q_tokens: Vec<String>,
    pub a_tokens: Vec<String>,
    /// Answer features, used when the answer stands in for a review.
    pub a_pos: Vec<PosTag>,
    pub a_ner: Vec<Bio>,
}

/// One tokenized review sentence with its linguistic features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSentence {
    pub product_id: String,
    pub review_id: String,
    pub sent_idx: usize,
    pub tokens: Vec<String>,
    pub pos_tags: Vec<PosTag>,
    pub ner_bio: Vec<Bio>,
}

impl ReviewSentence {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Length limits applied at ingestion time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_q_len: usize,
    pub max_review_len: usize,
}

impl From<&RunConfig> for Limits {
    fn from(c: &RunConfig) -> Self {
        Limits {
            max_q_len: c.max_q_len,
            max_review_len: c.max_review_len,
        }
    }
}

impl Default for Limits {
    fn default() -> Self {
        (&RunConfig::default()).into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested<T> {
    pub records: Vec<T>,
    pub skipped: usize,
}

impl<T> Default for Ingested<T> {
    fn default() -> Self {
        Ingested {
            records: Vec::new(),
            skipped: 0,
        }
    }
}

#[derive(Deserialize)]
struct QaRecord {
    product_id: String,
    question: String,
    answer: String,
    #[serde(default)]
    question_id: Option<String>,
}

#[derive(Deserialize)]
struct ReviewRecord {
    product_id: String,
    review_id: String,
    text: String,
}

fn for_each_line(path: &Path, mut f: impl FnMut(usize, &str)) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        f(i + 1, &line);
    }
    Ok(())
}

fn annotate_lower(
    annotator: &dyn Annotator,
    raw: &[String],
) -> Result<(Vec<String>, Vec<PosTag>, Vec<Bio>)> {
    let (pos, bio) = annotator.annotate(raw)?;
    Ok((lowercase(raw), pos, bio))
}

/// Reads QA records `{product_id, question, answer[, question_id]}`.
/// Malformed lines, empty fields and duplicate ids are skipped with a warning.
pub fn ingest_qa(path: &Path, annotator: &dyn Annotator, limits: Limits) -> Result<Ingested<QAPair>> {
    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    let mut failure = None;
    for_each_line(path, |lineno, line| {
        if failure.is_some() {
            return;
        }
        let rec: QaRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                warn!("{}:{lineno}: skipping malformed QA record: {e}", path.display());
                out.skipped += 1;
                return;
            }
        };
        let q_raw = split_tokens(&rec.question);
        let a_raw = split_tokens(&rec.answer);
        if rec.product_id.is_empty() || q_raw.is_empty() || a_raw.is_empty() {
            warn!("{}:{lineno}: skipping QA record with an empty field", path.display());
            out.skipped += 1;
            return;
        }
        let question_id = rec
            .question_id
            .filter(|q| !q.is_empty())
            .unwrap_or_else(|| format!("{}#{lineno}", rec.product_id));
        if !seen.insert((rec.product_id.clone(), question_id.clone())) {
            warn!("{}:{lineno}: skipping duplicate question id {question_id}", path.display());
            out.skipped += 1;
            return;
        }
        let mut q_tokens = lowercase(&q_raw);
        q_tokens.truncate(limits.max_q_len);
        match annotate_lower(annotator, &a_raw) {
            Ok((a_tokens, a_pos, a_ner)) => out.records.push(QAPair {
                product_id: rec.product_id,
                question_id,
                q_tokens,
                a_tokens,
                a_pos,
                a_ner,
            }),
            Err(e) => failure = Some(e),
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Reads review records `{product_id, review_id, text}` and emits one
/// [`ReviewSentence`] per sentence. Records without any sentence are counted
/// as skipped.
pub fn ingest_reviews(
    path: &Path,
    annotator: &dyn Annotator,
    limits: Limits,
) -> Result<Ingested<ReviewSentence>> {
    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    let mut failure = None;
    for_each_line(path, |lineno, line| {
        if failure.is_some() {
            return;
        }
        let rec: ReviewRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                warn!("{}:{lineno}: skipping malformed review record: {e}", path.display());
                out.skipped += 1;
                return;
            }
        };
        if rec.product_id.is_empty() || !seen.insert((rec.product_id.clone(), rec.review_id.clone())) {
            warn!("{}:{lineno}: skipping review with empty or duplicate id", path.display());
            out.skipped += 1;
            return;
        }
        match review_sentences(&rec.product_id, &rec.review_id, &rec.text, annotator, limits) {
            Ok(sentences) if sentences.is_empty() => {
                warn!("{}:{lineno}: review {} has no text", path.display(), rec.review_id);
                out.skipped += 1;
            }
            Ok(sentences) => out.records.extend(sentences),
            Err(e) => failure = Some(e),
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Sentence-splits, tokenizes and annotates one review text.
pub fn review_sentences(
    product_id: &str,
    review_id: &str,
    text: &str,
    annotator: &dyn Annotator,
    limits: Limits,
) -> Result<Vec<ReviewSentence>> {
    let mut out = Vec::new();
    for sentence in split_sentences(text) {
        let mut raw = split_tokens(&sentence);
        raw.truncate(limits.max_review_len);
        if raw.is_empty() {
            continue;
        }
        let (tokens, pos_tags, ner_bio) = annotate_lower(annotator, &raw)?;
        out.push(ReviewSentence {
            product_id: product_id.to_string(),
            review_id: review_id.to_string(),
            sent_idx: out.len(),
            tokens,
            pos_tags,
            ner_bio,
        });
    }
    Ok(out)
}

/// Table-1 style statistics of a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub products: usize,
    pub questions: usize,
    pub answers: usize,
    pub reviews: usize,
    pub sentences: usize,
    pub skipped_qa: usize,
    pub skipped_reviews: usize,
}

/// Everything training needs: QA pairs, review sentences, vocabulary and
/// embeddings, tagged with the hash of the configuration that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub qa: Vec<QAPair>,
    pub reviews: Vec<ReviewSentence>,
    pub vocab: Vocab,
    pub embeddings: EmbeddingTable,
    pub counts: CorpusCounts,
    /// Configuration the corpus was built with.
    pub config: RunConfig,
    pub config_hash: String,
}

impl Corpus {
    pub fn build(qa: Ingested<QAPair>, reviews: Ingested<ReviewSentence>, config: &RunConfig) -> Result<Self> {
        let sequences = qa
            .records
            .iter()
            .flat_map(|p| [&p.q_tokens, &p.a_tokens])
            .chain(reviews.records.iter().map(|r| &r.tokens));
        let vocab = Vocab::build(sequences, config.min_count)?;
        let embeddings = match &config.embeddings {
            Some(path) => EmbeddingTable::load(path, &vocab, config.embedding_dim, config.seed)?,
            None => EmbeddingTable::random(vocab.len(), config.embedding_dim, config.seed),
        };
        let products: BTreeSet<&str> = qa
            .records
            .iter()
            .map(|p| p.product_id.as_str())
            .chain(reviews.records.iter().map(|r| r.product_id.as_str()))
            .collect();
        let review_ids: BTreeSet<(&str, &str)> = reviews
            .records
            .iter()
            .map(|r| (r.product_id.as_str(), r.review_id.as_str()))
            .collect();
        let counts = CorpusCounts {
            products: products.len(),
            questions: qa.records.len(),
            answers: qa.records.len(),
            reviews: review_ids.len(),
            sentences: reviews.records.len(),
            skipped_qa: qa.skipped,
            skipped_reviews: reviews.skipped,
        };
        Ok(Corpus {
            qa: qa.records,
            reviews: reviews.records,
            vocab,
            embeddings,
            counts,
            config: config.clone(),
            config_hash: config.hash(),
        })
    }

    /// Ingests both files and builds the corpus.
    pub fn ingest(qa_path: &Path, reviews_path: &Path, config: &RunConfig) -> Result<Self> {
        let annotator = LexiconAnnotator;
        let limits = Limits::from(config);
        let qa = ingest_qa(qa_path, &annotator, limits)?;
        let reviews = ingest_reviews(reviews_path, &annotator, limits)?;
        Self::build(qa, reviews, config)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut w = ArchiveWriter::new(dir, "corpus", &self.config_hash);
        let c = &self.counts;
        w.count("products", c.products as u64)
            .count("questions", c.questions as u64)
            .count("answers", c.answers as u64)
            .count("reviews", c.reviews as u64)
            .count("sentences", c.sentences as u64)
            .count("skipped_qa", c.skipped_qa as u64)
            .count("skipped_reviews", c.skipped_reviews as u64)
            .count("vocab", self.vocab.len() as u64)
            .tensor_f32("embeddings", self.embeddings.matrix())
            .file("vocab.txt", self.vocab.to_text())
            .file("config.txt", self.config.to_text())
            .file("qa.jsonl", to_jsonl(&self.qa)?)
            .file("reviews.jsonl", to_jsonl(&self.reviews)?);
        w.finish()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let archive = Archive::open(dir)?;
        archive.expect_kind("corpus")?;
        let vocab = Vocab::from_text(&archive.read_file("vocab.txt")?)?;
        let embeddings = EmbeddingTable::from_matrix(archive.tensor_f32("embeddings")?);
        if embeddings.vocab_size() != vocab.len() {
            return Err(Error::Archive("embedding rows do not match vocabulary size".into()));
        }
        let count = |k: &str| archive.count(k).unwrap_or(0) as usize;
        let counts = CorpusCounts {
            products: count("products"),
            questions: count("questions"),
            answers: count("answers"),
            reviews: count("reviews"),
            sentences: count("sentences"),
            skipped_qa: count("skipped_qa"),
            skipped_reviews: count("skipped_reviews"),
        };
        Ok(Corpus {
            qa: from_jsonl(&archive.read_file("qa.jsonl")?)?,
            reviews: from_jsonl(&archive.read_file("reviews.jsonl")?)?,
            vocab,
            embeddings,
            counts,
            config: RunConfig::parse_str(&archive.read_file("config.txt")?)?,
            config_hash: archive.config_hash().to_string(),
        })
    }
}

pub(crate) fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub(crate) fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn well_formed_qa_lines() {
        let f = file(&[
            r#"{"product_id":"p1","question":"Does it fit?","answer":"Yes it fits fine"}"#,
            r#"{"product_id":"p1","question":"Color?","answer":"Red"}"#,
            r#"{"product_id":"p2","question":"Is it loud?","answer":"No","question_id":"q9"}"#,
        ]);
        let got = ingest_qa(f.path(), &LexiconAnnotator, Limits::default()).unwrap();
        assert_eq!(got.skipped, 0);
        assert_eq!(got.records.len(), 3);
        assert_eq!(got.records[0].q_tokens, vec!["does", "it", "fit", "?"]);
        assert_eq!(got.records[0].question_id, "p1#1");
        assert_eq!(got.records[2].question_id, "q9");
        assert_eq!(got.records[0].a_pos.len(), got.records[0].a_tokens.len());
    }

    #[test]
    fn empty_answer_and_malformed_lines_are_skipped() {
        let f = file(&[
            r#"{"product_id":"p1","question":"Does it fit?","answer":""}"#,
            r#"{"product_id":"p1","question":"Does it fit?""#,
            r#"{"product_id":"p1","question":"Ok?","answer":"ok"}"#,
        ]);
        let got = ingest_qa(f.path(), &LexiconAnnotator, Limits::default()).unwrap();
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.skipped, 2);
    }

    #[test]
    fn unreadable_file_is_fatal() {
        let err = ingest_qa(Path::new("/nonexistent/qa.jsonl"), &LexiconAnnotator, Limits::default());
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn reviews_are_sentence_split() {
        let f = file(&[
            r#"{"product_id":"p1","review_id":"r1","text":"Great case. Battery lasts two days."}"#,
            r#"{"product_id":"p1","review_id":"r2","text":"Works"}"#,
            r#"{"product_id":"p1","review_id":"r3","text":""}"#,
        ]);
        let got = ingest_reviews(f.path(), &LexiconAnnotator, Limits::default()).unwrap();
        assert_eq!(got.skipped, 1);
        let idx: Vec<_> = got.records.iter().map(|s| (s.review_id.as_str(), s.sent_idx)).collect();
        assert_eq!(idx, vec![("r1", 0), ("r1", 1), ("r2", 0)]);
        assert_eq!(got.records[1].tokens, vec!["battery", "lasts", "two", "days", "."]);
        for s in &got.records {
            assert_eq!(s.tokens.len(), s.pos_tags.len());
            assert_eq!(s.tokens.len(), s.ner_bio.len());
        }
    }

    #[test]
    fn long_inputs_are_truncated() {
        let long = vec!["word"; 70].join(" ");
        let f = file(&[&format!(r#"{{"product_id":"p","question":"{long}","answer":"a"}}"#)]);
        let got = ingest_qa(f.path(), &LexiconAnnotator, Limits::default()).unwrap();
        assert_eq!(got.records[0].q_tokens.len(), 30);
        let s = review_sentences("p", "r", &long, &LexiconAnnotator, Limits::default()).unwrap();
        assert_eq!(s[0].tokens.len(), 50);
    }

    #[test]
    fn corpus_serialization_is_deterministic() {
        let qa = file(&[
            r#"{"product_id":"p1","question":"Does it fit?","answer":"Yes it fits fine"}"#,
            r#"{"product_id":"p1","question":"Does it last?","answer":"Yes it does"}"#,
        ]);
        let rv = file(&[r#"{"product_id":"p1","review_id":"r1","text":"It fits. It lasts."}"#]);
        let mut cfg = RunConfig::default();
        cfg.embedding_dim = 4;
        cfg.min_count = 1;
        let dir = tempfile::tempdir().unwrap();
        let a = Corpus::ingest(qa.path(), rv.path(), &cfg).unwrap();
        let b = Corpus::ingest(qa.path(), rv.path(), &cfg).unwrap();
        a.save(&dir.path().join("a")).unwrap();
        b.save(&dir.path().join("b")).unwrap();
        for name in ["manifest.json", "tensors.bin", "vocab.txt", "qa.jsonl", "reviews.jsonl"] {
            let x = std::fs::read(dir.path().join("a").join(name)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(name)).unwrap();
            assert_eq!(x, y, "{name} differs");
        }
        let loaded = Corpus::load(&dir.path().join("a")).unwrap();
        assert_eq!(loaded, a);
        assert_eq!(a.counts.sentences, 2);
        assert_eq!(a.counts.questions, 2);
    }
}

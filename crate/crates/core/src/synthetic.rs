//! Seeded generator for the small synthetic corpus shipped under
//! `fixtures/synthetic`.
//!
//! Twenty products, each with ten questions and ten three-sentence reviews.
//! Every question, answer and review sentence is about one of a handful of
//! product aspects, so a question is predictable from the aspect of the
//! sentence it is asked about. A held-out set of review sentences with
//! reference questions serves as the test set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::corpus::{from_jsonl, ingest_reviews, tokenize, Corpus, LexiconAnnotator, Limits, ReviewSentence};
use crate::error::{Error, Result};

pub const SEED: u64 = 7;
pub const PRODUCTS: usize = 20;
pub const QUESTIONS_PER_PRODUCT: usize = 10;
pub const REVIEWS_PER_PRODUCT: usize = 10;
pub const SENTENCES_PER_REVIEW: usize = 3;
pub const TEST_PER_PRODUCT: usize = 5;

pub const QA_FILE: &str = "qa.jsonl";
pub const REVIEWS_FILE: &str = "reviews.jsonl";
pub const TEST_REVIEWS_FILE: &str = "test_reviews.jsonl";
pub const TEST_REFS_FILE: &str = "test_refs.jsonl";

struct Aspect {
    /// Words that name the aspect; one is picked per sentence.
    nouns: &'static [&'static str],
    questions: &'static [&'static str],
    answers: &'static [&'static str],
    /// `{n}` is the aspect noun, `{a}` an opinion word, `{p}` the product.
    sentences: &'static [&'static str],
    opinions: &'static [&'static str],
}

const ASPECTS: &[Aspect] = &[
    Aspect {
        nouns: &["battery", "charge"],
        questions: &[
            "how long does the {n} last ?",
            "does the {n} last a full day ?",
            "how long does the {n} take to recharge ?",
        ],
        answers: &["the {n} lasts about two days .", "mine lasts all day on one {n} .", "it takes an hour to fill the {n} ."],
        sentences: &[
            "the {n} on the {p} is {a} .",
            "i get {a} {n} life from it every day .",
            "honestly the {n} is {a} for the price .",
        ],
        opinions: &["great", "weak", "amazing", "poor", "decent"],
    },
    Aspect {
        nouns: &["screen", "display"],
        questions: &[
            "is the {n} bright enough outside ?",
            "how big is the {n} ?",
            "does the {n} scratch easily ?",
        ],
        answers: &["the {n} is bright in sunlight .", "the {n} is about six inches .", "no scratches on my {n} yet ."],
        sentences: &[
            "the {n} of the {p} looks {a} .",
            "colors on the {n} are {a} indoors .",
            "i find the {n} {a} for reading .",
        ],
        opinions: &["sharp", "dim", "gorgeous", "washed", "crisp"],
    },
    Aspect {
        nouns: &["sound", "speaker"],
        questions: &[
            "how loud is the {n} ?",
            "is the {n} clear at high volume ?",
            "does the {n} have good bass ?",
        ],
        answers: &["the {n} is very loud .", "the {n} stays clear at max volume .", "bass from the {n} is solid ."],
        sentences: &[
            "the {n} from the {p} is {a} .",
            "music through the {n} sounds {a} .",
            "calls on the {n} are {a} .",
        ],
        opinions: &["loud", "tinny", "rich", "muffled", "clear"],
    },
    Aspect {
        nouns: &["camera", "lens"],
        questions: &[
            "does the {n} take good photos at night ?",
            "how many megapixels is the {n} ?",
            "can the {n} record video ?",
        ],
        answers: &["night shots from the {n} are fine .", "the {n} is twelve megapixels .", "yes the {n} records video ."],
        sentences: &[
            "photos from the {n} are {a} .",
            "the {p} {n} is {a} in low light .",
            "i think the {n} is {a} overall .",
        ],
        opinions: &["blurry", "stunning", "grainy", "detailed", "average"],
    },
    Aspect {
        nouns: &["case", "cover"],
        questions: &[
            "does the {n} fit snugly ?",
            "is the {n} easy to remove ?",
            "what color is the {n} ?",
        ],
        answers: &["the {n} fits perfectly .", "the {n} comes off easily .", "the {n} is black ."],
        sentences: &[
            "the {n} for the {p} feels {a} .",
            "this {n} is {a} and light .",
            "my {n} looks {a} after a month .",
        ],
        opinions: &["sturdy", "flimsy", "sleek", "bulky", "cheap"],
    },
    Aspect {
        nouns: &["shipping", "delivery"],
        questions: &[
            "how fast is the {n} ?",
            "does {n} include tracking ?",
            "was the {n} free ?",
        ],
        answers: &["{n} took three days .", "yes {n} has tracking .", "the {n} was free for me ."],
        sentences: &[
            "{n} of the {p} was {a} .",
            "the {n} was {a} and the box was intact .",
            "i was happy that {n} was {a} .",
        ],
        opinions: &["fast", "slow", "quick", "late", "prompt"],
    },
];

const NAMES: &[&str] = &[
    "Zorbix", "Quellon", "Vantrix", "Mirelo", "Kestra", "Doravo", "Plexum", "Tarvik", "Sonara", "Lumetra",
    "Bravix", "Corvane", "Fennix", "Galvio", "Hestro", "Ivora", "Jandro", "Koplex", "Liora", "Maxeon",
];

const OPENERS: &[&str] = &["", "", "overall ", "so far ", "after a week ", "to be fair "];

fn fill(template: &str, noun: &str, opinion: &str, product: &str) -> String {
    template.replace("{n}", noun).replace("{a}", opinion).replace("{p}", product)
}

/// Text of the four fixture files, one JSON record per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fixture {
    pub qa: String,
    pub reviews: String,
    pub test_reviews: String,
    pub test_refs: String,
}

struct Sentence {
    aspect: usize,
    noun: usize,
    text: String,
}

fn sentence(rng: &mut ChaCha8Rng, aspect: usize, product: &str) -> Sentence {
    let a = &ASPECTS[aspect];
    let noun = rng.gen_range(0..a.nouns.len());
    let template = a.sentences.choose(rng).unwrap();
    let opinion = a.opinions.choose(rng).unwrap();
    let opener = OPENERS.choose(rng).unwrap();
    let mut text = format!("{opener}{}", fill(template, a.nouns[noun], opinion, product));
    // Sentence splitting and annotation expect a capitalized start.
    if let Some(first) = text.get(..1) {
        text = first.to_uppercase() + &text[1..];
    }
    Sentence { aspect, noun, text }
}

/// One of the aspect's question templates with the noun filled in.
fn question_for(aspect: usize, noun: usize, variant: usize) -> String {
    let a = &ASPECTS[aspect];
    fill(a.questions[variant % a.questions.len()], a.nouns[noun], "", "")
}

pub fn generate(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut qa = String::new();
    let mut reviews = String::new();
    let mut test_reviews = String::new();
    let mut test_refs = String::new();
    for (p, name) in NAMES.iter().enumerate().take(PRODUCTS) {
        let pid = format!("P{p:03}");
        // Each product concentrates on a few aspects.
        let mut order: Vec<usize> = (0..ASPECTS.len()).collect();
        order.shuffle(&mut rng);
        let focus = &order[..4];
        for q in 0..QUESTIONS_PER_PRODUCT {
            let aspect = focus[q % focus.len()];
            let a = &ASPECTS[aspect];
            let noun = rng.gen_range(0..a.nouns.len());
            let variant = rng.gen_range(0..a.questions.len());
            let question = question_for(aspect, noun, variant);
            let answer = fill(a.answers[variant % a.answers.len()], a.nouns[noun], "", name);
            let line = json!({
                "product_id": pid,
                "question_id": format!("{pid}-Q{q:02}"),
                "question": question,
                "answer": answer,
            });
            qa.push_str(&format!("{line}\n"));
        }
        for r in 0..REVIEWS_PER_PRODUCT {
            let text: Vec<String> = (0..SENTENCES_PER_REVIEW)
                .map(|_| {
                    let aspect = *focus.choose(&mut rng).unwrap();
                    sentence(&mut rng, aspect, name).text
                })
                .collect();
            let line = json!({
                "product_id": pid,
                "review_id": format!("{pid}-R{r:02}"),
                "text": text.join(" "),
            });
            reviews.push_str(&format!("{line}\n"));
        }
        for t in 0..TEST_PER_PRODUCT {
            let s = sentence(&mut rng, focus[t % focus.len()], name);
            let variant = rng.gen_range(0..ASPECTS[s.aspect].questions.len());
            let rid = format!("{pid}-T{t:02}");
            let line = json!({"product_id": pid, "review_id": rid, "text": s.text});
            test_reviews.push_str(&format!("{line}\n"));
            let line = json!({
                "product_id": pid,
                "review_id": rid,
                "sent_idx": 0,
                "question": question_for(s.aspect, s.noun, variant),
            });
            test_refs.push_str(&format!("{line}\n"));
        }
    }
    Fixture {
        qa,
        reviews,
        test_reviews,
        test_refs,
    }
}

impl Fixture {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in self.files() {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn files(&self) -> [(&'static str, &str); 4] {
        [
            (QA_FILE, &self.qa),
            (REVIEWS_FILE, &self.reviews),
            (TEST_REVIEWS_FILE, &self.test_reviews),
            (TEST_REFS_FILE, &self.test_refs),
        ]
    }
}

/// Directory of the shipped fixture.
pub fn fixture_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("synthetic")
}

/// Corpus built from the shipped training files.
pub fn corpus(config: &RunConfig) -> Result<Corpus> {
    let dir = fixture_dir();
    Corpus::ingest(&dir.join(QA_FILE), &dir.join(REVIEWS_FILE), config)
}

/// Held-out review sentences paired with their tokenized reference question.
pub fn test_set(config: &RunConfig) -> Result<Vec<(ReviewSentence, Vec<String>)>> {
    #[derive(serde::Deserialize)]
    struct Ref {
        product_id: String,
        review_id: String,
        sent_idx: usize,
        question: String,
    }
    let dir = fixture_dir();
    let reviews = ingest_reviews(&dir.join(TEST_REVIEWS_FILE), &LexiconAnnotator, Limits::from(config))?.records;
    let refs: Vec<Ref> = from_jsonl(&fs::read_to_string(dir.join(TEST_REFS_FILE)).map_err(|e| Error::io(&dir, e))?)?;
    let by_key: BTreeMap<(String, String, usize), Vec<String>> = refs
        .into_iter()
        .map(|r| ((r.product_id, r.review_id, r.sent_idx), tokenize(&r.question)))
        .collect();
    reviews
        .into_iter()
        .map(|r| {
            let key = (r.product_id.clone(), r.review_id.clone(), r.sent_idx);
            let reference = by_key
                .get(&key)
                .cloned()
                .ok_or_else(|| Error::Alignment(format!("no reference for {}/{}#{}", key.0, key.1, key.2)))?;
            Ok((r, reference))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate(SEED), generate(SEED));
        assert_ne!(generate(SEED).qa, generate(SEED + 1).qa);
    }

    #[test]
    fn shipped_files_match_the_generator() {
        let fixture = generate(SEED);
        let dir = fixture_dir();
        if std::env::var_os("AITA_WRITE_FIXTURE").is_some() {
            fixture.write(&dir).unwrap();
        }
        for (name, text) in fixture.files() {
            let shipped = fs::read_to_string(dir.join(name)).unwrap();
            assert_eq!(shipped, text, "{name} is stale; regenerate with AITA_WRITE_FIXTURE=1");
        }
    }

    #[test]
    fn sizes() {
        let f = generate(SEED);
        assert_eq!(f.qa.lines().count(), PRODUCTS * QUESTIONS_PER_PRODUCT);
        assert_eq!(f.reviews.lines().count(), PRODUCTS * REVIEWS_PER_PRODUCT);
        assert_eq!(f.test_refs.lines().count(), PRODUCTS * TEST_PER_PRODUCT);
    }
}

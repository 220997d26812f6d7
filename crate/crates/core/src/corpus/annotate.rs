use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static LEXICON: &str = include_str!("../../data/pos_lexicon.tsv");

/// The 17 universal part-of-speech tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Adj,
    Adp,
    Adv,
    Aux,
    Cconj,
    Det,
    Intj,
    Noun,
    Num,
    Part,
    Pron,
    Propn,
    Punct,
    Sconj,
    Sym,
    Verb,
    X,
}

impl PosTag {
    pub const COUNT: usize = 17;

    pub const ALL: [PosTag; 17] = [
        PosTag::Adj,
        PosTag::Adp,
        PosTag::Adv,
        PosTag::Aux,
        PosTag::Cconj,
        PosTag::Det,
        PosTag::Intj,
        PosTag::Noun,
        PosTag::Num,
        PosTag::Part,
        PosTag::Pron,
        PosTag::Propn,
        PosTag::Punct,
        PosTag::Sconj,
        PosTag::Sym,
        PosTag::Verb,
        PosTag::X,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Adj => "ADJ",
            PosTag::Adp => "ADP",
            PosTag::Adv => "ADV",
            PosTag::Aux => "AUX",
            PosTag::Cconj => "CCONJ",
            PosTag::Det => "DET",
            PosTag::Intj => "INTJ",
            PosTag::Noun => "NOUN",
            PosTag::Num => "NUM",
            PosTag::Part => "PART",
            PosTag::Pron => "PRON",
            PosTag::Propn => "PROPN",
            PosTag::Punct => "PUNCT",
            PosTag::Sconj => "SCONJ",
            PosTag::Sym => "SYM",
            PosTag::Verb => "VERB",
            PosTag::X => "X",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PosTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown POS tag {s:?}")))
    }
}

/// Named-entity Begin/Inside/Outside label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bio {
    B,
    I,
    O,
}

impl Bio {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Bio::B => 0,
            Bio::I => 1,
            Bio::O => 2,
        }
    }
}

/// Produces POS and BIO features for a token sequence in its original casing.
pub trait Annotator: Send + Sync {
    fn annotate(&self, tokens: &[String]) -> Result<(Vec<PosTag>, Vec<Bio>)>;
}

/// Lexicon lookup for closed-class words with suffix and shape heuristics
/// for the rest. Entities are capitalized tokens outside the lexicon and
/// numbers; consecutive entity tokens continue with `I`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexiconAnnotator;

fn lexicon() -> &'static HashMap<&'static str, PosTag> {
    static MAP: OnceLock<HashMap<&'static str, PosTag>> = OnceLock::new();
    MAP.get_or_init(|| {
        let mut map = HashMap::new();
        for line in LEXICON.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let (word, tag) = line.split_once('\t').expect("lexicon line needs a tab");
            let tag: PosTag = tag.trim().parse().expect("lexicon tag");
            map.entry(word.trim()).or_insert(tag);
        }
        map
    })
}

fn is_number(token: &str) -> bool {
    token.chars().any(|c| c.is_ascii_digit()) && token.chars().all(|c| c.is_alphanumeric())
}

fn is_capitalized(token: &str) -> bool {
    token.chars().next().is_some_and(char::is_uppercase)
}

impl LexiconAnnotator {
    fn pos(token: &str) -> PosTag {
        let lower = token.to_lowercase();
        if let Some(&tag) = lexicon().get(lower.as_str()) {
            return tag;
        }
        let first = token.chars().next().unwrap_or(' ');
        if !first.is_alphanumeric() {
            return if matches!(first, '$' | '%' | '+' | '=' | '&' | '#' | '@' | '*' | '<' | '>') {
                PosTag::Sym
            } else {
                PosTag::Punct
            };
        }
        if is_number(token) {
            return PosTag::Num;
        }
        if is_capitalized(token) {
            return PosTag::Propn;
        }
        if lower.ends_with("ly") && lower.len() > 4 {
            PosTag::Adv
        } else if lower.ends_with("ing") || lower.ends_with("ed") || lower.ends_with("ize") {
            PosTag::Verb
        } else if ["able", "ible", "ous", "ful", "ive", "less", "ish"].iter().any(|s| lower.ends_with(s)) {
            PosTag::Adj
        } else {
            PosTag::Noun
        }
    }

    fn is_entity(token: &str) -> bool {
        if is_number(token) {
            return true;
        }
        is_capitalized(token) && !lexicon().contains_key(token.to_lowercase().as_str())
    }
}

impl Annotator for LexiconAnnotator {
    fn annotate(&self, tokens: &[String]) -> Result<(Vec<PosTag>, Vec<Bio>)> {
        if tokens.is_empty() {
            return Err(Error::invalid("annotate requires a non-empty token sequence"));
        }
        let pos = tokens.iter().map(|t| Self::pos(t)).collect();
        let mut bio = Vec::with_capacity(tokens.len());
        let mut inside = false;
        for t in tokens {
            if Self::is_entity(t) {
                bio.push(if inside { Bio::I } else { Bio::B });
                inside = true;
            } else {
                bio.push(Bio::O);
                inside = false;
            }
        }
        Ok((pos, bio))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn determiner_lookup() {
        let (pos, bio) = LexiconAnnotator.annotate(&toks(&["the"])).unwrap();
        assert_eq!(pos, vec![PosTag::Det]);
        assert_eq!(bio, vec![Bio::O]);
    }

    #[test]
    fn capitalized_entity() {
        let (pos, bio) = LexiconAnnotator.annotate(&toks(&["Samsung", "phone"])).unwrap();
        assert_eq!(bio, vec![Bio::B, Bio::O]);
        assert_eq!(pos, vec![PosTag::Propn, PosTag::Noun]);
    }

    #[test]
    fn multiword_entities_and_numbers() {
        let (_, bio) = LexiconAnnotator
            .annotate(&toks(&["The", "Galaxy", "Note", "lasts", "2", "days"]))
            .unwrap();
        assert_eq!(bio, vec![Bio::O, Bio::B, Bio::I, Bio::O, Bio::B, Bio::O]);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(LexiconAnnotator.annotate(&[]).is_err());
    }

    #[test]
    fn lengths_match_and_tags_are_universal() {
        let tokens = toks(&["I", "really", "loved", "it", ",", "$", "20", "well", "spent", "!"]);
        let (pos, bio) = LexiconAnnotator.annotate(&tokens).unwrap();
        assert_eq!(pos.len(), tokens.len());
        assert_eq!(bio.len(), tokens.len());
        assert_eq!(pos[4], PosTag::Punct);
        assert_eq!(pos[5], PosTag::Sym);
        assert_eq!(pos[6], PosTag::Num);
        assert!(pos.iter().all(|p| p.index() < PosTag::COUNT));
    }

    #[test]
    fn tag_names_round_trip() {
        for tag in PosTag::ALL {
            assert_eq!(tag.as_str().parse::<PosTag>().unwrap(), tag);
            assert_eq!(PosTag::ALL[tag.index()], tag);
        }
    }
}

use std::collections::HashSet;
use std::sync::OnceLock;

static ABBREVIATIONS: &str = include_str!("../../data/abbreviations.txt");

fn abbreviations() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        ABBREVIATIONS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

/// Splits text into word and punctuation tokens, keeping the original case.
///
/// A word is a maximal run of alphanumeric characters; every other
/// non-whitespace character is a token of its own.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn lowercase(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

/// Lowercased tokens of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    lowercase(&split_tokens(text))
}

/// Rule-based sentence splitter.
///
/// A boundary is a run of `.`, `!` or `?` followed by whitespace and then a
/// character that is not lowercase. Periods ending a known abbreviation do
/// not end a sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if !matches!(chars[i], '.' | '!' | '?') {
            i += 1;
            continue;
        }
        let mut end = i;
        while end + 1 < chars.len() && matches!(chars[end + 1], '.' | '!' | '?') {
            end += 1;
        }
        let mut next = end + 1;
        let had_space = next < chars.len() && chars[next].is_whitespace();
        while next < chars.len() && chars[next].is_whitespace() {
            next += 1;
        }
        let boundary = had_space
            && next < chars.len()
            && !chars[next].is_lowercase()
            && !(chars[i] == '.' && end == i && ends_with_abbreviation(&chars[start..=i]));
        if boundary {
            push_trimmed(&mut sentences, &chars[start..=end]);
            start = next;
            i = next;
        } else {
            i = end + 1;
        }
    }
    if start < chars.len() {
        push_trimmed(&mut sentences, &chars[start..]);
    }
    sentences
}

fn ends_with_abbreviation(chars: &[char]) -> bool {
    let s: String = chars.iter().collect();
    let last = s.split_whitespace().last().unwrap_or("");
    abbreviations().contains(last.to_lowercase().as_str())
}

fn push_trimmed(out: &mut Vec<String>, chars: &[char]) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn question_tokens() {
        assert_eq!(tokenize("Does it fit?"), vec!["does", "it", "fit", "?"]);
    }

    #[test]
    fn punctuation_is_kept_as_separate_tokens() {
        assert_eq!(
            split_tokens("It's great, really!"),
            vec!["It", "'", "s", "great", ",", "really", "!"]
        );
        assert_eq!(tokenize("  \t "), Vec::<String>::new());
    }

    #[test]
    fn two_sentences() {
        assert_eq!(
            split_sentences("Great case. Battery lasts two days."),
            vec!["Great case.", "Battery lasts two days."]
        );
    }

    #[test]
    fn single_sentence_and_empty() {
        assert_eq!(split_sentences("Works fine"), vec!["Works fine"]);
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        assert_eq!(split_sentences("It costs 2.5 dollars. ok then."), vec!["It costs 2.5 dollars. ok then."]);
    }

    #[test]
    fn abbreviations_do_not_split() {
        assert_eq!(
            split_sentences("I asked Dr. Smith about it. He agreed!"),
            vec!["I asked Dr. Smith about it.", "He agreed!"]
        );
    }

    #[test]
    fn terminator_runs_stay_together() {
        assert_eq!(split_sentences("Wow!!! Love it?! Yes."), vec!["Wow!!!", "Love it?!", "Yes."]);
    }
}

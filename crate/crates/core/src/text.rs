//! Small text utilities shared by the mock providers and validators.

/// Common English function words ignored when comparing content.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been",
    "being", "but", "by", "can", "could", "do", "does", "for", "from", "had", "has", "have",
    "he", "her", "his", "how", "i", "if", "in", "into", "is", "it", "its", "may", "me", "my",
    "no", "not", "of", "on", "or", "our", "she", "should", "so", "such", "than", "that", "the",
    "their", "them", "then", "there", "these", "they", "this", "to", "was", "we", "were",
    "what", "when", "which", "who", "will", "with", "would", "you", "your",
];

/// Lowercased alphanumeric runs.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Tokens minus stopwords and single characters.
pub fn content_words(text: &str) -> Vec<String> {
    tokens(text)
        .into_iter()
        .filter(|t| t.chars().count() > 1 && !is_stopword(t))
        .collect()
}

/// Collapses every whitespace run to a single space and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Approximate sentence segmentation: a sentence ends at `.`, `?` or `!`
/// followed by whitespace (or end of text). Returned sentences are trimmed
/// and keep their terminal punctuation.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '?' | '!') {
            let boundary = match chars.peek() {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
            if boundary {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// True when every character of `needle` appears in `haystack` in order,
/// comparing whitespace-normalized forms.
pub fn is_subsequence_normalized(needle: &str, haystack: &str) -> bool {
    let needle = normalize_whitespace(needle);
    let haystack = normalize_whitespace(haystack);
    let mut hay = haystack.chars();
    needle.chars().all(|c| hay.any(|h| h == c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopwords_are_sorted_for_binary_search() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOPWORDS);
    }

    #[test]
    fn sentences_split_on_terminal_punctuation() {
        let s = split_sentences("Use the pen. Hold 3.5 seconds!  Then call? done");
        assert_eq!(s, vec!["Use the pen.", "Hold 3.5 seconds!", "Then call?", "done"]);
    }

    #[test]
    fn content_words_drop_stopwords() {
        assert_eq!(content_words("How do I use the EpiPen?"), vec!["use", "epipen"]);
    }

    #[test]
    fn subsequence_check() {
        assert!(is_subsequence_normalized("a  c", "a b\n c"));
        assert!(!is_subsequence_normalized("ca", "abc"));
    }
}

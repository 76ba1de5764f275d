//! Case-folded whitespace/punctuation tokenization shared by the dataset,
//! the vocabulary and the entity index.

/// Lowercases `text` and splits it on whitespace; every punctuation
/// character becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Tokenized form joined by single spaces; the key used by the entity index.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Parses a token as a non-negative integer.
pub fn parse_number(token: &str) -> Option<u64> {
    if token.is_empty() || !token.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    token.parse().ok()
}

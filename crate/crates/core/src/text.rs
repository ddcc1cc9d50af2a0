//! Shared text normalization: lowercase, strip punctuation, split on whitespace.

/// Lowercased word tokens with ASCII and Unicode punctuation removed.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

//! Flat key-value text files: one `key value` pair per line, `#` comments.

/// Returns (key, value, 1-based line) triples, or the offending line.
pub(crate) fn parse_kv(text: &str) -> Result<Vec<(String, String, usize)>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once(char::is_whitespace) else {
            return Err((i + 1, format!("expected `key value`, got {:?}", line)));
        };
        out.push((key.to_string(), value.trim().to_string(), i + 1));
    }
    Ok(out)
}

//! `key = value` text files used for manifests and experiment configs.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may contain
//! dots (`loss.tau`). Values are trimmed; an optional pair of surrounding
//! double quotes is stripped.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses the text, reporting the first malformed line as `(line, message)`.
pub fn parse(text: &str) -> Result<Vec<Entry>, (usize, String)> {
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err((line, format!("expected `key = value`, found {trimmed:?}")));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err((line, "empty key".into()));
        }
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err((line, format!("duplicate key {key:?} (first on line {})", prev.line)));
        }
        let mut value = value.trim();
        if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
            value = &value[1..value.len() - 1];
        }
        entries.push(Entry {
            key: key.to_string(),
            value: value.to_string(),
            line,
        });
    }
    Ok(entries)
}

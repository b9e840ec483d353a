use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{CandidateEntry, Dataset, Request, Vocab};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct RawCandidate {
    item_id: String,
    category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<BTreeMap<String, String>>,
}

#[derive(Serialize, Deserialize)]
struct RawRequest {
    request_id: String,
    user_id: String,
    candidates: Vec<RawCandidate>,
}

/// Reads a JSONL request file.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

/// Parses JSONL request text. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn parse_jsonl(text: &str) -> Result<Dataset> {
    let mut vocab = Vocab::default();
    let mut requests = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        let raw: RawRequest = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if raw.candidates.len() < 2 {
            return Err(parse_err(format!(
                "request `{}` has {} candidates, need at least 2",
                raw.request_id,
                raw.candidates.len()
            )));
        }
        let user = vocab.users.intern(&raw.user_id);
        let mut seen = HashSet::with_capacity(raw.candidates.len());
        let mut candidates = Vec::with_capacity(raw.candidates.len());
        for c in raw.candidates {
            if c.item_id.is_empty() {
                return Err(parse_err("empty item_id".into()));
            }
            if !seen.insert(c.item_id.clone()) {
                return Err(parse_err(format!(
                    "duplicate item `{}` in request `{}`",
                    c.item_id, raw.request_id
                )));
            }
            let label = match c.label {
                None => None,
                Some(0) => Some(false),
                Some(1) => Some(true),
                Some(other) => return Err(parse_err(format!("label must be 0 or 1, got {other}"))),
            };
            let item = vocab.intern_item(&c.item_id, &c.category, c.features).map_err(parse_err)?;
            candidates.push(CandidateEntry { item, label });
        }
        requests.push(Request { request_id: raw.request_id, user, candidates });
    }
    Ok(Dataset { vocab: Arc::new(vocab), requests })
}

/// Serializes a dataset, one request per line.
pub fn to_jsonl(dataset: &Dataset) -> String {
    let v = &dataset.vocab;
    let mut out = String::new();
    for r in &dataset.requests {
        let raw = RawRequest {
            request_id: r.request_id.clone(),
            user_id: v.users.name(r.user).to_string(),
            candidates: r
                .candidates
                .iter()
                .map(|c| RawCandidate {
                    item_id: v.items.name(c.item).to_string(),
                    category: v.categories.name(v.item_category[c.item]).to_string(),
                    label: c.label.map(u8::from),
                    features: v.item_features[c.item].clone(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(dataset)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_request() {
        let d = parse_jsonl(
            r#"{"request_id": "r1", "user_id": "u1", "candidates": [{"item_id": "i1", "category": "c3", "label": 1}, {"item_id": "i2", "category": "c7"}]}"#,
        )
        .unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.vocab.items.len(), 2);
        assert_eq!(d.requests[0].candidates[0].label, Some(true));
        assert_eq!(d.requests[0].candidates[1].label, None);
        assert_eq!(d.vocab.item(1).category_id, "c7");
    }

    #[test]
    fn missing_user_names_field_and_line() {
        let err = parse_jsonl(r#"{"request_id": "r1", "candidates": []}"#).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("user_id"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_number() {
        let text = concat!(
            r#"{"request_id": "r1", "user_id": "u", "candidates": [{"item_id": "a", "category": "c"}, {"item_id": "b", "category": "c"}]}"#,
            "\n{not json\n"
        );
        assert!(matches!(parse_jsonl(text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn duplicate_item_in_request() {
        let text = r#"{"request_id": "r1", "user_id": "u", "candidates": [{"item_id": "a", "category": "c"}, {"item_id": "a", "category": "c"}]}"#;
        let err = parse_jsonl(text).unwrap_err();
        assert!(err.to_string().contains("duplicate item"), "{err}");
    }

    #[test]
    fn rejects_bad_label_and_tiny_pool() {
        let bad = r#"{"request_id": "r1", "user_id": "u", "candidates": [{"item_id": "a", "category": "c", "label": 2}, {"item_id": "b", "category": "c"}]}"#;
        assert!(parse_jsonl(bad).is_err());
        let tiny = r#"{"request_id": "r1", "user_id": "u", "candidates": [{"item_id": "a", "category": "c"}]}"#;
        assert!(parse_jsonl(tiny).is_err());
    }

    #[test]
    fn ids_are_first_seen_and_stable() {
        let text = concat!(
            r#"{"request_id": "r1", "user_id": "u2", "candidates": [{"item_id": "z", "category": "c9"}, {"item_id": "y", "category": "c1"}]}"#,
            "\n",
            r#"{"request_id": "r2", "user_id": "u1", "candidates": [{"item_id": "y", "category": "c1"}, {"item_id": "x", "category": "c9"}]}"#,
        );
        let a = parse_jsonl(text).unwrap();
        assert_eq!(a.vocab.items.names(), &["z", "y", "x"]);
        assert_eq!(a.vocab.users.names(), &["u2", "u1"]);
        assert_eq!(a.vocab.categories.names(), &["c9", "c1"]);
        assert_eq!(parse_jsonl(&to_jsonl(&a)).unwrap(), a);
    }
}

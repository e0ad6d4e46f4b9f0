use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: Value,
    text: String,
    #[serde(default)]
    domain: Option<String>,
}

/// Parses line-delimited `{"id", "text", "domain"?}` records. Blank lines are
/// skipped; `origin` labels errors.
pub fn parse_corpus(content: &str, origin: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            msg,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let id = match rec.id {
            Value::String(s) => s,
            Value::Number(n) => n.to_string(),
            other => return Err(parse_err(format!("id must be a string or number, got {other}"))),
        };
        if rec.text.is_empty() {
            return Err(parse_err(format!("document `{id}` has empty text")));
        }
        if !seen.insert(id.clone()) {
            return Err(parse_err(format!("duplicate document id `{id}`")));
        }
        docs.push(Document {
            id,
            text: rec.text,
            domain: rec.domain,
        });
    }
    Ok(docs)
}

pub fn ingest_corpus(path: &Path) -> Result<Vec<Document>> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    parse_corpus(&content, &path.display().to_string())
}

/// Writes documents in the line-delimited format `parse_corpus` reads.
pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert!(parse_corpus("", "c").unwrap().is_empty());
        let docs = parse_corpus(
            "{\"id\": \"b\", \"text\": \"x\"}\n\n{\"id\": 7, \"text\": \"y\", \"domain\": \"math\"}\n",
            "c",
        )
        .unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].id, "b");
        assert_eq!(docs[1].id, "7");
        assert_eq!(docs[1].domain.as_deref(), Some("math"));
    }

    #[test]
    fn duplicates_and_bad_lines_are_located() {
        let err = parse_corpus("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}", "c").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`a`") && msg.contains("c:2"), "{msg}");
        let err = parse_corpus("{\"id\":\"a\",\"text\":\"x\"}\nnot json", "c").unwrap_err();
        assert!(err.to_string().starts_with("c:2:"));
        assert!(parse_corpus("{\"id\":\"a\",\"text\":\"\"}", "c").is_err());
    }
}

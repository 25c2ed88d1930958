//! Loading evaluation and training texts from the supported file layouts.

use std::fs;
use std::path::Path;

use aeval_core::claims::{parse_claims, read_documents};
use aeval_core::token::TokenId;
use anyhow::{bail, Context, Result};
use serde_json::Value;

/// One text to evaluate or train on.
pub struct Sequence {
    pub id: String,
    pub text: String,
    /// Exact tokens when the input recorded them (token-reversed records).
    pub tokens: Option<Vec<TokenId>>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("input")
        .to_owned()
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "json")
    )
}

/// The whole file as one sequence.
pub fn read_text(path: &Path) -> Result<Sequence> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sequence {
        id: stem(path),
        text,
        tokens: None,
    })
}

/// Claims from a dataset file (`{"text", ...}` per line), a claim-document
/// file (`{"patent_id", "claims"}` per line) or a plain-text claim set. Each
/// dataset record or claim becomes one sequence.
pub fn read_claims(path: &Path) -> Result<Vec<Sequence>> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if !is_jsonl(path) {
        let claims =
            parse_claims(&raw).with_context(|| format!("parsing claims in {}", path.display()))?;
        let id = stem(path);
        return Ok(claims
            .iter()
            .map(|c| Sequence {
                id: format!("{id}#{}", c.number),
                text: c.rendered(),
                tokens: None,
            })
            .collect());
    }

    let first: Option<Value> = raw
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .transpose()
        .with_context(|| format!("{}:1: not JSON", path.display()))?;
    if first.as_ref().is_some_and(|v| v.get("claims").is_some()) {
        let mut out = Vec::new();
        for (label, doc) in read_documents(path) {
            let doc = doc.with_context(|| label.clone())?;
            out.extend(doc.claims.iter().map(|c| Sequence {
                id: format!("{}#{}", doc.patent_id, c.number),
                text: c.rendered(),
                tokens: None,
            }));
        }
        return Ok(out);
    }

    let file_id = stem(path);
    let mut out = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let where_ = || format!("{}:{}", path.display(), n + 1);
        let v: Value = serde_json::from_str(line).with_context(where_)?;
        let Some(text) = v.get("text").and_then(Value::as_str) else {
            bail!("{}: record has no \"text\" field", where_());
        };
        let tokens = match v.get("tokens") {
            None | Some(Value::Null) => None,
            Some(t) => {
                Some(serde_json::from_value::<Vec<TokenId>>(t.clone()).with_context(where_)?)
            }
        };
        let id = v
            .get("id")
            .or_else(|| v.get("source_id"))
            .and_then(Value::as_str)
            .map(str::to_owned)
            .unwrap_or_else(|| format!("{file_id}:{}", n + 1));
        out.push(Sequence {
            id,
            text: text.to_owned(),
            tokens,
        });
    }
    Ok(out)
}

//! Patent claim parsing, dependency extraction and training-record expansion.
//!
//! A claim that refers to one earlier claim is paired with that parent as
//! `parent<|dep|>child`; chains become separate pairs and claims that refer
//! to several earlier claims are skipped (or rejected under the strict
//! policy). Independent claims are emitted on their own.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token::{
    TokenError, TokenId, Vocab, DEP_TAG, END_OF_CLAIM_TAG, REQUIRED_TAGS, START_OF_CLAIM_TAG,
};

#[derive(Debug, Error)]
pub enum ClaimsError {
    #[error("document contains no numbered claims")]
    NoClaims,
    #[error("claim numbering broken: expected claim {expected}, found claim {found}")]
    Numbering { expected: u32, found: u32 },
    #[error("claim {claim} refers to claim {target}, which does not precede it")]
    ForwardReference { claim: u32, target: u32 },
    #[error("claim {claim} is multiple dependent (depends on {depends_on:?})")]
    MultipleDependent { claim: u32, depends_on: Vec<u32> },
    #[error("malformed claim document: {0}")]
    Malformed(String),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub number: u32,
    /// Claim body without the leading `N.`.
    pub text: String,
    pub depends_on: Vec<u32>,
    pub multiple_dependent: bool,
}

impl ClaimRecord {
    pub fn new(number: u32, text: impl Into<String>, mut depends_on: Vec<u32>) -> Self {
        depends_on.sort_unstable();
        depends_on.dedup();
        let multiple_dependent = depends_on.len() > 1;
        Self {
            number,
            text: text.into(),
            depends_on,
            multiple_dependent,
        }
    }

    pub fn is_independent(&self) -> bool {
        self.depends_on.is_empty()
    }

    /// The claim as it appears in a claim set: `"N. body"`.
    pub fn rendered(&self) -> String {
        format!("{}. {}", self.number, self.text)
    }
}

/// A dependency phrase the extraction grammar did not recognize.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lint {
    pub claim: u32,
    pub message: String,
}

fn claim_start() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*(\d+)[ \t]*\.(?:[ \t]+|$)").unwrap())
}

fn reference() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let intro = r"(?:of|according\s+to|as\s+claimed\s+in)";
        Regex::new(&format!(
            r"(?i)\b{intro}\s+(?:any(?:\s+one)?\s+of\s+claims\s+(?P<lo>\d+)\s*(?:-|\x{{2013}}|\x{{2014}}|to)\s*(?P<hi>\d+)|claims\s+(?P<list>\d+(?:\s*,\s*\d+)*)\s*,?\s*(?:or|and)\s+(?P<last>\d+)|claim\s+(?P<one>\d+))\b"
        ))
        .unwrap()
    })
}

fn loose_reference() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bclaims?\s+\d").unwrap())
}

/// Text up to and including the first period that ends a sentence.
fn first_sentence(body: &str) -> &str {
    let bytes = body.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'.' && bytes.get(i + 1).is_none_or(|n| n.is_ascii_whitespace()) {
            return &body[..=i];
        }
    }
    body
}

/// Claim numbers referenced by the first sentence of a claim body, using the
/// closed reference grammar: "of claim N", "according to claim N",
/// "as claimed in claim N", "of claims N or M" (and comma lists), and
/// "of any (one) of claims N–M" / "N to M".
pub fn extract_dependencies(body: &str) -> Vec<u32> {
    let sentence = first_sentence(body);
    let mut deps = BTreeSet::new();
    let num = |s: &str| s.parse::<u32>().ok();
    for caps in reference().captures_iter(sentence) {
        if let (Some(lo), Some(hi)) = (caps.name("lo"), caps.name("hi")) {
            if let (Some(a), Some(b)) = (num(lo.as_str()), num(hi.as_str())) {
                deps.extend(a.min(b)..=a.max(b));
            }
        } else if let (Some(list), Some(last)) = (caps.name("list"), caps.name("last")) {
            deps.extend(list.as_str().split(',').filter_map(|s| num(s.trim())));
            deps.extend(num(last.as_str()));
        } else if let Some(one) = caps.name("one") {
            deps.extend(num(one.as_str()));
        }
    }
    deps.into_iter().collect()
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses claims laid out as paragraphs starting with `N.`.
pub fn parse_claims(document: &str) -> Result<Vec<ClaimRecord>, ClaimsError> {
    parse_claims_with_lints(document).map(|(claims, _)| claims)
}

pub fn parse_claims_with_lints(
    document: &str,
) -> Result<(Vec<ClaimRecord>, Vec<Lint>), ClaimsError> {
    let starts: Vec<(u32, usize, usize)> = claim_start()
        .captures_iter(document)
        .map(|c| {
            let m = c.get(0).unwrap();
            let n = c[1].parse::<u32>().unwrap_or(u32::MAX);
            (n, m.start(), m.end())
        })
        .collect();
    if starts.is_empty() {
        return Err(ClaimsError::NoClaims);
    }
    let mut claims = Vec::with_capacity(starts.len());
    let mut lints = Vec::new();
    for (i, &(number, _, body_start)) in starts.iter().enumerate() {
        let expected = i as u32 + 1;
        if number != expected {
            return Err(ClaimsError::Numbering {
                expected,
                found: number,
            });
        }
        let body_end = starts.get(i + 1).map_or(document.len(), |s| s.1);
        let body = normalize_ws(&document[body_start..body_end]);
        let deps = extract_dependencies(&body);
        if deps.is_empty() && loose_reference().is_match(first_sentence(&body)) {
            lints.push(Lint {
                claim: number,
                message: "unrecognized claim reference; treated as independent".into(),
            });
        }
        claims.push(ClaimRecord::new(number, body, deps));
    }
    validate_claims(&claims)?;
    Ok((claims, lints))
}

/// Checks numbering (1, 2, 3, ...) and that every reference points backward.
pub fn validate_claims(claims: &[ClaimRecord]) -> Result<(), ClaimsError> {
    if claims.is_empty() {
        return Err(ClaimsError::NoClaims);
    }
    for (i, c) in claims.iter().enumerate() {
        let expected = i as u32 + 1;
        if c.number != expected {
            return Err(ClaimsError::Numbering {
                expected,
                found: c.number,
            });
        }
        if let Some(&target) = c.depends_on.iter().find(|&&d| d == 0 || d >= c.number) {
            return Err(ClaimsError::ForwardReference {
                claim: c.number,
                target,
            });
        }
        if c.multiple_dependent != (c.depends_on.len() > 1) {
            return Err(ClaimsError::Malformed(format!(
                "claim {} multiple_dependent flag disagrees with its references",
                c.number
            )));
        }
    }
    Ok(())
}

/// One claim per line, in the layout `parse_claims` reads.
pub fn render_claims(claims: &[ClaimRecord]) -> String {
    claims.iter().map(|c| c.rendered() + "\n").collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultipleDependentPolicy {
    #[default]
    Skip,
    Strict,
}

impl FromStr for MultipleDependentPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "skip" => Ok(Self::Skip),
            "strict" => Ok(Self::Strict),
            other => Err(format!(
                "unknown multiple-dependent policy `{other}` (expected skip or strict)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReversalUnit {
    #[default]
    Token,
    Char,
}

impl FromStr for ReversalUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "token" => Ok(Self::Token),
            "char" => Ok(Self::Char),
            other => Err(format!(
                "unknown reversal unit `{other}` (expected token or char)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub patent_id: String,
    pub claims: Vec<u32>,
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub text: String,
    pub reversed: bool,
    pub provenance: Provenance,
    /// Exact token sequence, kept for token-reversed records, whose text
    /// would not re-encode to the same tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenId>>,
}

impl TrainingRecord {
    fn forward(patent_id: &str, text: String, claims: Vec<u32>) -> Self {
        Self {
            text,
            reversed: false,
            provenance: Provenance {
                patent_id: patent_id.to_owned(),
                claims,
            },
            tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedClaim {
    pub patent_id: String,
    pub claim: u32,
    pub depends_on: Vec<u32>,
}

impl fmt::Display for SkippedClaim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: claim {} is multiple dependent on {:?}; skipped",
            self.patent_id, self.claim, self.depends_on
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Expansion {
    pub records: Vec<TrainingRecord>,
    pub skipped: Vec<SkippedClaim>,
}

/// Independent claims as singletons, single-parent claims paired with their
/// direct parent.
pub fn expand_pairs(
    patent_id: &str,
    claims: &[ClaimRecord],
    policy: MultipleDependentPolicy,
) -> Result<Expansion, ClaimsError> {
    let mut out = Expansion::default();
    for c in claims {
        match c.depends_on.as_slice() {
            [] => out.records.push(TrainingRecord::forward(
                patent_id,
                c.rendered(),
                vec![c.number],
            )),
            &[parent] => {
                let p = claims.iter().find(|x| x.number == parent).ok_or(
                    ClaimsError::ForwardReference {
                        claim: c.number,
                        target: parent,
                    },
                )?;
                let text = format!("{}{DEP_TAG}{}", p.rendered(), c.rendered());
                out.records.push(TrainingRecord::forward(
                    patent_id,
                    text,
                    vec![parent, c.number],
                ));
            }
            deps => match policy {
                MultipleDependentPolicy::Strict => {
                    return Err(ClaimsError::MultipleDependent {
                        claim: c.number,
                        depends_on: deps.to_vec(),
                    })
                }
                MultipleDependentPolicy::Skip => {
                    let skipped = SkippedClaim {
                        patent_id: patent_id.to_owned(),
                        claim: c.number,
                        depends_on: deps.to_vec(),
                    };
                    log::warn!("{skipped}");
                    out.skipped.push(skipped);
                }
            },
        }
    }
    Ok(out)
}

/// Every claim as its own record, with no pairing.
pub fn raw_records(patent_id: &str, claims: &[ClaimRecord]) -> Vec<TrainingRecord> {
    claims
        .iter()
        .map(|c| TrainingRecord::forward(patent_id, c.rendered(), vec![c.number]))
        .collect()
}

/// Splits tokens into runs that each decode to whole characters, so a
/// reversal never separates the bytes of one character.
fn char_safe_groups(tokens: &[TokenId], vocab: &Vocab) -> Result<Vec<Vec<TokenId>>, ClaimsError> {
    let mut groups = Vec::new();
    let mut group = Vec::new();
    let mut bytes = Vec::new();
    for &t in tokens {
        group.push(t);
        bytes.extend_from_slice(vocab.token_bytes(t)?);
        if std::str::from_utf8(&bytes).is_ok() {
            groups.push(std::mem::take(&mut group));
            bytes.clear();
        }
    }
    if !group.is_empty() {
        groups.push(group);
    }
    Ok(groups)
}

fn reverse_chars_keeping_tags(text: &str) -> String {
    let mut parts: Vec<String> = vec![text.to_owned()];
    for tag in REQUIRED_TAGS {
        parts = parts
            .into_iter()
            .flat_map(|p| {
                if REQUIRED_TAGS.contains(&p.as_str()) {
                    return vec![p];
                }
                let mut pieces = Vec::new();
                for (i, piece) in p.split(tag).enumerate() {
                    if i > 0 {
                        pieces.push(tag.to_owned());
                    }
                    if !piece.is_empty() {
                        pieces.push(piece.to_owned());
                    }
                }
                pieces
            })
            .collect();
    }
    parts
        .iter()
        .rev()
        .map(|p| {
            if REQUIRED_TAGS.contains(&p.as_str()) {
                p.clone()
            } else {
                p.chars().rev().collect()
            }
        })
        .collect()
}

/// Appends a reversed duplicate of every record.
pub fn reverse_augment(
    records: &[TrainingRecord],
    vocab: &Vocab,
    unit: ReversalUnit,
) -> Result<Vec<TrainingRecord>, ClaimsError> {
    let mut out = records.to_vec();
    for r in records {
        let (text, tokens) = match unit {
            ReversalUnit::Token => {
                let tokens = match &r.tokens {
                    Some(t) => t.clone(),
                    None => vocab.encode(&r.text)?,
                };
                let reversed: Vec<TokenId> = char_safe_groups(&tokens, vocab)?
                    .into_iter()
                    .rev()
                    .flatten()
                    .collect();
                (vocab.decode_all(&reversed)?, Some(reversed))
            }
            ReversalUnit::Char => (reverse_chars_keeping_tags(&r.text), None),
        };
        out.push(TrainingRecord {
            text,
            reversed: !r.reversed,
            provenance: r.provenance.clone(),
            tokens,
        });
    }
    Ok(out)
}

/// Wraps a record in `<|start_of_claim|>` ... `<|end_of_claim|>`.
pub fn wrap_tags(record: &mut TrainingRecord, vocab: &Vocab) {
    record.text = format!("{START_OF_CLAIM_TAG}{}{END_OF_CLAIM_TAG}", record.text);
    if let Some(tokens) = &mut record.tokens {
        let tags = vocab.tags();
        tokens.insert(0, tags.start_of_claim);
        tokens.push(tags.end_of_claim);
    }
}

/// A patent's claim set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimDocument {
    pub patent_id: String,
    pub claims: Vec<ClaimRecord>,
}

#[derive(Deserialize)]
struct JsonClaim {
    num: u32,
    text: String,
    #[serde(default)]
    deps: Option<Vec<u32>>,
}

#[derive(Deserialize)]
struct JsonDocument {
    patent_id: String,
    claims: Vec<JsonClaim>,
}

fn document_from_json(line: &str) -> Result<ClaimDocument, ClaimsError> {
    let doc: JsonDocument =
        serde_json::from_str(line).map_err(|e| ClaimsError::Malformed(e.to_string()))?;
    let claims = doc
        .claims
        .into_iter()
        .map(|c| {
            let prefix = format!("{}.", c.num);
            let body = c.text.trim();
            let body = body
                .strip_prefix(&prefix)
                .filter(|rest| rest.is_empty() || rest.starts_with(char::is_whitespace))
                .unwrap_or(body);
            let body = normalize_ws(body);
            let deps = c.deps.unwrap_or_else(|| extract_dependencies(&body));
            ClaimRecord::new(c.num, body, deps)
        })
        .collect::<Vec<_>>();
    validate_claims(&claims)?;
    Ok(ClaimDocument {
        patent_id: doc.patent_id,
        claims,
    })
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "json")
    )
}

/// Reads one input file: JSON Lines of pre-parsed documents, or a plain-text
/// claim set whose patent id is the file stem. Each entry of the result is a
/// document or the error for the unit that failed (`path` or `path:line`).
pub fn read_documents(path: &Path) -> Vec<(String, Result<ClaimDocument, ClaimsError>)> {
    let label = path.display().to_string();
    let raw = match std::fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) => return vec![(label, Err(e.into()))],
    };
    if is_jsonl(path) {
        raw.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| (format!("{label}:{}", n + 1), document_from_json(l)))
            .collect()
    } else {
        let patent_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("document")
            .to_owned();
        let doc = parse_claims_with_lints(&raw).map(|(claims, lints)| {
            for l in lints {
                log::warn!("{patent_id}: claim {}: {}", l.claim, l.message);
            }
            ClaimDocument { patent_id, claims }
        });
        vec![(label, doc)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub expand: bool,
    pub reverse: bool,
    pub reverse_unit: ReversalUnit,
    pub tags: bool,
    pub policy: MultipleDependentPolicy,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            expand: true,
            reverse: false,
            reverse_unit: ReversalUnit::Token,
            tags: false,
            policy: MultipleDependentPolicy::Skip,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub total_chars: u64,
    pub min_chars: u64,
    pub max_chars: u64,
    pub mean_chars: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputError {
    pub input: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub options: Option<DatasetOptions>,
    pub inputs: usize,
    pub documents: usize,
    pub claims: usize,
    pub records: usize,
    pub forward_records: usize,
    pub reversed_records: usize,
    pub skipped_multiple_dependent: Vec<SkippedClaim>,
    pub errors: Vec<InputError>,
    pub size: SizeStats,
}

impl Manifest {
    /// True when inputs were given and none produced a document.
    pub fn all_failed(&self) -> bool {
        self.documents == 0 && !self.errors.is_empty()
    }
}

/// Builds dataset records for parsed documents, in input order.
pub fn assemble_records(
    documents: &[ClaimDocument],
    options: &DatasetOptions,
    vocab: &Vocab,
) -> Result<(Vec<TrainingRecord>, Vec<SkippedClaim>), ClaimsError> {
    let mut forward = Vec::new();
    let mut skipped = Vec::new();
    for doc in documents {
        if options.expand {
            let e = expand_pairs(&doc.patent_id, &doc.claims, options.policy)?;
            forward.extend(e.records);
            skipped.extend(e.skipped);
        } else {
            forward.extend(raw_records(&doc.patent_id, &doc.claims));
        }
    }
    let mut records = if options.reverse {
        reverse_augment(&forward, vocab, options.reverse_unit)?
    } else {
        forward
    };
    if options.tags {
        for r in &mut records {
            wrap_tags(r, vocab);
        }
    }
    Ok((records, skipped))
}

/// Reads every input, writes the dataset as JSON Lines to `out` and returns
/// the manifest. Per-document failures are recorded in the manifest; a strict
/// policy violation fails the document that contains it.
pub fn assemble_dataset<W: Write>(
    inputs: &[PathBuf],
    options: &DatasetOptions,
    vocab: &Vocab,
    mut out: W,
) -> Result<Manifest, ClaimsError> {
    let mut manifest = Manifest {
        options: Some(options.clone()),
        inputs: inputs.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for path in inputs {
        for (label, doc) in read_documents(path) {
            let built = doc.and_then(|d| {
                let (r, s) = assemble_records(std::slice::from_ref(&d), options, vocab)?;
                Ok((d, r, s))
            });
            match built {
                Ok((doc, r, s)) => {
                    manifest.documents += 1;
                    manifest.claims += doc.claims.len();
                    records.extend(r);
                    manifest.skipped_multiple_dependent.extend(s);
                }
                Err(e) => manifest.errors.push(InputError {
                    input: label,
                    error: e.to_string(),
                }),
            }
        }
    }
    for r in &records {
        serde_json::to_writer(&mut out, r).map_err(|e| ClaimsError::Malformed(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    manifest.records = records.len();
    manifest.reversed_records = records.iter().filter(|r| r.reversed).count();
    manifest.forward_records = manifest.records - manifest.reversed_records;
    let lens: Vec<u64> = records
        .iter()
        .map(|r| r.text.chars().count() as u64)
        .collect();
    if !lens.is_empty() {
        let total: u64 = lens.iter().sum();
        manifest.size = SizeStats {
            total_chars: total,
            min_chars: *lens.iter().min().unwrap(),
            max_chars: *lens.iter().max().unwrap(),
            mean_chars: total as f64 / lens.len() as f64,
        };
    }
    Ok(manifest)
}

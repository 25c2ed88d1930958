//! Evaluation tables, per-position rank histograms, saliency HTML and the
//! inspection dump.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::metric::{
    ae_percent_tenths, ae_ratio, format_tenths, Bucket, KeystrokeBreakdown, SequenceTrace,
};
use crate::predict::Candidate;
use crate::token::Vocab;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no rows to report")]
    Empty,
    #[error("row `{label}` has total w/o autocomplete {found}, expected {expected}: rows were evaluated on different texts")]
    MismatchedTotals {
        label: String,
        expected: u64,
        found: u64,
    },
    #[error("row `{label}` is internally inconsistent: {reason}")]
    Inconsistent { label: String, reason: String },
    #[error("trace `{0}` has no stored top-k lists; re-run evaluate with --capture-topk")]
    MissingTopk(String),
    #[error("unknown table format `{0}` (expected csv, json or text)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
    Text,
}

impl std::str::FromStr for TableFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "text" => Ok(Self::Text),
            other => Err(ReportError::UnknownFormat(other.to_owned())),
        }
    }
}

/// One table row in display form. First-token keystrokes are typed by hand
/// and so are counted in `out`; `total_with == top10 + out` always holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub ae_percent: String,
    pub total_with: u64,
    pub top10: u64,
    pub out: u64,
    pub top1: u64,
    pub total_without: u64,
    pub best: bool,
}

pub const TABLE_CSV_HEADER: &str =
    "label,ae_ratio_percent,total_with,top10,out_of_top10,top1,total_without,best";

/// Builds checked table rows. The row with the fewest keystrokes (highest AE)
/// is flagged; ties flag every tied row.
pub fn table_rows(rows: &[(String, KeystrokeBreakdown)]) -> Result<Vec<TableRow>, ReportError> {
    let expected = rows.first().ok_or(ReportError::Empty)?.1.total_without;
    let mut out = Vec::with_capacity(rows.len());
    for (label, b) in rows {
        let inconsistent = |reason: String| ReportError::Inconsistent {
            label: label.clone(),
            reason,
        };
        if b.total_without != expected {
            return Err(ReportError::MismatchedTotals {
                label: label.clone(),
                expected,
                found: b.total_without,
            });
        }
        let out_keys = b.keys_out + b.keys_first;
        if b.keys_top10 + out_keys != b.total_with {
            return Err(inconsistent(format!(
                "top10 {} + out {} != total w/ {}",
                b.keys_top10, out_keys, b.total_with
            )));
        }
        if b.keys_top1 > b.keys_top10 {
            return Err(inconsistent(
                "top1 keystrokes exceed top10 keystrokes".into(),
            ));
        }
        let tenths = if b.total_without == 0 {
            0
        } else {
            let recomputed =
                ae_ratio(b.total_with, b.total_without).map_err(|e| inconsistent(e.to_string()))?;
            if (recomputed - b.ae_ratio).abs() > 1e-12 {
                return Err(inconsistent(format!(
                    "stored AE {} differs from recomputed {recomputed}",
                    b.ae_ratio
                )));
            }
            ae_percent_tenths(b.total_with, b.total_without)
                .map_err(|e| inconsistent(e.to_string()))?
        };
        out.push(TableRow {
            label: label.clone(),
            ae_percent: format_tenths(tenths),
            total_with: b.total_with,
            top10: b.keys_top10,
            out: out_keys,
            top1: b.keys_top1,
            total_without: b.total_without,
            best: false,
        });
    }
    let best = out.iter().map(|r| r.total_with).min().unwrap_or(0);
    for r in &mut out {
        r.best = r.total_with == best;
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Renders the comparison table.
pub fn emit_tables(
    rows: &[(String, KeystrokeBreakdown)],
    format: TableFormat,
) -> Result<String, ReportError> {
    let rows = table_rows(rows)?;
    let mut s = String::new();
    match format {
        TableFormat::Csv => {
            s.push_str(TABLE_CSV_HEADER);
            s.push('\n');
            for r in &rows {
                writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    csv_field(&r.label),
                    r.ae_percent.trim_end_matches('%'),
                    r.total_with,
                    r.top10,
                    r.out,
                    r.top1,
                    r.total_without,
                    r.best
                )
                .unwrap();
            }
        }
        TableFormat::Json => {
            s = serde_json::to_string_pretty(&rows).expect("rows serialize");
            s.push('\n');
        }
        TableFormat::Text => {
            let header = [
                "label",
                "AE ratio",
                "total w/",
                "top 10",
                "out of top 10",
                "top 1",
                "total w/o",
            ];
            let cells: Vec<[String; 7]> = rows
                .iter()
                .map(|r| {
                    [
                        if r.best {
                            format!("{} *", r.label)
                        } else {
                            r.label.clone()
                        },
                        r.ae_percent.clone(),
                        r.total_with.to_string(),
                        r.top10.to_string(),
                        r.out.to_string(),
                        r.top1.to_string(),
                        r.total_without.to_string(),
                    ]
                })
                .collect();
            let mut widths = header.map(str::len);
            for row in &cells {
                for (w, c) in widths.iter_mut().zip(row) {
                    *w = (*w).max(c.len());
                }
            }
            let line = |cols: Vec<&str>| {
                cols.iter()
                    .enumerate()
                    .map(|(i, c)| {
                        if i == 0 {
                            format!("{c:<w$}", w = widths[i])
                        } else {
                            format!("{c:>w$}", w = widths[i])
                        }
                    })
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            writeln!(s, "{}", line(header.to_vec())).unwrap();
            for row in &cells {
                writeln!(s, "{}", line(row.iter().map(String::as_str).collect())).unwrap();
            }
            s.push_str("* best AE ratio\n");
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PositionCounts {
    /// 1-based token position.
    pub position: usize,
    pub top1: u64,
    pub top2_10: u64,
    pub out: u64,
    pub sequences_reaching: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PositionHistogram {
    /// Rows for positions that at least one trace reaches, in order.
    pub rows: Vec<PositionCounts>,
}

pub const HISTOGRAM_CSV_HEADER: &str =
    "position,top1,top2_10,out,sequences_reaching,top1_pct,top2_10_pct,out_pct";

impl PositionHistogram {
    pub fn to_csv(&self) -> String {
        let pct = |n: u64, d: u64| match ae_percent_tenths(d - n, d) {
            Ok(t) => format_tenths(t).trim_end_matches('%').to_owned(),
            Err(_) => "0.0".into(),
        };
        let mut s = String::from(HISTOGRAM_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let d = r.sequences_reaching;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.position,
                r.top1,
                r.top2_10,
                r.out,
                d,
                pct(r.top1, d),
                pct(r.top2_10, d),
                pct(r.out, d)
            )
            .unwrap();
        }
        s
    }
}

/// Bucket counts per token position. Position `p` is the `p`-th ranked token
/// of a trace (outcome index `p`; the first token has no rank). Positions no
/// trace reaches are omitted. `max_position = None` keeps every position.
pub fn rank_histogram(traces: &[SequenceTrace], max_position: Option<usize>) -> PositionHistogram {
    let longest = traces
        .iter()
        .map(|t| t.outcomes.len().saturating_sub(1))
        .max()
        .unwrap_or(0);
    let limit = max_position.map_or(longest, |m| m.min(longest));
    let mut rows: Vec<PositionCounts> = (1..=limit)
        .map(|position| PositionCounts {
            position,
            ..Default::default()
        })
        .collect();
    for t in traces {
        for o in t.outcomes.iter().skip(1).take(limit) {
            let row = &mut rows[o.position - 1];
            match o.bucket {
                Bucket::Top1 => row.top1 += 1,
                Bucket::Top2To10 => row.top2_10 += 1,
                Bucket::Out => row.out += 1,
                // a special tag at position 0 pushes the first typed token later
                Bucket::FirstToken => continue,
            }
            row.sequences_reaching += 1;
        }
    }
    rows.retain(|r| r.sequences_reaching > 0);
    PositionHistogram { rows }
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn candidate_text(c: &Candidate, vocab: Option<&Vocab>) -> String {
    match (&c.text, vocab) {
        (Some(t), _) => t.clone(),
        (None, Some(v)) => v.decode(c.id).map(|s| s.into_owned()).unwrap_or_default(),
        (None, None) => format!("#{}", c.id.0),
    }
}

const SALIENCY_CSS: &str = "body{font-family:monospace;margin:2em;line-height:1.6}\n\
.text{white-space:pre-wrap}\n\
.tok{border-radius:2px}\n\
.first{background:#e8e8e8}\n\
.top1{background:#b9f6ca}\n\
.top2_10{background:#2e7d32;color:#fff}\n\
.out{background:#e53935;color:#fff}\n";

/// Self-contained page with one span per token. Span texts concatenate to the
/// trace text.
pub fn render_saliency_html(trace: &SequenceTrace, vocab: Option<&Vocab>) -> String {
    let total_with = trace.total_with();
    let total_without = trace.total_without();
    let ae = if total_without == 0 {
        "0.0%".to_owned()
    } else {
        format_tenths(ae_percent_tenths(total_with, total_without).unwrap_or(0))
    };
    let mut s = String::new();
    s.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n");
    writeln!(s, "<title>{}</title>", escape_html(&trace.source_id)).unwrap();
    writeln!(s, "<style>\n{SALIENCY_CSS}</style>\n</head>\n<body>").unwrap();
    writeln!(s, "<h1>{}</h1>", escape_html(&trace.source_id)).unwrap();
    writeln!(
        s,
        "<p class=\"summary\">AE ratio: {ae} ({total_with} keystrokes with autocomplete, {total_without} without)</p>"
    )
    .unwrap();
    s.push_str("<div class=\"text\">");
    for (i, o) in trace.outcomes.iter().enumerate() {
        let keys = match o.keystrokes {
            1 => "1 keystroke".to_owned(),
            n => format!("{n} keystrokes"),
        };
        let mut tip = match o.rank {
            Some(r) => format!("rank {r}, {keys}"),
            None => format!("first token, {keys}"),
        };
        if let Some(topk) = trace
            .stored_topk
            .as_ref()
            .and_then(|t| t.get(i))
            .filter(|t| !t.is_empty())
        {
            tip.push_str("\ntop:");
            for (j, c) in topk.iter().take(10).enumerate() {
                write!(
                    tip,
                    "\n{}. {:?} {:.4}",
                    j + 1,
                    candidate_text(c, vocab),
                    c.prob
                )
                .unwrap();
            }
        }
        write!(
            s,
            "<span class=\"tok {}\" title=\"{}\">{}</span>",
            o.bucket.css_class(),
            escape_html(&tip),
            escape_html(&o.text)
        )
        .unwrap();
    }
    s.push_str("</div>\n</body>\n</html>\n");
    s
}

/// Per-position inspection data for an offline viewer.
pub fn dump_inspection(
    trace: &SequenceTrace,
    vocab: Option<&Vocab>,
) -> Result<serde_json::Value, ReportError> {
    let topk = trace
        .stored_topk
        .as_ref()
        .ok_or_else(|| ReportError::MissingTopk(trace.source_id.clone()))?;
    let mut positions = Vec::with_capacity(trace.outcomes.len());
    for (i, o) in trace.outcomes.iter().enumerate() {
        let list: Vec<_> = topk
            .get(i)
            .map(|l| {
                l.iter()
                    .map(|c| json!({"id": c.id, "text": candidate_text(c, vocab), "prob": c.prob}))
                    .collect()
            })
            .unwrap_or_default();
        let continuation = trace
            .continuations
            .as_ref()
            .and_then(|c| c.get(i))
            .filter(|_| o.rank.is_some())
            .map(|c| json!({"tokens": c.tokens, "text": c.text}));
        positions.push(json!({
            "position": o.position,
            "prompt_len": o.position,
            "token": o.token,
            "text": o.text,
            "bucket": o.bucket,
            "keystrokes": o.keystrokes,
            "rank": o.rank,
            "prob": o.prob,
            "topk": list,
            "continuation": continuation,
        }));
    }
    Ok(json!({
        "schema": 1,
        "source_id": trace.source_id,
        "cutoff": trace.cutoff,
        "first_token": trace.first_token,
        "keystroke_unit": trace.keystroke_unit,
        "total_with": trace.total_with(),
        "total_without": trace.total_without(),
        "positions": positions,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{aggregate, evaluate_sequence, EvalOptions};
    use crate::predict::ScriptedPredictor;
    use crate::token::TokenId;

    fn breakdown(total_with: u64, total_without: u64, top10: u64, top1: u64) -> KeystrokeBreakdown {
        KeystrokeBreakdown {
            total_with,
            total_without,
            keys_top10: top10,
            keys_out: total_with - top10,
            keys_top1: top1,
            keys_first: 0,
            ae_ratio: ae_ratio(total_with, total_without).unwrap(),
            mrr: 0.0,
            bucket_counts: Default::default(),
            sequences: 1,
        }
    }

    fn trace(ranks: &[u32]) -> SequenceTrace {
        let vocab = Vocab::byte_level();
        let tokens: Vec<TokenId> = "abcdefgh"
            .bytes()
            .take(ranks.len() + 1)
            .map(|b| TokenId(b as u32))
            .collect();
        let p = ScriptedPredictor::new(ranks.to_vec(), vocab.len()).unwrap();
        evaluate_sequence(&p, &tokens, &vocab, "t", &EvalOptions::default()).unwrap()
    }

    #[test]
    fn table_row_percent() {
        let rows = vec![("456M".to_owned(), breakdown(277800, 643646, 160000, 90000))];
        let t = table_rows(&rows).unwrap();
        assert_eq!(t[0].ae_percent, "56.8%");
        assert!(t[0].best);
    }

    #[test]
    fn mismatched_totals_rejected() {
        let rows = vec![
            ("a".to_owned(), breakdown(10, 20, 5, 1)),
            ("b".to_owned(), breakdown(10, 21, 5, 1)),
        ];
        assert!(matches!(
            table_rows(&rows),
            Err(ReportError::MismatchedTotals { .. })
        ));
    }

    #[test]
    fn inconsistent_row_rejected() {
        let mut b = breakdown(10, 20, 5, 1);
        b.keys_out = 1;
        assert!(matches!(
            table_rows(&[("a".to_owned(), b)]),
            Err(ReportError::Inconsistent { .. })
        ));
    }

    #[test]
    fn identical_rows_are_identical() {
        let b = breakdown(401, 490, 130, 40);
        let rows = vec![("x".to_owned(), b.clone()), ("x".to_owned(), b)];
        for f in [TableFormat::Csv, TableFormat::Json, TableFormat::Text] {
            let a = emit_tables(&rows, f).unwrap();
            assert_eq!(a, emit_tables(&rows, f).unwrap());
        }
        let csv = emit_tables(&rows, TableFormat::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], lines[2]);
        assert_eq!(lines[1], "x,18.2,401,130,271,40,490,true");
    }

    #[test]
    fn histogram_counts() {
        let traces = vec![trace(&[1]), trace(&[37])];
        let h = rank_histogram(&traces, None);
        assert_eq!(h.rows.len(), 1);
        let r = h.rows[0];
        assert_eq!(
            (r.position, r.top1, r.top2_10, r.out, r.sequences_reaching),
            (1, 1, 0, 1, 2)
        );
        let h = rank_histogram(&[trace(&[1, 2, 3]), trace(&[4])], Some(50));
        assert_eq!(h.rows.len(), 3);
        assert_eq!(h.rows[2].sequences_reaching, 1);
        assert_eq!(h.to_csv().lines().next().unwrap(), HISTOGRAM_CSV_HEADER);
    }

    #[test]
    fn saliency_classes_and_text() {
        let t = trace(&[1, 2, 37]);
        let html = render_saliency_html(&t, None);
        for class in ["tok first", "tok top1", "tok top2_10", "tok out"] {
            assert_eq!(
                html.matches(&format!("class=\"{class}\"")).count(),
                1,
                "{class}"
            );
        }
        assert!(html.contains(&format!(
            "AE ratio: {}",
            format_tenths(aggregate(&[t]).ae_tenths())
        )));
        assert!(!render_saliency_html(&trace(&[1, 1]), None).contains("tok out"));
    }

    #[test]
    fn text_is_escaped() {
        let vocab = Vocab::byte_level();
        let tokens: Vec<TokenId> = "<a&".bytes().map(|b| TokenId(b as u32)).collect();
        let p = ScriptedPredictor::new(vec![1, 1], vocab.len()).unwrap();
        let t = evaluate_sequence(&p, &tokens, &vocab, "x", &EvalOptions::default()).unwrap();
        let html = render_saliency_html(&t, None);
        assert!(html.contains(">&lt;</span>"));
        assert!(html.contains(">&amp;</span>"));
    }

    #[test]
    fn dump_needs_topk() {
        assert!(matches!(
            dump_inspection(&trace(&[1]), None),
            Err(ReportError::MissingTopk(_))
        ));
        let vocab = Vocab::byte_level();
        let tokens: Vec<TokenId> = "abcd".bytes().map(|b| TokenId(b as u32)).collect();
        let p = ScriptedPredictor::new(vec![1, 3, 1], vocab.len()).unwrap();
        let opts = EvalOptions {
            capture_topk: Some(10),
            ..Default::default()
        };
        let t = evaluate_sequence(&p, &tokens, &vocab, "x", &opts).unwrap();
        let d = dump_inspection(&t, Some(&vocab)).unwrap();
        assert_eq!(d["schema"], 1);
        let positions = d["positions"].as_array().unwrap();
        assert_eq!(positions.len(), 4);
        assert_eq!(positions.iter().filter(|p| !p["rank"].is_null()).count(), 3);
        assert_eq!(positions[1]["rank"], 1);
        assert_eq!(positions[1]["topk"][0]["text"], positions[1]["text"]);
    }
}

//! JSON extraction from raw model responses, strict and repaired parsing,
//! and key-missing accounting.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bleu::bleu4;
use crate::config::{flatten_keys, render_value};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum IntegrityError {
    #[error("no JSON object found in response")]
    NoJsonFound,
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unrepairable JSON ({message})")]
    Unrepairable { original: String, message: String },
}

/// Pulls the JSON candidate out of a response: the first fenced code block
/// holding a `{`, otherwise the first `{` through its balanced closing brace
/// (or through the end of the text when it never closes).
pub fn extract_json(response: &str) -> Result<&str, IntegrityError> {
    if let Some(block) = first_fenced_block(response) {
        if block.contains('{') {
            return Ok(block.trim());
        }
    }
    let start = response.find('{').ok_or(IntegrityError::NoJsonFound)?;
    let tail = &response[start..];
    Ok(match balanced_end(tail) {
        Some(end) => &tail[..end],
        None => tail.trim_end(),
    })
}

fn first_fenced_block(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    // Skip the info string (e.g. `json`) up to the end of the line.
    let body_start = after.find('\n').map(|i| i + 1)?;
    let body = &after[body_start..];
    Some(match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    })
}

/// Byte index just past the brace closing the object opened at `text[0]`.
fn balanced_end(text: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Standard-conformant JSON parse; any deviation is a syntax error.
pub fn strict_parse(text: &str) -> Result<Value, IntegrityError> {
    serde_json::from_str(text).map_err(|e| IntegrityError::Syntax {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "fix", rename_all = "kebab-case")]
pub enum RepairAction {
    TrailingComma { count: usize },
    CloseBrace { count: usize },
    CloseBracket { count: usize },
    ControlChar { count: usize },
}

impl fmt::Display for RepairAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (name, n) = match *self {
            RepairAction::TrailingComma { count } => ("trailing-comma", count),
            RepairAction::CloseBrace { count } => ("close-brace", count),
            RepairAction::CloseBracket { count } => ("close-bracket", count),
            RepairAction::ControlChar { count } => ("control-char", count),
        };
        write!(f, "{name}×{n}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repaired {
    pub value: Value,
    pub text: String,
    pub log: Vec<RepairAction>,
}

/// Calls `f(index, char)` for every char outside string literals; `in_str`
/// chars are passed with `true`.
fn scan(text: &str, mut f: impl FnMut(usize, char, bool)) -> bool {
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if in_string {
            let closes = !escaped && c == '"';
            escaped = !escaped && c == '\\';
            if closes {
                in_string = false;
                f(i, c, false);
            } else {
                f(i, c, true);
            }
        } else {
            if c == '"' {
                in_string = true;
            }
            f(i, c, false);
        }
    }
    in_string
}

fn strip_trailing_commas_once(text: &str) -> (String, usize) {
    let mut drop = Vec::new();
    scan(text, |i, c, in_str| {
        if !in_str && c == ',' {
            let next = text[i + 1..].trim_start().chars().next();
            if matches!(next, None | Some('}') | Some(']')) {
                drop.push(i);
            }
        }
    });
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for &i in &drop {
        out.push_str(&text[last..i]);
        last = i + 1;
    }
    out.push_str(&text[last..]);
    (out, drop.len())
}

fn strip_trailing_commas(text: &str) -> (String, usize) {
    let mut current = text.to_string();
    let mut total = 0;
    loop {
        let (next, n) = strip_trailing_commas_once(&current);
        if n == 0 {
            return (current, total);
        }
        total += n;
        current = next;
    }
}

/// Closers needed to balance `text`, or `None` when the nesting is broken
/// (a mismatched or surplus closer, or an unterminated string).
fn missing_closers(text: &str) -> Option<Vec<char>> {
    let mut stack = Vec::new();
    let mut broken = false;
    let open_string = scan(text, |_, c, in_str| {
        if in_str || broken {
            return;
        }
        match c {
            '{' => stack.push('}'),
            '[' => stack.push(']'),
            '}' | ']' if stack.pop() != Some(c) => broken = true,
            _ => {}
        }
    });
    if broken || open_string {
        return None;
    }
    stack.reverse();
    Some(stack)
}

fn strip_control_chars(text: &str) -> (String, usize) {
    let mut out = String::with_capacity(text.len());
    let mut count = 0;
    scan(text, |_, c, in_str| {
        if in_str && c.is_control() && (c as u32) < 0x20 {
            count += 1;
        } else {
            out.push(c);
        }
    });
    (out, count)
}

/// Applies the repair rules in order: trailing commas, missing closers,
/// control characters inside strings. Text that already strict-parses is
/// returned untouched.
pub fn repair_text(text: &str) -> (String, Vec<RepairAction>) {
    if strict_parse(text).is_ok() {
        return (text.to_string(), Vec::new());
    }
    let mut log = Vec::new();

    let (mut current, commas) = strip_trailing_commas(text);
    if commas > 0 {
        log.push(RepairAction::TrailingComma { count: commas });
    }

    if let Some(closers) = missing_closers(&current) {
        let braces = closers.iter().filter(|&&c| c == '}').count();
        let brackets = closers.len() - braces;
        current.extend(closers);
        if braces > 0 {
            log.push(RepairAction::CloseBrace { count: braces });
        }
        if brackets > 0 {
            log.push(RepairAction::CloseBracket { count: brackets });
        }
    }

    let (stripped, ctrl) = strip_control_chars(&current);
    if ctrl > 0 {
        log.push(RepairAction::ControlChar { count: ctrl });
        current = stripped;
    }
    (current, log)
}

/// Parses after repair; fails when the repaired text still does not
/// strict-parse.
pub fn repair_parse(text: &str) -> Result<Repaired, IntegrityError> {
    let (fixed, log) = repair_text(text);
    match strict_parse(&fixed) {
        Ok(value) => Ok(Repaired {
            value,
            text: fixed,
            log,
        }),
        Err(e) => Err(IntegrityError::Unrepairable {
            original: text.to_string(),
            message: e.to_string(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyMissing {
    pub missing: Vec<String>,
    pub rate: f64,
    /// Keys the ground truth does not have; flagged, not penalised.
    pub extra: Vec<String>,
}

/// Key for the model's free-text reasoning; never counted as extra.
pub const REASONING_KEY: &str = "reasoning";

pub fn key_missing(target: &Value, truth_keys: &[String]) -> KeyMissing {
    let present = flatten_keys(target);
    let present_set: HashSet<&str> = present.iter().map(String::as_str).collect();
    let truth_set: HashSet<&str> = truth_keys.iter().map(String::as_str).collect();
    let missing: Vec<String> = truth_keys
        .iter()
        .filter(|k| !present_set.contains(k.as_str()))
        .cloned()
        .collect();
    let extra = present
        .iter()
        .filter(|k| k.as_str() != REASONING_KEY && !truth_set.contains(k.as_str()))
        .cloned()
        .collect();
    let rate = if truth_keys.is_empty() {
        0.0
    } else {
        missing.len() as f64 / truth_keys.len() as f64
    };
    KeyMissing { missing, rate, extra }
}

/// Per-response integrity outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub json_found: bool,
    pub strict_parse_ok: bool,
    pub repaired_parse_ok: bool,
    pub repair_log: Vec<RepairAction>,
    pub syntax_error: Option<String>,
    /// Defined whenever a document was obtained (strictly or after repair)
    /// and ground-truth keys were supplied.
    pub missing_keys: Option<Vec<String>>,
    pub key_missing_rate: Option<f64>,
    pub extra_keys: Vec<String>,
    pub bleu4: Option<f64>,
}

/// Text scored by BLEU: the parsed document without its reasoning member,
/// re-rendered in the model's own key order; the raw extracted text when
/// nothing parsed.
pub fn bleu_candidate(doc: Option<&Value>, extracted: &str) -> String {
    match doc {
        Some(Value::Object(map)) => {
            let mut m = map.clone();
            m.shift_remove(REASONING_KEY);
            render_value(&Value::Object(m))
        }
        Some(v) => render_value(v),
        None => extracted.to_string(),
    }
}

/// Runs extraction, strict parse, repair and the key/BLEU measures on one
/// response. Returns the report and the best available document.
pub fn assess(
    response: &str,
    truth_keys: Option<&[String]>,
    reference_text: Option<&str>,
) -> (IntegrityReport, Option<Value>) {
    let mut report = IntegrityReport {
        json_found: false,
        strict_parse_ok: false,
        repaired_parse_ok: false,
        repair_log: Vec::new(),
        syntax_error: None,
        missing_keys: None,
        key_missing_rate: None,
        extra_keys: Vec::new(),
        bleu4: None,
    };
    let extracted = match extract_json(response) {
        Ok(t) => {
            report.json_found = true;
            t
        }
        Err(e) => {
            report.syntax_error = Some(e.to_string());
            report.bleu4 = reference_text.map(|r| bleu4(response, r));
            return (report, None);
        }
    };
    let doc = match strict_parse(extracted) {
        Ok(v) => {
            report.strict_parse_ok = true;
            report.repaired_parse_ok = true;
            Some(v)
        }
        Err(e) => {
            report.syntax_error = Some(e.to_string());
            match repair_parse(extracted) {
                Ok(r) => {
                    report.repaired_parse_ok = true;
                    report.repair_log = r.log;
                    Some(r.value)
                }
                Err(_) => None,
            }
        }
    };
    if let (Some(d), Some(keys)) = (&doc, truth_keys) {
        let km = key_missing(d, keys);
        report.key_missing_rate = Some(km.rate);
        report.missing_keys = Some(km.missing);
        report.extra_keys = km.extra;
    }
    report.bleu4 = reference_text.map(|r| bleu4(&bleu_candidate(doc.as_ref(), extracted), r));
    (report, doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn extract_examples() {
        assert_eq!(extract_json("```json\n{\"a\":1}\n```").unwrap(), "{\"a\":1}");
        assert_eq!(extract_json("Here is the result: {\"a\":1} done").unwrap(), "{\"a\":1}");
        assert_eq!(extract_json("I cannot answer."), Err(IntegrityError::NoJsonFound));
    }

    #[test]
    fn extract_handles_braces_in_strings_and_truncation() {
        assert_eq!(
            extract_json(r#"x {"a":"}{","b":{"c":2}} y {"z":0}"#).unwrap(),
            r#"{"a":"}{","b":{"c":2}}"#
        );
        assert_eq!(extract_json("so: {\"a\":{\"b\":2}\n").unwrap(), "{\"a\":{\"b\":2}");
        assert_eq!(extract_json("```json\n{\"a\":1,").unwrap(), "{\"a\":1,");
        // A fence without JSON falls back to scanning the whole response.
        assert_eq!(extract_json("```\nnone\n```\n{\"a\":1}").unwrap(), "{\"a\":1}");
    }

    #[test]
    fn strict_rejects_comma_and_brace_defects() {
        assert!(matches!(
            strict_parse(r#"{"a":1,}"#),
            Err(IntegrityError::Syntax { .. })
        ));
        assert!(matches!(strict_parse(r#"{"a":1"#), Err(IntegrityError::Syntax { .. })));
        assert_eq!(strict_parse(r#"{"a":1}"#).unwrap(), json!({"a":1}));
    }

    #[test]
    fn syntax_error_offset_points_into_text() {
        let text = "{\n  \"a\": 1,\n  \"b\": oops\n}";
        let Err(IntegrityError::Syntax { offset, .. }) = strict_parse(text) else {
            panic!("expected syntax error")
        };
        assert_eq!(&text[offset..offset + 1], "o");
    }

    #[test]
    fn repair_examples() {
        let r = repair_parse(r#"{"a":1,}"#).unwrap();
        assert_eq!(r.value, json!({"a":1}));
        assert_eq!(r.log, [RepairAction::TrailingComma { count: 1 }]);

        let r = repair_parse(r#"{"a":{"b":2}"#).unwrap();
        assert_eq!(r.value, json!({"a":{"b":2}}));
        assert_eq!(r.log, [RepairAction::CloseBrace { count: 1 }]);
        assert_eq!(r.log[0].to_string(), "close-brace×1");

        // No rule touches a bare identifier, so the text stays broken.
        let (fixed, log) = repair_text(r#"{"a": oops}"#);
        assert_eq!(fixed, r#"{"a": oops}"#);
        assert!(log.is_empty());
        assert!(matches!(
            repair_parse(r#"{"a": oops}"#),
            Err(IntegrityError::Unrepairable { original, .. }) if original == r#"{"a": oops}"#
        ));
    }

    #[test]
    fn repair_combined_defects() {
        let r = repair_parse("{\"a\":[1,2,\n\"b\":{\"c\":\"x\u{1}y\",").unwrap_err();
        assert!(matches!(r, IntegrityError::Unrepairable { .. }));

        let r = repair_parse("{\"a\":[1,2,],\"s\":\"x\u{1}y\",\"b\":{\"c\":[3,").unwrap();
        assert_eq!(r.value, json!({"a":[1,2],"s":"xy","b":{"c":[3]}}));
        assert_eq!(
            r.log,
            [
                RepairAction::TrailingComma { count: 2 },
                RepairAction::CloseBrace { count: 2 },
                RepairAction::CloseBracket { count: 1 },
                RepairAction::ControlChar { count: 1 },
            ]
        );
    }

    #[test]
    fn repair_leaves_valid_and_string_commas_alone() {
        let t = r#"{"a":"1,}","b":[1, 2]}"#;
        assert_eq!(repair_text(t), (t.to_string(), vec![]));
        let r = repair_parse(r#"{"a":"x,]", "b":2,}"#).unwrap();
        assert_eq!(r.value, json!({"a":"x,]","b":2}));
    }

    #[test]
    fn key_missing_examples() {
        let truth: Vec<String> = ["a", "b", "b.c"].iter().map(|s| s.to_string()).collect();
        let full = json!({"reasoning":"r","a":1,"b":{"c":2}});
        let km = key_missing(&full, &truth);
        assert_eq!(km.rate, 0.0);
        assert!(km.extra.is_empty());

        let partial = json!({"a":1,"z":3});
        let km = key_missing(&partial, &truth);
        assert_eq!(km.missing, ["b", "b.c"]);
        assert!((km.rate - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(km.extra, ["z"]);
    }

    #[test]
    fn key_missing_rate_arithmetic() {
        let truth: Vec<String> = (0..60).map(|i| format!("k{i}")).collect();
        let mut doc = serde_json::Map::new();
        for k in &truth[3..] {
            doc.insert(k.clone(), json!(0));
        }
        let km = key_missing(&Value::Object(doc), &truth);
        assert_eq!(km.missing.len(), 3);
        assert!((km.rate - 0.05).abs() < 1e-15);
    }

    #[test]
    fn assess_reports_strict_failure_but_keeps_repaired_doc() {
        let keys = vec!["a".to_string()];
        let (r, doc) = assess("```json\n{\"a\":1,}\n```", Some(&keys), Some("{\"a\": 1}"));
        assert!(r.json_found && !r.strict_parse_ok && r.repaired_parse_ok);
        assert_eq!(r.key_missing_rate, Some(0.0));
        assert_eq!(doc, Some(json!({"a":1})));
        assert_eq!(r.bleu4, Some(1.0));

        let (r, doc) = assess("nothing here", Some(&keys), None);
        assert!(!r.json_found && !r.repaired_parse_ok);
        assert!(r.missing_keys.is_none() && doc.is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn repair_is_idempotent(t in r#"[{}\[\],:"ab1 \\]{0,30}"#) {
                let (once, _) = repair_text(&t);
                let (twice, _) = repair_text(&once);
                if strict_parse(&once).is_ok() {
                    prop_assert_eq!(&twice, &once);
                }
                let (again, _) = repair_text(&twice);
                prop_assert_eq!(again, twice);
            }

            #[test]
            fn deleting_keys_never_lowers_rate(mask in prop::collection::vec(any::<bool>(), 6), extra in 0usize..6) {
                let truth: Vec<String> = (0..6).map(|i| format!("k{i}")).collect();
                let mut doc = serde_json::Map::new();
                for (k, keep) in truth.iter().zip(&mask) {
                    if *keep { doc.insert(k.clone(), json!(1)); }
                }
                let before = key_missing(&Value::Object(doc.clone()), &truth).rate;
                doc.shift_remove(&truth[extra]);
                let after = key_missing(&Value::Object(doc), &truth).rate;
                prop_assert!(after >= before);
                prop_assert!((0.0..=1.0).contains(&after));
            }
        }
    }
}

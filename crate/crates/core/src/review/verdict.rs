//! Parsing of free-form reviewer answers into verdicts.

use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerdictError {
    #[error("no JSON object with Precision/Recall/Fit keys found")]
    NoObject,
    #[error("verdict object lacks key `{0}`")]
    MissingKey(&'static str),
    #[error("value of `{key}` is not a yes/no answer: {value}")]
    NotYesNo { key: &'static str, value: String },
    #[error("expected two YES/NO answers, found {0}")]
    AnswerCount(usize),
}

const KEYS: [&str; 3] = ["Precision", "Recall", "Fit"];

/// Byte ranges of balanced `{...}` spans, skipping braces inside strings.
fn brace_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    for start in (0..bytes.len()).filter(|&i| bytes[i] == b'{') {
        let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
        for (off, &b) in bytes[start..].iter().enumerate() {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        spans.push((start, start + off + 1));
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    spans
}

fn lookup<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.iter().find(|(k, _)| k.trim().eq_ignore_ascii_case(key)).map(|(_, v)| v)
}

/// Words of `s` that are exactly "yes" or "no", lowercased, in order.
fn yes_no_tokens(s: &str) -> Vec<bool> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter_map(|w| match w.to_ascii_lowercase().as_str() {
            "yes" => Some(true),
            "no" => Some(false),
            _ => None,
        })
        .collect()
}

fn yes_no_value(key: &'static str, v: &Value) -> Result<bool, VerdictError> {
    let err = || VerdictError::NotYesNo { key, value: v.to_string() };
    match v {
        Value::Bool(b) => Ok(*b),
        Value::String(s) => {
            let tokens = yes_no_tokens(s);
            match tokens.first() {
                Some(&first) if tokens.iter().all(|&t| t == first) => Ok(first),
                _ => Err(err()),
            }
        }
        _ => Err(err()),
    }
}

/// Extracts (precision, recall, fit) from a reviewer answer.
///
/// The first JSON object (fenced or bare) that carries any of the three keys
/// is used; all three must be present and each must read as yes or no.
pub fn parse_verdict(raw: &str) -> Result<(bool, bool, bool), VerdictError> {
    let obj = brace_spans(raw)
        .into_iter()
        .filter_map(|(a, b)| serde_json::from_str::<Map<String, Value>>(&raw[a..b]).ok())
        .find(|o| KEYS.iter().any(|k| lookup(o, k).is_some()))
        .ok_or(VerdictError::NoObject)?;
    let mut out = [false; 3];
    for (slot, key) in out.iter_mut().zip(KEYS) {
        let v = lookup(&obj, key).ok_or(VerdictError::MissingKey(key))?;
        *slot = yes_no_value(key, v)?;
    }
    Ok((out[0], out[1], out[2]))
}

/// Extracts (suitable, authentic) from a two-question YES/NO answer.
///
/// Lines holding exactly one YES/NO word are read first; when they do not
/// give exactly two answers, every YES/NO word in the text is used instead.
pub fn parse_photorealism(raw: &str) -> Result<(bool, bool), VerdictError> {
    let by_line: Vec<bool> = raw.lines().map(yes_no_tokens).filter(|t| t.len() == 1).map(|t| t[0]).collect();
    let answers = if by_line.len() == 2 { by_line } else { yes_no_tokens(raw) };
    match answers.as_slice() {
        [a, b] => Ok((*a, *b)),
        other => Err(VerdictError::AnswerCount(other.len())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fenced_object() {
        let raw = "```json\n{\"Precision\":\"Yes\",\"Recall\":\"Yes\",\"Fit\":\"Yes\"}\n```";
        assert_eq!(parse_verdict(raw), Ok((true, true, true)));
    }

    #[test]
    fn prose_wrapped_and_case_insensitive() {
        let raw = "The box is slightly off. {\"precision\": \"no\", \"RECALL\": \"Yes.\", \"Fit\": \"yes, fine\"} done";
        assert_eq!(parse_verdict(raw), Ok((false, true, true)));
    }

    #[test]
    fn braces_in_prose_are_skipped() {
        let raw = "Using {curly} notes {\"note\": \"}\"} then {\"Precision\":\"Yes\",\"Recall\":\"No\",\"Fit\":\"No\"}";
        assert_eq!(parse_verdict(raw), Ok((true, false, false)));
    }

    #[test]
    fn failures() {
        assert_eq!(parse_verdict("all good"), Err(VerdictError::NoObject));
        assert_eq!(parse_verdict("{\"Precision\":\"Yes\",\"Recall\":\"Yes\"}"), Err(VerdictError::MissingKey("Fit")));
        assert!(matches!(
            parse_verdict("{\"Precision\":\"Yes\",\"Recall\":\"maybe\",\"Fit\":\"Yes\"}"),
            Err(VerdictError::NotYesNo { key: "Recall", .. })
        ));
        assert!(matches!(
            parse_verdict("{\"Precision\":\"Yes or no\",\"Recall\":\"Yes\",\"Fit\":\"Yes\"}"),
            Err(VerdictError::NotYesNo { key: "Precision", .. })
        ));
    }

    #[test]
    fn photorealism_answers() {
        assert_eq!(parse_photorealism("YES\nYES"), Ok((true, true)));
        assert_eq!(parse_photorealism("YES\nNO"), Ok((true, false)));
        assert_eq!(parse_photorealism("1. Yes, it is suitable. 2. No."), Ok((true, false)));
        assert_eq!(parse_photorealism("I cannot tell"), Err(VerdictError::AnswerCount(0)));
        assert_eq!(parse_photorealism("YES"), Err(VerdictError::AnswerCount(1)));
    }
}

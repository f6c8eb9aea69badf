//! Record formats for the batch CLI.
//!
//! Scores are always written in positional decimal with 17 significant
//! digits, which is enough to reproduce every `f64` exactly, so reading and
//! re-writing a file leaves its bytes unchanged.

use std::io::Write;

use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DefendRequest {
    #[serde(default)]
    pub record_id: Option<String>,
    pub scores: Vec<f64>,
}

/// Answers left for a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Remaining {
    Limited(u64),
    Unlimited,
}

impl Remaining {
    fn as_json(&self) -> String {
        match self {
            Self::Limited(n) => n.to_string(),
            Self::Unlimited => "\"unlimited\"".to_string(),
        }
    }

    fn as_text(&self) -> String {
        match self {
            Self::Limited(n) => n.to_string(),
            Self::Unlimited => "unlimited".to_string(),
        }
    }
}

impl serde::Serialize for Remaining {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Limited(n) => s.serialize_u64(*n),
            Self::Unlimited => s.serialize_str("unlimited"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefendResponse {
    pub record_id: Option<String>,
    pub scores: Vec<f64>,
    pub epsilon_used: f64,
    pub budget_remaining: Remaining,
}

/// Category of a per-record failure. The label never carries score data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    ParseError,
    InvalidVector,
    ClassCountMismatch,
    BudgetExhausted,
    Internal,
}

impl ErrorKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::ParseError => "parse_error",
            Self::InvalidVector => "invalid_vector",
            Self::ClassCountMismatch => "class_count_mismatch",
            Self::BudgetExhausted => "budget_exhausted",
            Self::Internal => "internal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRecord {
    pub line: usize,
    pub record_id: Option<String>,
    pub kind: ErrorKind,
    pub message: String,
}

/// Positional decimal with 17 significant digits.
pub fn format_score(x: f64) -> String {
    if !x.is_finite() {
        return "NaN".to_string();
    }
    let sci = format!("{:.16e}", x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let sign = if x.is_sign_negative() && x != 0.0 {
        "-"
    } else {
        ""
    };
    let body = if exp < 0 {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    } else {
        let split = exp as usize + 1;
        if split >= digits.len() {
            format!("{}{}.0", digits, "0".repeat(split - digits.len()))
        } else {
            format!("{}.{}", &digits[..split], &digits[split..])
        }
    };
    format!("{sign}{body}")
}

fn json_string(s: &str) -> String {
    serde_json::Value::String(s.to_string()).to_string()
}

fn score_list(scores: &[f64]) -> String {
    scores
        .iter()
        .map(|&s| format_score(s))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_jsonl_line(line: &[u8]) -> Result<DefendRequest, ErrorKind> {
    serde_json::from_slice(line).map_err(|_| ErrorKind::ParseError)
}

/// A request as one JSONL line, without the trailing newline.
pub fn jsonl_request(req: &DefendRequest) -> String {
    let mut out = String::from("{");
    if let Some(id) = &req.record_id {
        out.push_str(&format!("\"record_id\":{},", json_string(id)));
    }
    out.push_str(&format!("\"scores\":[{}]}}", score_list(&req.scores)));
    out
}

pub fn jsonl_response(resp: &DefendResponse) -> String {
    let mut out = String::from("{");
    if let Some(id) = &resp.record_id {
        out.push_str(&format!("\"record_id\":{},", json_string(id)));
    }
    out.push_str(&format!(
        "\"scores\":[{}],\"epsilon_used\":{},\"budget_remaining\":{}}}",
        score_list(&resp.scores),
        resp.epsilon_used,
        resp.budget_remaining.as_json()
    ));
    out
}

pub fn jsonl_error(err: &ErrorRecord) -> String {
    let mut out = format!("{{\"line\":{},", err.line);
    if let Some(id) = &err.record_id {
        out.push_str(&format!("\"record_id\":{},", json_string(id)));
    }
    out.push_str(&format!(
        "\"error\":\"{}\",\"message\":{}}}",
        err.kind.label(),
        json_string(&err.message)
    ));
    out
}

/// Validates a `record_id,s1,...,sk` header and returns `k`.
pub fn csv_class_count(header: &csv::StringRecord) -> Option<usize> {
    if header.get(0) != Some("record_id") || header.len() < 2 {
        return None;
    }
    let ok = header
        .iter()
        .skip(1)
        .enumerate()
        .all(|(i, h)| h == format!("s{}", i + 1));
    ok.then(|| header.len() - 1)
}

pub fn csv_header(k: usize) -> Vec<String> {
    std::iter::once("record_id".to_string())
        .chain((1..=k).map(|i| format!("s{i}")))
        .collect()
}

pub fn parse_csv_row(row: &csv::StringRecord, k: usize) -> Result<DefendRequest, ErrorKind> {
    if row.len() != k + 1 {
        return Err(ErrorKind::ParseError);
    }
    let record_id = row.get(0).filter(|s| !s.is_empty()).map(str::to_string);
    let scores = row
        .iter()
        .skip(1)
        .map(|s| s.trim().parse::<f64>().map_err(|_| ErrorKind::ParseError))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DefendRequest { record_id, scores })
}

pub fn csv_request_row(req: &DefendRequest) -> Vec<String> {
    std::iter::once(req.record_id.clone().unwrap_or_default())
        .chain(req.scores.iter().map(|&s| format_score(s)))
        .collect()
}

/// Output header: the input columns then `epsilon_used,budget_remaining,error`.
pub fn csv_output_header(k: usize) -> Vec<String> {
    let mut h = csv_header(k);
    h.extend(["epsilon_used", "budget_remaining", "error"].map(String::from));
    h
}

pub fn csv_response_row(resp: &DefendResponse) -> Vec<String> {
    let mut row: Vec<String> = std::iter::once(resp.record_id.clone().unwrap_or_default())
        .chain(resp.scores.iter().map(|&s| format_score(s)))
        .collect();
    row.push(resp.epsilon_used.to_string());
    row.push(resp.budget_remaining.as_text());
    row.push(String::new());
    row
}

pub fn csv_error_row(err: &ErrorRecord, k: usize) -> Vec<String> {
    let mut row = vec![err.record_id.clone().unwrap_or_default()];
    row.extend(std::iter::repeat_n(String::new(), k + 2));
    row.push(err.kind.label().to_string());
    row
}

/// Reads JSONL requests and writes them back as CSV.
pub fn jsonl_to_csv(input: &[u8], out: impl Write) -> Result<(), ConvertError> {
    let reqs = input
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(parse_jsonl_line)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| ConvertError::Parse)?;
    let k = reqs.first().map_or(0, |r| r.scores.len());
    if reqs.iter().any(|r| r.scores.len() != k) {
        return Err(ConvertError::Ragged);
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(k))?;
    for r in &reqs {
        w.write_record(csv_request_row(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads CSV requests and writes them back as JSONL.
pub fn csv_to_jsonl(input: &[u8], mut out: impl Write) -> Result<(), ConvertError> {
    let mut r = csv::Reader::from_reader(input);
    let k = csv_class_count(r.headers()?).ok_or(ConvertError::Header)?;
    for row in r.records() {
        let req = parse_csv_row(&row?, k).map_err(|_| ConvertError::Parse)?;
        writeln!(out, "{}", jsonl_request(&req))?;
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ConvertError {
    #[error("unparseable record")]
    Parse,
    #[error("records have different class counts")]
    Ragged,
    #[error("CSV header must be record_id,s1,...,sk")]
    Header,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

use std::io::{BufRead, Write};

use dpguard::BudgetLedger;

use crate::config::{AppConfig, Format};
use crate::io::{
    csv_class_count, csv_error_row, csv_output_header, csv_response_row, jsonl_error,
    jsonl_response, parse_csv_row, parse_jsonl_line, DefendRequest, DefendResponse, ErrorKind,
    ErrorRecord,
};
use crate::pipeline::{budget_key, charge, defend_vector, validate, Failure};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchSummary {
    pub records: usize,
    pub defended: usize,
    pub failed: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("CSV header must be record_id,s1,...,sk")]
    Header,
}

fn answer(
    req: DefendRequest,
    nonce: u64,
    cfg: &AppConfig,
    ledger: Option<&BudgetLedger>,
) -> Result<DefendResponse, Failure> {
    let key = budget_key(req.record_id.as_deref(), &req.scores)?;
    let y = validate(req.scores)?;
    let remaining = charge(ledger, &key, y.len())?;
    let released = defend_vector(&y, nonce, cfg)?;
    Ok(DefendResponse {
        record_id: req.record_id,
        scores: released.scores,
        epsilon_used: released.epsilon_used,
        budget_remaining: remaining,
    })
}

fn report(side: &mut impl Write, err: &ErrorRecord) -> std::io::Result<()> {
    writeln!(
        side,
        "record {}: {}: {}",
        err.line,
        err.kind.label(),
        err.message
    )
}

/// Defends each record of `input`, writing exactly one output record per
/// input record in the same order. Record `i` (zero based) draws from RNG
/// stream `i`, so the output depends only on the input, the seed and the
/// ledger state.
pub fn run_defend(
    input: impl BufRead,
    output: impl Write,
    side: impl Write,
    cfg: &AppConfig,
    ledger: Option<&BudgetLedger>,
) -> Result<BatchSummary, BatchError> {
    match cfg.format {
        Format::Jsonl => run_jsonl(input, output, side, cfg, ledger),
        Format::Csv => run_csv(input, output, side, cfg, ledger),
    }
}

fn run_jsonl(
    input: impl BufRead,
    mut output: impl Write,
    mut side: impl Write,
    cfg: &AppConfig,
    ledger: Option<&BudgetLedger>,
) -> Result<BatchSummary, BatchError> {
    let mut summary = BatchSummary::default();
    for (i, line) in input.split(b'\n').enumerate() {
        let mut line = line?;
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        summary.records += 1;
        let parsed = parse_jsonl_line(&line)
            .map_err(|kind| (None, Failure::new(kind, "line is not a valid request")));
        let result = parsed.and_then(|req| {
            let id = req.record_id.clone();
            answer(req, i as u64, cfg, ledger).map_err(|f| (id, f))
        });
        match result {
            Ok(resp) => {
                summary.defended += 1;
                writeln!(output, "{}", jsonl_response(&resp))?;
            }
            Err((record_id, f)) => {
                summary.failed += 1;
                let err = ErrorRecord {
                    line: i + 1,
                    record_id,
                    kind: f.kind,
                    message: f.message,
                };
                report(&mut side, &err)?;
                writeln!(output, "{}", jsonl_error(&err))?;
            }
        }
    }
    output.flush()?;
    Ok(summary)
}

fn run_csv(
    input: impl BufRead,
    output: impl Write,
    mut side: impl Write,
    cfg: &AppConfig,
    ledger: Option<&BudgetLedger>,
) -> Result<BatchSummary, BatchError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let mut writer = csv::WriterBuilder::new().flexible(true).from_writer(output);
    let mut summary = BatchSummary::default();
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Ok(summary);
    }
    let k = csv_class_count(&headers).ok_or(BatchError::Header)?;
    writer.write_record(csv_output_header(k))?;
    for (i, row) in reader.records().enumerate() {
        summary.records += 1;
        let parsed = row
            .map_err(|_| ErrorKind::ParseError)
            .and_then(|r| parse_csv_row(&r, k))
            .map_err(|kind| (None, Failure::new(kind, "row is not a valid request")));
        let result = parsed.and_then(|req| {
            let id = req.record_id.clone();
            answer(req, i as u64, cfg, ledger).map_err(|f| (id, f))
        });
        match result {
            Ok(resp) => {
                summary.defended += 1;
                writer.write_record(csv_response_row(&resp))?;
            }
            Err((record_id, f)) => {
                summary.failed += 1;
                let err = ErrorRecord {
                    line: i + 1,
                    record_id,
                    kind: f.kind,
                    message: f.message,
                };
                report(&mut side, &err)?;
                writer.write_record(csv_error_row(&err, k))?;
            }
        }
    }
    writer.flush()?;
    Ok(summary)
}

//! Per-record query accounting.
//!
//! Every answer for a record spends `k * epsilon` of that record's privacy.
//! Bounding the KL divergence of the full transcript by that of an
//! `epsilon'`-private mechanism caps the number of answers at
//!
//! ```text
//! b = floor( eps' (e^eps' - 1) / (k eps (e^(k eps) - 1)) )
//! ```
//!
//! The ledger hands out at most `b` answers per record fingerprint and can
//! persist its counts to an append-only log so denials survive restarts.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const HEADER_TAG: &str = "dpguard-ledger v1";

/// Relative slack under which a ratio just below an integer is read as that
/// integer, so `eps' = k * eps` yields exactly one answer regardless of how
/// the two sides were rounded.
pub const BOUND_SNAP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetParams {
    pub per_access_epsilon: f64,
    pub num_classes: usize,
    pub overall_epsilon: f64,
}

impl BudgetParams {
    pub fn new(per_access_epsilon: f64, num_classes: usize, overall_epsilon: f64) -> Result<Self> {
        let p = Self {
            per_access_epsilon,
            num_classes,
            overall_epsilon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |e: f64| e > 0.0 && e.is_finite();
        if !ok(self.per_access_epsilon) || !ok(self.overall_epsilon) {
            return Err(Error::InvalidConfig("budget epsilons must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("class count must be positive"));
        }
        Ok(())
    }

    /// Privacy spent by one answer, `k * epsilon`.
    pub fn per_query_epsilon(&self) -> f64 {
        self.num_classes as f64 * self.per_access_epsilon
    }

    /// True when the target is below a single answer's cost, so every query
    /// will be denied.
    pub fn denies_everything(&self) -> bool {
        query_bound(self) == 0
    }
}

/// `ln(e^x - 1)` without overflow for large `x`.
fn ln_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// Number of answers one record may receive.
pub fn query_bound(params: &BudgetParams) -> u64 {
    let target = params.overall_epsilon;
    let spent = params.per_query_epsilon();
    let ratio = if target > 700.0 || spent > 700.0 {
        let ln_ratio = target.ln() + ln_expm1(target) - spent.ln() - ln_expm1(spent);
        if ln_ratio >= (u64::MAX as f64).ln() {
            return u64::MAX;
        }
        ln_ratio.exp()
    } else {
        (target * target.exp_m1()) / (spent * spent.exp_m1())
    };
    snap_floor(ratio)
}

fn snap_floor(ratio: f64) -> u64 {
    if !(ratio > 0.0) {
        return 0;
    }
    if ratio >= u64::MAX as f64 {
        return u64::MAX;
    }
    let up = ratio.ceil();
    if up - ratio <= BOUND_SNAP_TOLERANCE * up {
        up as u64
    } else {
        ratio.floor() as u64
    }
}

/// SHA-256 digest identifying a record.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint([u8; 32]);

impl Fingerprint {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

impl FromStr for Fingerprint {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Self(out))
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Digest of a record after canonicalization.
///
/// Bytes that parse as JSON are re-serialized with sorted object keys and
/// every number printed with 17 significant digits, so `1`, `1.0` and
/// `1e0` identify the same record. Anything else is hashed verbatim.
pub fn fingerprint(record_bytes: &[u8]) -> Result<Fingerprint> {
    if record_bytes.is_empty() {
        return Err(Error::EmptyRecord);
    }
    let mut hasher = Sha256::new();
    match serde_json::from_slice::<serde_json::Value>(record_bytes) {
        Ok(value) => {
            let mut canon = String::new();
            canonical_json(&value, &mut canon);
            hasher.update(b"json\0");
            hasher.update(canon.as_bytes());
        }
        Err(_) => {
            hasher.update(b"raw\0");
            hasher.update(record_bytes);
        }
    }
    Ok(Fingerprint(hasher.finalize().into()))
}

fn canonical_json(value: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            out.push_str(&format!("{x:.16e}"));
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical_json(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                canonical_json(&map[key], out);
            }
            out.push('}');
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryOutcome {
    Allowed { remaining: u64 },
    Denied,
}

impl QueryOutcome {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Self::Allowed { .. })
    }
}

struct LedgerLog {
    path: PathBuf,
    file: File,
    appended: usize,
}

struct Inner {
    counts: HashMap<Fingerprint, u64>,
    log: Option<LedgerLog>,
}

/// Thread-safe per-record answer counter.
pub struct BudgetLedger {
    params: BudgetParams,
    bound: u64,
    inner: Mutex<Inner>,
}

impl fmt::Debug for BudgetLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BudgetLedger")
            .field("params", &self.params)
            .field("bound", &self.bound)
            .finish_non_exhaustive()
    }
}

impl BudgetLedger {
    /// In-memory ledger.
    pub fn new(params: BudgetParams) -> Result<Self> {
        params.validate()?;
        if params.overall_epsilon < params.per_query_epsilon() {
            tracing::warn!("overall budget below one answer; every query will be denied");
        }
        Ok(Self {
            bound: query_bound(&params),
            params,
            inner: Mutex::new(Inner {
                counts: HashMap::new(),
                log: None,
            }),
        })
    }

    /// Ledger backed by an append-only log at `path`.
    ///
    /// An existing log is replayed (its header must match `params`) and then
    /// compacted; every granted answer is appended before it is reported.
    pub fn open(path: impl AsRef<Path>, params: BudgetParams) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let ledger = if path.exists() {
            let loaded = Self::load(&path)?;
            if loaded.params != params {
                return Err(Error::LedgerParamsMismatch);
            }
            loaded
        } else {
            Self::new(params)?
        };
        ledger.write_snapshot(&path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        ledger.lock().log = Some(LedgerLog {
            path,
            file,
            appended: 0,
        });
        Ok(ledger)
    }

    /// Reads a snapshot or log without attaching to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::LedgerFormat {
                line: 1,
                reason: "missing header".into(),
            })?;
        let (params, bound) = parse_header(&header)?;
        let ledger = Self::new(params)?;
        if ledger.bound != bound {
            return Err(Error::LedgerFormat {
                line: 1,
                reason: "stored bound disagrees with parameters".into(),
            });
        }
        {
            let mut inner = ledger.lock();
            for (n, line) in lines.enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let (digest, count) = parse_entry(&line, n + 2)?;
                let slot = inner.counts.entry(digest).or_insert(0);
                *slot = (*slot).max(count.min(bound));
            }
        }
        Ok(ledger)
    }

    pub fn params(&self) -> &BudgetParams {
        &self.params
    }

    pub fn bound(&self) -> u64 {
        self.bound
    }

    pub fn count(&self, digest: &Fingerprint) -> u64 {
        self.lock().counts.get(digest).copied().unwrap_or(0)
    }

    pub fn remaining(&self, digest: &Fingerprint) -> u64 {
        self.bound - self.count(digest)
    }

    /// Grants one answer for `digest` if its count is still below the bound.
    pub fn register_query(&self, digest: &Fingerprint) -> Result<QueryOutcome> {
        let mut inner = self.lock();
        let current = inner.counts.get(digest).copied().unwrap_or(0);
        if current >= self.bound {
            return Ok(QueryOutcome::Denied);
        }
        let next = current + 1;
        if let Some(log) = inner.log.as_mut() {
            log.file
                .write_all(format!("{digest} {next}\n").as_bytes())?;
            log.appended += 1;
        }
        inner.counts.insert(*digest, next);
        if inner
            .log
            .as_ref()
            .is_some_and(|l| l.appended > 1024 + 2 * inner.counts.len())
        {
            self.compact_locked(&mut inner)?;
        }
        Ok(QueryOutcome::Allowed {
            remaining: self.bound - next,
        })
    }

    /// Rewrites the attached log as a one-line-per-record snapshot.
    pub fn compact(&self) -> Result<()> {
        let mut inner = self.lock();
        self.compact_locked(&mut inner)
    }

    fn compact_locked(&self, inner: &mut Inner) -> Result<()> {
        let Some(path) = inner.log.as_ref().map(|l| l.path.clone()) else {
            return Ok(());
        };
        write_snapshot_file(&path, &self.params, self.bound, &inner.counts)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        inner.log = Some(LedgerLog {
            path,
            file,
            appended: 0,
        });
        Ok(())
    }

    /// Writes `<header>` then `<hex digest> <count>` per record, sorted by digest.
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let inner = self.lock();
        write_snapshot_file(path.as_ref(), &self.params, self.bound, &inner.counts)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("ledger mutex poisoned")
    }
}

fn header_line(params: &BudgetParams, bound: u64) -> String {
    format!(
        "{HEADER_TAG} per_access_epsilon={} num_classes={} overall_epsilon={} bound={}",
        params.per_access_epsilon, params.num_classes, params.overall_epsilon, bound
    )
}

fn write_snapshot_file(
    path: &Path,
    params: &BudgetParams,
    bound: u64,
    counts: &HashMap<Fingerprint, u64>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        writeln!(w, "{}", header_line(params, bound))?;
        let mut entries: Vec<_> = counts.iter().collect();
        entries.sort();
        for (digest, count) in entries {
            writeln!(w, "{digest} {count}")?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_header(line: &str) -> Result<(BudgetParams, u64)> {
    let bad = |reason: &str| Error::LedgerFormat {
        line: 1,
        reason: reason.to_string(),
    };
    let rest = line
        .strip_prefix(HEADER_TAG)
        .ok_or_else(|| bad("unrecognized header"))?;
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad("malformed field"))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad("missing field"));
    let float = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad("bad number"));
    let params = BudgetParams {
        per_access_epsilon: float("per_access_epsilon")?,
        num_classes: get("num_classes")?
            .parse()
            .map_err(|_| bad("bad class count"))?,
        overall_epsilon: float("overall_epsilon")?,
    };
    let bound = get("bound")?.parse().map_err(|_| bad("bad bound"))?;
    Ok((params, bound))
}

fn parse_entry(line: &str, number: usize) -> Result<(Fingerprint, u64)> {
    let bad = |reason: &str| Error::LedgerFormat {
        line: number,
        reason: reason.to_string(),
    };
    let (digest, count) = line
        .split_once(' ')
        .ok_or_else(|| bad("expected two fields"))?;
    let digest = digest.parse().map_err(|_| bad("bad digest"))?;
    let count = count.trim().parse().map_err(|_| bad("bad count"))?;
    Ok((digest, count))
}

//! Attention traces and the `KVTR` binary format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "KVTR"
//! 4       4           version (u32, = 1)
//! 8       16          L, H, Q, T (u32 each)
//! 24      4*L*H*Q*T   weights, f32, [layer][head][query][key]
//! ```
//!
//! Metadata lives in a UTF-8 JSON sidecar at `<path>.meta.json`.
//!
//! Query row `q` of a trace with `Q` rows is the query at absolute position
//! `T - Q + q`: a full trace has one row per prompt position, a last-row trace
//! holds only the final prompt position.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KVTR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Row-sum deviation beyond which a row is reported as a warning.
pub const ROW_SUM_STRICT: f64 = 1e-4;
/// Row-sum deviation beyond which a row is rejected.
pub const ROW_SUM_RELAXED: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceMode {
    LastRow,
    Full,
}

/// A token as recorded in trace metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenPiece {
    Id(u32),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    #[serde(default)]
    pub tokens: Vec<TokenPiece>,
    #[serde(default)]
    pub shots: Vec<[usize; 2]>,
    #[serde(default)]
    pub mandatory: Vec<[usize; 2]>,
    #[serde(default = "default_sink_count")]
    pub sink_count: usize,
    #[serde(default)]
    pub model: String,
    #[serde(default = "empty_object")]
    pub params: serde_json::Value,
}

fn default_sink_count() -> usize {
    4
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

impl Default for TraceMeta {
    fn default() -> Self {
        TraceMeta {
            tokens: Vec::new(),
            shots: Vec::new(),
            mandatory: Vec::new(),
            sink_count: default_sink_count(),
            model: String::new(),
            params: empty_object(),
        }
    }
}

/// Recorded attention weights, indexed `[layer][head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    layers: usize,
    heads: usize,
    queries: usize,
    keys: usize,
    weights: Vec<f32>,
    pub meta: TraceMeta,
}

impl AttentionTrace {
    pub fn new(
        layers: usize,
        heads: usize,
        queries: usize,
        keys: usize,
        weights: Vec<f32>,
        meta: TraceMeta,
    ) -> Result<Self> {
        check_dims(layers, heads, queries, keys).map_err(Error::Trace)?;
        let expected = layers * heads * queries * keys;
        if weights.len() != expected {
            return Err(Error::Trace(format!(
                "weight tensor has {} entries, dimensions need {expected}",
                weights.len()
            )));
        }
        Ok(AttentionTrace {
            layers,
            heads,
            queries,
            keys,
            weights,
            meta,
        })
    }

    pub fn zeros(layers: usize, heads: usize, queries: usize, keys: usize) -> Result<Self> {
        let n = layers * heads * queries * keys;
        Self::new(layers, heads, queries, keys, vec![0.0; n], TraceMeta::default())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn mode(&self) -> TraceMode {
        if self.queries == self.keys {
            TraceMode::Full
        } else {
            TraceMode::LastRow
        }
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    /// Absolute position of query row `q`.
    pub fn query_position(&self, q: usize) -> usize {
        self.keys - self.queries + q
    }

    fn row_start(&self, layer: usize, head: usize, query: usize) -> usize {
        ((layer * self.heads + head) * self.queries + query) * self.keys
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let s = self.row_start(layer, head, query);
        &self.weights[s..s + self.keys]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize, query: usize) -> &mut [f32] {
        let s = self.row_start(layer, head, query);
        &mut self.weights[s..s + self.keys]
    }

    /// Copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w *= factor);
        out
    }

    /// Keeps only the final query row of every (layer, head).
    pub fn last_row(&self) -> Self {
        let mut weights = Vec::with_capacity(self.layers * self.heads * self.keys);
        for l in 0..self.layers {
            for h in 0..self.heads {
                weights.extend_from_slice(self.row(l, h, self.queries - 1));
            }
        }
        AttentionTrace {
            layers: self.layers,
            heads: self.heads,
            queries: 1,
            keys: self.keys,
            weights,
            meta: self.meta.clone(),
        }
    }
}

fn check_dims(layers: usize, heads: usize, queries: usize, keys: usize) -> Result<(), String> {
    if layers == 0 || heads == 0 || queries == 0 || keys == 0 {
        return Err(format!(
            "dimensions must be positive (L={layers}, H={heads}, Q={queries}, T={keys})"
        ));
    }
    if queries != 1 && queries != keys {
        return Err(format!("Q must be 1 or T, got Q={queries}, T={keys}"));
    }
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Encodes the binary part of a trace.
pub fn encode_trace(trace: &AttentionTrace) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * trace.weights.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [trace.layers, trace.heads, trace.queries, trace.keys] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for w in &trace.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn write_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_trace(trace)).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&trace.meta)?;
    fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
}

#[derive(Debug, Clone, Copy)]
pub struct ReadOptions {
    /// Upper bound on L*H*Q*T.
    pub max_elements: usize,
}

impl Default for ReadOptions {
    fn default() -> Self {
        ReadOptions {
            max_elements: 1 << 28,
        }
    }
}

/// A row whose sum is off by more than [`ROW_SUM_STRICT`] but within [`ROW_SUM_RELAXED`].
#[derive(Debug, Clone, PartialEq)]
pub struct RowWarning {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub sum: f64,
}

/// Decodes the binary part; `origin` only labels errors.
pub fn decode_trace(
    bytes: &[u8],
    origin: &Path,
    opts: &ReadOptions,
) -> Result<(AttentionTrace, Vec<RowWarning>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            origin,
            format!(
                "truncated header: expected at least {HEADER_LEN} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(
            origin,
            format!("bad magic {:?}, expected \"KVTR\"", &bytes[0..4]),
        ));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let (layers, heads, queries, keys) = (
        u32_at(8) as usize,
        u32_at(12) as usize,
        u32_at(16) as usize,
        u32_at(20) as usize,
    );
    check_dims(layers, heads, queries, keys).map_err(|r| Error::format(origin, r))?;
    let elements = layers
        .checked_mul(heads)
        .and_then(|x| x.checked_mul(queries))
        .and_then(|x| x.checked_mul(keys))
        .filter(|&n| n <= opts.max_elements)
        .ok_or_else(|| {
            Error::format(
                origin,
                format!(
                    "implausible dimensions L={layers} H={heads} Q={queries} T={keys} (limit {} elements)",
                    opts.max_elements
                ),
            )
        })?;
    let expected = HEADER_LEN + 4 * elements;
    if bytes.len() != expected {
        return Err(Error::format(
            origin,
            format!(
                "length mismatch: expected {expected} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let weights: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let trace = AttentionTrace {
        layers,
        heads,
        queries,
        keys,
        weights,
        meta: TraceMeta::default(),
    };
    let warnings = check_row_sums(&trace)?;
    Ok((trace, warnings))
}

fn check_row_sums(trace: &AttentionTrace) -> Result<Vec<RowWarning>> {
    let mut warnings = Vec::new();
    for l in 0..trace.layers {
        for h in 0..trace.heads {
            for q in 0..trace.queries {
                let row = trace.row(l, h, q);
                if let Some(bad) = row.iter().find(|w| !w.is_finite()) {
                    return Err(Error::Validation {
                        layer: l,
                        head: h,
                        query: q,
                        reason: format!("non-finite weight {bad}"),
                    });
                }
                let sum: f64 = row.iter().map(|&w| w as f64).sum();
                let dev = (sum - 1.0).abs();
                if dev > ROW_SUM_RELAXED {
                    return Err(Error::Validation {
                        layer: l,
                        head: h,
                        query: q,
                        reason: format!("row sums to {sum}, expected 1"),
                    });
                }
                if dev > ROW_SUM_STRICT {
                    warnings.push(RowWarning {
                        layer: l,
                        head: h,
                        query: q,
                        sum,
                    });
                }
            }
        }
    }
    Ok(warnings)
}

/// Reads a trace and its sidecar, returning rows that only passed the relaxed
/// row-sum bound. A missing sidecar yields default metadata.
pub fn read_trace_with(
    path: impl AsRef<Path>,
    opts: &ReadOptions,
) -> Result<(AttentionTrace, Vec<RowWarning>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut trace, warnings) = decode_trace(&bytes, path, opts)?;
    let sidecar = sidecar_path(path);
    match fs::read(&sidecar) {
        Ok(raw) => {
            trace.meta = serde_json::from_slice(&raw)
                .map_err(|e| Error::format(&sidecar, e.to_string()))?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            log::warn!("no metadata sidecar at {}", sidecar.display());
        }
        Err(e) => return Err(Error::io(&sidecar, e)),
    }
    Ok((trace, warnings))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let (trace, warnings) = read_trace_with(path, &ReadOptions::default())?;
    for w in &warnings {
        log::warn!(
            "row (layer {}, head {}, query {}) sums to {:.6}",
            w.layer,
            w.head,
            w.query,
            w.sum
        );
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub severity: Severity,
    pub passed: bool,
    pub failures: usize,
    pub first_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn hard_failures(&self) -> usize {
        self.checks
            .iter()
            .filter(|c| !c.passed && c.severity == Severity::Hard)
            .count()
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Tally {
    name: &'static str,
    severity: Severity,
    failures: usize,
    first: Option<String>,
}

impl Tally {
    fn new(name: &'static str, severity: Severity) -> Self {
        Tally {
            name,
            severity,
            failures: 0,
            first: None,
        }
    }

    fn fail(&mut self, detail: impl FnOnce() -> String) {
        if self.first.is_none() {
            self.first = Some(detail());
        }
        self.failures += 1;
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name.to_string(),
            severity: self.severity,
            passed: self.failures == 0,
            failures: self.failures,
            first_failure: self.first,
        }
    }
}

/// Runs every trace invariant and reports each check separately.
pub fn validate_trace(trace: &AttentionTrace) -> ValidationReport {
    let mut range = Tally::new("weights_in_unit_interval", Severity::Hard);
    let mut sums = Tally::new("row_sum", Severity::Hard);
    let mut strict = Tally::new("row_sum_strict", Severity::Soft);
    let mut causal = Tally::new("causality", Severity::Hard);
    for l in 0..trace.layers {
        for h in 0..trace.heads {
            for q in 0..trace.queries {
                let row = trace.row(l, h, q);
                let pos = trace.query_position(q);
                let at = || format!("layer {l}, head {h}, query {q}");
                if row.iter().any(|w| !w.is_finite() || *w < 0.0 || *w > 1.0) {
                    range.fail(at);
                }
                let sum: f64 = row.iter().map(|&w| w as f64).sum();
                let dev = (sum - 1.0).abs();
                if dev > ROW_SUM_RELAXED {
                    sums.fail(|| format!("{}: sum {sum}", at()));
                }
                if dev > ROW_SUM_STRICT {
                    strict.fail(|| format!("{}: sum {sum}", at()));
                }
                if let Some(k) = row[pos + 1..].iter().position(|&w| w != 0.0) {
                    causal.fail(|| format!("{}: key {} is in the future", at(), pos + 1 + k));
                }
            }
        }
    }

    let mut spans = Tally::new("meta_spans", Severity::Hard);
    if let Err(reason) = check_spans(&trace.meta, trace.keys) {
        spans.fail(|| reason);
    }
    let mut tokens = Tally::new("meta_tokens", Severity::Hard);
    if !trace.meta.tokens.is_empty() && trace.meta.tokens.len() != trace.keys {
        tokens.fail(|| {
            format!(
                "{} tokens in metadata, trace has T={}",
                trace.meta.tokens.len(),
                trace.keys
            )
        });
    }

    ValidationReport {
        checks: vec![
            range.finish(),
            sums.finish(),
            strict.finish(),
            causal.finish(),
            spans.finish(),
            tokens.finish(),
        ],
    }
}

fn check_spans(meta: &TraceMeta, keys: usize) -> Result<(), String> {
    let mut all: Vec<[usize; 2]> = Vec::new();
    for (kind, spans) in [("shot", &meta.shots), ("mandatory", &meta.mandatory)] {
        for s in spans.iter() {
            if s[0] >= s[1] || s[1] > keys {
                return Err(format!("{kind} span {s:?} invalid for T={keys}"));
            }
        }
        all.extend(spans.iter().copied());
    }
    all.sort_unstable();
    if let Some(w) = all.windows(2).find(|w| w[0][1] > w[1][0]) {
        return Err(format!("spans {:?} and {:?} overlap", w[0], w[1]));
    }
    Ok(())
}

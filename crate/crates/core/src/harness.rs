//! Experiment orchestration: ratio sweeps against an uncompressed baseline,
//! relative-performance arithmetic for externally measured scores, policy
//! overhead benchmarks and SVG line charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::analysis::sig9;
use crate::error::{Error, Result};
use crate::kvcache::Budget;
use crate::policies::{self, PolicyConfig, PolicyKind, PolicyParams, ShotSegmentation};
use crate::tinyformer::{
    generate_with, prefill, tokenize, GenerateOptions, Model, ModelConfig, TokenSequence,
};
use crate::traceio::TraceMode;

pub const SWEEP_COLUMNS: [&str; 10] = [
    "policy",
    "ratio",
    "r_p",
    "r_d",
    "kl",
    "top1_match",
    "max_abs",
    "retained_prefill",
    "retained_decoding",
    "wall_ms",
];

/// Ratios 0.9 down to 0.1.
pub fn default_ratios() -> Vec<f64> {
    (1..=9).rev().map(|i| i as f64 / 10.0).collect()
}

fn default_max_new() -> usize {
    32
}

fn default_policies() -> Vec<PolicyKind> {
    PolicyKind::ALL.to_vec()
}

fn default_metrics() -> Vec<String> {
    vec!["kl".into(), "top1_match".into(), "max_abs".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Text(String),
    Path(PathBuf),
}

/// How to split the prompt into shots: a marker string, explicit spans, or
/// (when both are absent) one shot spanning the prompt.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSpec {
    pub marker: Option<String>,
    pub shots: Vec<[usize; 2]>,
    pub mandatory: Vec<[usize; 2]>,
}

impl SegmentationSpec {
    pub fn resolve(&self, prompt: &[u8]) -> Result<ShotSegmentation> {
        if let Some(marker) = &self.marker {
            ShotSegmentation::from_marker(prompt, marker.as_bytes())
        } else if !self.shots.is_empty() || !self.mandatory.is_empty() {
            ShotSegmentation::new(prompt.len(), self.shots.clone(), self.mandatory.clone())
        } else {
            ShotSegmentation::whole_prompt(prompt.len())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub prompt: PromptSource,
    #[serde(default)]
    pub segmentation: SegmentationSpec,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    #[serde(default)]
    pub params: PolicyParams,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    /// Overrides `model.seed` when present.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    /// Parses a config file; a relative prompt path is taken relative to the
    /// config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig =
            serde_json::from_slice(&raw).map_err(|e| Error::format(path, e.to_string()))?;
        if let PromptSource::Path(p) = &mut config.prompt {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::Config("at least one policy is required".into()));
        }
        if self.ratios.is_empty() {
            return Err(Error::Config("at least one ratio is required".into()));
        }
        for &r in &self.ratios {
            Budget::single(r).validate()?;
        }
        for m in &self.metrics {
            if !["kl", "top1_match", "max_abs"].contains(&m.as_str()) {
                return Err(Error::Config(format!("unknown metric {m:?}")));
            }
        }
        let probe = PolicyConfig {
            kind: PolicyKind::FullKV,
            budget: Budget::single(1.0),
            params: self.params.clone(),
        };
        probe.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if let Some(seed) = self.seed {
            m.seed = seed;
        }
        m
    }

    pub fn prompt_bytes(&self) -> Result<Vec<u8>> {
        match &self.prompt {
            PromptSource::Text(t) => Ok(t.as_bytes().to_vec()),
            PromptSource::Path(p) => fs::read(p).map_err(|e| Error::io(p, e)),
        }
    }

    /// Policy configuration for one sweep cell. ShotKV uses the ratio for
    /// both its prefill and decoding budgets.
    pub fn policy(&self, kind: PolicyKind, ratio: f64) -> PolicyConfig {
        let budget = match kind {
            PolicyKind::ShotKV => Budget::split(ratio, ratio),
            _ => Budget::single(ratio),
        };
        PolicyConfig {
            kind,
            budget,
            params: self.params.clone(),
        }
    }
}

/// Relative change `(p_c - p_base) / p_base`.
pub fn delta_p(p_c: f64, p_base: f64) -> Result<f64> {
    if p_base == 0.0 {
        return Err(Error::Arithmetic("baseline score is zero".into()));
    }
    Ok((p_c - p_base) / p_base)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Mean over steps of KL(softmax(full) || softmax(compressed)).
    pub kl: f64,
    /// Fraction of steps whose argmax agrees.
    pub top1_match: f64,
    pub max_abs: f64,
}

fn log_softmax(x: &[f32]) -> Vec<f64> {
    let max = x.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|&v| v as f64 - lse).collect()
}

pub fn divergence(full: &[Vec<f32>], compressed: &[Vec<f32>]) -> Result<Divergence> {
    if full.len() != compressed.len() {
        return Err(Error::Shape(format!(
            "{} baseline steps vs {} compressed steps",
            full.len(),
            compressed.len()
        )));
    }
    if full.is_empty() {
        return Err(Error::Shape("no steps to compare".into()));
    }
    let mut kl = 0.0;
    let mut matches = 0usize;
    let mut max_abs = 0.0f64;
    for (step, (a, b)) in full.iter().zip(compressed).enumerate() {
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "step {step}: {} vs {} logits",
                a.len(),
                b.len()
            )));
        }
        let (la, lb) = (log_softmax(a), log_softmax(b));
        kl += la
            .iter()
            .zip(&lb)
            .map(|(&x, &y)| x.exp() * (x - y))
            .sum::<f64>();
        if crate::tinyformer::argmax(a) == crate::tinyformer::argmax(b) {
            matches += 1;
        }
        for (&x, &y) in a.iter().zip(b) {
            max_abs = max_abs.max((x as f64 - y as f64).abs());
        }
    }
    let steps = full.len() as f64;
    Ok(Divergence {
        kl: kl / steps,
        top1_match: matches as f64 / steps,
        max_abs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub policy: PolicyKind,
    pub ratio: f64,
    pub r_p: Option<f64>,
    pub r_d: Option<f64>,
    pub kl: f64,
    pub top1_match: f64,
    pub max_abs: f64,
    pub retained_prefill: usize,
    pub retained_decoding: usize,
    pub wall_ms: f64,
    pub p_c: Option<f64>,
    pub p_base: Option<f64>,
    pub delta_p: Option<f64>,
}

impl ResultRow {
    /// Attaches externally measured scores and derives ΔP.
    pub fn with_scores(mut self, p_c: f64, p_base: f64) -> Result<Self> {
        self.delta_p = Some(delta_p(p_c, p_base)?);
        self.p_c = Some(p_c);
        self.p_base = Some(p_base);
        Ok(self)
    }

    fn csv_fields(&self) -> [String; 10] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.policy.name().to_string(),
            self.ratio.to_string(),
            opt(self.r_p),
            opt(self.r_d),
            sig9(self.kl),
            sig9(self.top1_match),
            sig9(self.max_abs),
            self.retained_prefill.to_string(),
            self.retained_decoding.to_string(),
            format!("{:.3}", self.wall_ms),
        ]
    }
}

/// Everything a sweep needs, built once and shared read-only by all cells.
pub struct SweepInputs {
    pub model: Model,
    pub prompt: TokenSequence,
    pub seg: ShotSegmentation,
    pub baseline_ids: Vec<u32>,
    pub baseline_logits: Vec<Vec<f32>>,
}

impl SweepInputs {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config())?;
        let bytes = config.prompt_bytes()?;
        let prompt = tokenize(&bytes);
        let seg = config.segmentation.resolve(&bytes)?;
        let baseline = generate_with(
            &model,
            &prompt,
            &PolicyConfig::full(),
            &seg,
            &GenerateOptions {
                max_new: config.max_new,
                ..Default::default()
            },
        )?;
        Ok(SweepInputs {
            model,
            prompt,
            seg,
            baseline_ids: baseline.generated_ids,
            baseline_logits: baseline.per_step_logits,
        })
    }

    /// Runs one (policy, ratio) cell teacher-forced along the baseline's
    /// tokens and compares its logits with the baseline's.
    pub fn run_cell(&self, config: &ExperimentConfig, kind: PolicyKind, ratio: f64) -> Result<ResultRow> {
        let policy = config.policy(kind, ratio);
        let run = generate_with(
            &self.model,
            &self.prompt,
            &policy,
            &self.seg,
            &GenerateOptions {
                max_new: config.max_new,
                forced: Some(self.baseline_ids.clone()),
                measure: true,
            },
        )?;
        let div = divergence(&self.baseline_logits, &run.per_step_logits)?;
        let last = run.cache_sizes_per_step.last().copied().unwrap_or_default();
        let (r_p, r_d) = match kind {
            PolicyKind::ShotKV => (
                Some(policy.budget.prefill_ratio()),
                Some(policy.budget.decoding_ratio()),
            ),
            _ => (None, None),
        };
        Ok(ResultRow {
            policy: kind,
            ratio,
            r_p,
            r_d,
            kl: div.kl,
            top1_match: div.top1_match,
            max_abs: div.max_abs,
            retained_prefill: last.prefill_tokens,
            retained_decoding: last.decoding_tokens,
            wall_ms: run.selection_time.as_secs_f64() * 1e3,
            p_c: None,
            p_base: None,
            delta_p: None,
        })
    }
}

/// One row per (policy, ratio), ordered by the config's policy order and then
/// by descending ratio, whatever order the cells finish in.
pub fn ratio_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let inputs = SweepInputs::build(config)?;
    let mut cells: Vec<(usize, PolicyKind, f64)> = Vec::new();
    for (i, &kind) in config.policies.iter().enumerate() {
        for &r in &config.ratios {
            cells.push((i, kind, r));
        }
    }
    let run = |&(i, kind, r): &(usize, PolicyKind, f64)| {
        inputs.run_cell(config, kind, r).map(|row| (i, row))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(usize, ResultRow)>> = {
        use rayon::prelude::*;
        cells.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(usize, ResultRow)>> = cells.iter().map(run).collect();

    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|(ia, a), (ib, b)| ia.cmp(ib).then(b.ratio.total_cmp(&a.ratio)));
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn sweep_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_COLUMNS)?;
    for row in rows {
        w.write_record(row.csv_fields())?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_sweep_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, sweep_csv(rows)?).map_err(|e| Error::io(path, e))
}

/// A parsed sweep CSV row, as much as plotting and replay need.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SweepRecord {
    pub policy: String,
    pub ratio: f64,
    pub r_p: Option<f64>,
    pub r_d: Option<f64>,
    pub kl: f64,
    pub top1_match: f64,
    pub max_abs: f64,
    pub retained_prefill: usize,
    pub retained_decoding: usize,
    pub wall_ms: f64,
}

impl SweepRecord {
    pub fn metric(&self, name: &str) -> Result<f64> {
        match name {
            "kl" => Ok(self.kl),
            "top1_match" => Ok(self.top1_match),
            "max_abs" => Ok(self.max_abs),
            "wall_ms" => Ok(self.wall_ms),
            "retained_prefill" => Ok(self.retained_prefill as f64),
            "retained_decoding" => Ok(self.retained_decoding as f64),
            _ => Err(Error::Config(format!("unknown metric {name:?}"))),
        }
    }
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRecord>> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_sweep_csv(&raw).map_err(|e| match e {
        Error::Csv(c) => Error::format(path, c.to_string()),
        other => other,
    })
}

pub fn parse_sweep_csv(raw: &[u8]) -> Result<Vec<SweepRecord>> {
    let mut reader = csv::Reader::from_reader(raw);
    let headers = reader.headers()?.clone();
    if headers.iter().ne(SWEEP_COLUMNS) {
        return Err(Error::Csv(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        ))));
    }
    Ok(reader.deserialize().collect::<Result<Vec<SweepRecord>, _>>()?)
}

/// `label,value` pairs from an external score file.
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(raw.as_slice());
    let headers = reader.headers()?.clone();
    if headers.iter().ne(["label", "value"]) {
        return Err(Error::format(path, "expected header `label,value`"));
    }
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<(String, f64)>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub label: String,
    pub value: f64,
    pub delta_p: f64,
}

/// ΔP of every score against the one labelled `base` (case-insensitive).
pub fn delta_table(scores: &[(String, f64)], base: &str) -> Result<Vec<DeltaRow>> {
    let p_base = scores
        .iter()
        .find(|(l, _)| l.eq_ignore_ascii_case(base))
        .map(|&(_, v)| v)
        .ok_or_else(|| Error::Config(format!("no baseline row labelled {base:?}")))?;
    scores
        .iter()
        .map(|(label, value)| {
            Ok(DeltaRow {
                label: label.clone(),
                value: *value,
                delta_p: delta_p(*value, p_base)?,
            })
        })
        .collect()
}

pub fn delta_csv(rows: &[DeltaRow]) -> String {
    let mut out = String::from("label,value,delta_p\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.label, r.value, sig9(r.delta_p));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub policy: PolicyKind,
    pub ratio: f64,
    pub repetitions: usize,
    pub median_us: f64,
    pub p95_us: f64,
    pub tokens_per_sec: f64,
}

fn percentile(sorted: &[Duration], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1].as_secs_f64() * 1e6
}

/// Prefill selection latency (median and p95 over `repetitions` runs) and
/// generation throughput for each configured policy at `ratio`.
pub fn bench_policies(config: &ExperimentConfig, ratio: f64, repetitions: usize) -> Result<Vec<BenchRow>> {
    let repetitions = repetitions.max(1);
    let inputs = SweepInputs::build(config)?;
    let (_, mut trace, _) = prefill(&inputs.model, &inputs.prompt, TraceMode::Full)?;
    trace.meta.shots = inputs.seg.shots().to_vec();
    trace.meta.mandatory = inputs.seg.mandatory().to_vec();
    let mut rows = Vec::with_capacity(config.policies.len());
    for &kind in &config.policies {
        let policy = config.policy(kind, ratio);
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            let set = policies::run_policy(&policy, &trace, &inputs.seg)?;
            times.push(start.elapsed());
            std::hint::black_box(set);
        }
        times.sort_unstable();
        let start = Instant::now();
        let run = generate_with(
            &inputs.model,
            &inputs.prompt,
            &policy,
            &inputs.seg,
            &GenerateOptions {
                max_new: config.max_new,
                ..Default::default()
            },
        )?;
        let secs = start.elapsed().as_secs_f64();
        rows.push(BenchRow {
            policy: kind,
            ratio,
            repetitions,
            median_us: percentile(&times, 0.5),
            p95_us: percentile(&times, 0.95),
            tokens_per_sec: run.generated_ids.len() as f64 / secs.max(1e-12),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("policy,ratio,repetitions,median_us,p95_us,tokens_per_sec\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.3},{:.3},{:.1}",
            r.policy, r.ratio, r.repetitions, r.median_us, r.p95_us, r.tokens_per_sec
        );
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line chart of `metric` against ratio (descending left to right), one
/// polyline per policy in order of first appearance.
pub fn sweep_svg(records: &[SweepRecord], metric: &str) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Config("sweep has no rows to plot".into()));
    }
    let mut policies: Vec<&str> = Vec::new();
    for r in records {
        if !policies.contains(&r.policy.as_str()) {
            policies.push(&r.policy);
        }
    }
    let mut ratios: Vec<f64> = records.iter().map(|r| r.ratio).collect();
    ratios.sort_by(|a, b| b.total_cmp(a));
    ratios.dedup();
    let values = records
        .iter()
        .map(|r| r.metric(metric))
        .collect::<Result<Vec<f64>>>()?;
    let y_max = values.iter().copied().fold(0.0f64, f64::max);
    let y_max = if y_max > 0.0 { y_max * 1.05 } else { 1.0 };

    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 150.0, 30.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let (r_hi, r_lo) = (ratios[0], ratios[ratios.len() - 1]);
    let x_of = |r: f64| {
        if r_hi == r_lo {
            left + plot_w / 2.0
        } else {
            left + plot_w * (r_hi - r) / (r_hi - r_lo)
        }
    };
    let y_of = |v: f64| top + plot_h * (1.0 - v / y_max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        b = top + plot_h,
        r = left + plot_w
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{b}" stroke="black"/>"#,
        b = top + plot_h
    );
    for &r in &ratios {
        let x = x_of(r);
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="middle">{r}</text>"#,
            y = top + plot_h + 16.0
        );
    }
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="end">{v:.4}</text>"#,
            x = left - 6.0,
            y = y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{x:.2}" y="{y:.2}" text-anchor="middle">compression ratio</text>"#,
        x = left + plot_w / 2.0,
        y = height - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{y:.2}" text-anchor="middle" transform="rotate(-90 14 {y:.2})">{metric}</text>"#,
        y = top + plot_h / 2.0
    );
    for (i, policy) in policies.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = records
            .iter()
            .zip(&values)
            .filter(|(r, _)| r.policy == *policy)
            .map(|(r, &v)| (r.ratio, v))
            .collect();
        pts.sort_by(|a, b| b.0.total_cmp(&a.0));
        let coords: Vec<String> = pts
            .iter()
            .map(|&(r, v)| format!("{:.2},{:.2}", x_of(r), y_of(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = top + 14.0 * i as f64 + 6.0;
        let lx = left + plot_w + 14.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.2}" y="{y:.2}" width="10" height="3" fill="{color}"/>"#,
            y = ly - 3.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{y:.2}">{policy}</text>"#,
            x = lx + 14.0,
            y = ly + 1.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Reads a sweep CSV and writes its chart. Nothing is written on error.
pub fn plot_sweep(csv_path: impl AsRef<Path>, out: impl AsRef<Path>, metric: &str) -> Result<()> {
    let records = read_sweep_csv(csv_path)?;
    let svg = sweep_svg(&records, metric)?;
    let out = out.as_ref();
    fs::write(out, svg).map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_p_examples() {
        assert!((delta_p(47.33, 46.00).unwrap() - 0.0289).abs() < 1e-4);
        assert!((delta_p(0.5143, 0.7945).unwrap() + 0.3527).abs() < 1e-4);
        assert_eq!(delta_p(3.5, 3.5).unwrap(), 0.0);
        assert!(matches!(delta_p(1.0, 0.0), Err(Error::Arithmetic(_))));
        assert!(delta_p(0.4, 0.5).unwrap() < 0.0);
    }

    #[test]
    fn identical_logits_zero_divergence() {
        let a = vec![vec![0.1f32, 2.0, -1.0], vec![3.0, 0.0, 0.5]];
        let d = divergence(&a, &a).unwrap();
        assert_eq!(d.kl, 0.0);
        assert_eq!(d.top1_match, 1.0);
        assert_eq!(d.max_abs, 0.0);
    }

    #[test]
    fn divergence_shape_mismatch() {
        let a = vec![vec![0.0f32; 3]];
        let b = vec![vec![0.0f32; 4]];
        assert!(matches!(divergence(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(divergence(&a, &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn default_grid() {
        assert_eq!(default_ratios(), vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]);
    }

    #[test]
    fn delta_table_needs_base() {
        let scores = vec![("FullKV".to_string(), 46.0), ("ShotKV".to_string(), 47.33)];
        let rows = delta_table(&scores, "fullkv").unwrap();
        assert_eq!(rows[0].delta_p, 0.0);
        assert!((rows[1].delta_p - 0.028913).abs() < 1e-6);
        assert!(delta_table(&scores, "base").is_err());
    }

    fn record(policy: &str, ratio: f64, kl: f64) -> SweepRecord {
        SweepRecord {
            policy: policy.into(),
            ratio,
            r_p: None,
            r_d: None,
            kl,
            top1_match: 1.0,
            max_abs: 0.0,
            retained_prefill: 1,
            retained_decoding: 1,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn svg_has_one_polyline_per_policy() {
        let mut recs = Vec::new();
        for p in ["A", "B"] {
            for r in [0.9, 0.5, 0.1] {
                recs.push(record(p, r, r));
            }
        }
        let svg = sweep_svg(&recs, "kl").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(sweep_svg(&[], "kl").is_err());
        assert!(sweep_svg(&recs, "nope").is_err());
    }
}

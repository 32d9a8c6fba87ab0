//! Token-importance scoring and retention selection.
//!
//! Every prefill policy maps an attention trace (plus the shot layout of the
//! prompt) to a [`RetainedSet`]; decoding-time behaviour lives in
//! [`DecodingCompressor`]. Selection only ever compares scores, so scaling a
//! trace by a positive constant never changes what is kept.
//!
//! Ordering rules used throughout:
//! - token top-k: larger score first, ties to the higher (more recent) index;
//! - shots: larger score first, ties to the lower shot index;
//! - chunks: same as tokens, ties to the later chunk.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{budget_tokens, Budget, KVCacheSet, RetainedSet, Segment};
use crate::tinyformer::StepAttention;
use crate::traceio::{AttentionTrace, TraceMode};

/// Shot layout of a prompt. Tokens outside every shot are mandatory and are
/// always retained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSegmentation {
    prompt_len: usize,
    shots: Vec<[usize; 2]>,
    mandatory: Vec<[usize; 2]>,
}

impl ShotSegmentation {
    /// `mandatory` lists the ranges the caller knows are non-shot text; any
    /// other gap between shots is added to it.
    pub fn new(prompt_len: usize, shots: Vec<[usize; 2]>, mandatory: Vec<[usize; 2]>) -> Result<Self> {
        let bad = |msg: String| Err(Error::Segmentation(msg));
        for (kind, spans) in [("shot", &shots), ("mandatory", &mandatory)] {
            for s in spans.iter() {
                if s[0] >= s[1] {
                    return bad(format!("{kind} range {s:?} is empty"));
                }
                if s[1] > prompt_len {
                    return bad(format!(
                        "{kind} range {s:?} exceeds prompt length {prompt_len}"
                    ));
                }
            }
            if let Some(w) = spans.windows(2).find(|w| w[0][1] > w[1][0]) {
                return bad(format!(
                    "{kind} ranges {:?} and {:?} overlap or are unsorted",
                    w[0], w[1]
                ));
            }
        }
        for m in &mandatory {
            if let Some(s) = shots.iter().find(|s| s[0] < m[1] && m[0] < s[1]) {
                return bad(format!("mandatory range {m:?} intersects shot {s:?}"));
            }
        }
        let mut covered = vec![false; prompt_len];
        for s in &shots {
            covered[s[0]..s[1]].iter_mut().for_each(|c| *c = true);
        }
        Ok(ShotSegmentation {
            prompt_len,
            shots,
            mandatory: runs(&covered, false),
        })
    }

    /// One shot spanning the whole prompt.
    pub fn whole_prompt(prompt_len: usize) -> Result<Self> {
        let shots = if prompt_len == 0 {
            vec![]
        } else {
            vec![[0, prompt_len]]
        };
        Self::new(prompt_len, shots, vec![])
    }

    /// Splits on `marker`: every piece except the last becomes a shot
    /// (together with the marker that ends it); the last piece is the
    /// mandatory question. Without any marker the whole prompt is one shot.
    pub fn from_marker(text: &[u8], marker: &[u8]) -> Result<Self> {
        if marker.is_empty() {
            return Err(Error::Segmentation("empty shot marker".into()));
        }
        let mut shots = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i + marker.len() <= text.len() {
            if &text[i..i + marker.len()] == marker {
                let end = i + marker.len();
                shots.push([start, end]);
                start = end;
                i = end;
            } else {
                i += 1;
            }
        }
        if shots.is_empty() {
            return Self::whole_prompt(text.len());
        }
        Self::new(text.len(), shots, vec![])
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn shots(&self) -> &[[usize; 2]] {
        &self.shots
    }

    pub fn mandatory(&self) -> &[[usize; 2]] {
        &self.mandatory
    }

    pub fn n_shots(&self) -> usize {
        self.shots.len()
    }

    pub fn shot_lengths(&self) -> Vec<usize> {
        self.shots.iter().map(|s| s[1] - s[0]).collect()
    }

    pub fn mandatory_cost(&self) -> usize {
        self.mandatory.iter().map(|m| m[1] - m[0]).sum()
    }
}

fn runs(flags: &[bool], value: bool) -> Vec<[usize; 2]> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().enumerate() {
        match (f == value, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push([s, i]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push([s, flags.len()]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    FullKV,
    StreamingLLM,
    H2O,
    SnapKV,
    PyramidKV,
    ChunkKV,
    ShotKV,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::FullKV,
        PolicyKind::StreamingLLM,
        PolicyKind::H2O,
        PolicyKind::SnapKV,
        PolicyKind::PyramidKV,
        PolicyKind::ChunkKV,
        PolicyKind::ShotKV,
    ];

    /// The compressing policies (everything except FullKV).
    pub const COMPRESSING: [PolicyKind; 6] = [
        PolicyKind::StreamingLLM,
        PolicyKind::H2O,
        PolicyKind::SnapKV,
        PolicyKind::PyramidKV,
        PolicyKind::ChunkKV,
        PolicyKind::ShotKV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::FullKV => "FullKV",
            PolicyKind::StreamingLLM => "StreamingLLM",
            PolicyKind::H2O => "H2O",
            PolicyKind::SnapKV => "SnapKV",
            PolicyKind::PyramidKV => "PyramidKV",
            PolicyKind::ChunkKV => "ChunkKV",
            PolicyKind::ShotKV => "ShotKV",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown policy kind {s:?}")))
    }
}

/// Which prefill query rows drive ShotKV's shot scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShotQuery {
    /// The final prompt position only.
    #[default]
    LastRow,
    /// Mean over the last `n` prompt positions.
    Window(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    pub sink_count: usize,
    pub obs_window: usize,
    pub pool_kernel: usize,
    pub recent_count: usize,
    pub chunk_size: usize,
    pub pyramid_min_ratio: f64,
    pub shot_query: ShotQuery,
    /// Accumulate ShotKV decoding scores over steps instead of using only the
    /// current step.
    pub accumulate_decoding: bool,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            sink_count: 4,
            obs_window: 32,
            pool_kernel: 7,
            recent_count: 32,
            chunk_size: 10,
            pyramid_min_ratio: 0.2,
            shot_query: ShotQuery::LastRow,
            accumulate_decoding: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub budget: Budget,
    #[serde(default)]
    pub params: PolicyParams,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, ratio: f64) -> Self {
        PolicyConfig {
            kind,
            budget: Budget::single(ratio),
            params: PolicyParams::default(),
        }
    }

    pub fn full() -> Self {
        Self::new(PolicyKind::FullKV, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        let p = &self.params;
        for (name, v) in [
            ("sink_count", p.sink_count),
            ("obs_window", p.obs_window),
            ("pool_kernel", p.pool_kernel),
            ("recent_count", p.recent_count),
            ("chunk_size", p.chunk_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if p.pool_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "pool_kernel must be odd, got {}",
                p.pool_kernel
            )));
        }
        if !(p.pyramid_min_ratio > 0.0 && p.pyramid_min_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "pyramid_min_ratio {} outside (0, 1]",
                p.pyramid_min_ratio
            )));
        }
        if let ShotQuery::Window(0) = p.shot_query {
            return Err(Error::Config("shot query window must be positive".into()));
        }
        Ok(())
    }
}

/// Which rows and heads went into a score vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub query_rows: usize,
    pub layers: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub segment: Segment,
    /// Original position of each scored token, ascending.
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
    pub provenance: Provenance,
}

fn score_desc_then_later(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    |&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a))
}

/// Indices of the `k` largest scores, ascending.
pub fn topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Selection(format!(
            "k = {k} exceeds {} scores",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, score_desc_then_later(scores));
    }
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

fn need_query_rows(trace: &AttentionTrace, rows: usize) -> Result<()> {
    if trace.queries() < rows {
        return Err(Error::Trace(format!(
            "need the last {rows} query rows, trace holds {}",
            trace.queries()
        )));
    }
    Ok(())
}

/// Per-key attention summed over the last `rows` query rows, every head and
/// every layer.
fn window_key_scores(trace: &AttentionTrace, rows: usize) -> Vec<f64> {
    let mut scores = vec![0.0f64; trace.keys()];
    for l in 0..trace.layers() {
        for h in 0..trace.heads() {
            for q in trace.queries() - rows..trace.queries() {
                for (s, &w) in scores.iter_mut().zip(trace.row(l, h, q)) {
                    *s += w as f64;
                }
            }
        }
    }
    scores
}

/// Mean attention per token of each shot, summed over heads and layers, from
/// the final prompt query.
pub fn score_prefill_shots(trace: &AttentionTrace, seg: &ShotSegmentation) -> Result<Vec<f64>> {
    score_prefill_shots_with(trace, seg, ShotQuery::LastRow)
}

pub fn score_prefill_shots_with(
    trace: &AttentionTrace,
    seg: &ShotSegmentation,
    query: ShotQuery,
) -> Result<Vec<f64>> {
    check_seg(trace, seg)?;
    let rows = match query {
        ShotQuery::LastRow => 1,
        ShotQuery::Window(n) => n.min(trace.keys()),
    };
    need_query_rows(trace, rows)?;
    let mut per_token = window_key_scores(trace, rows);
    if rows > 1 {
        per_token.iter_mut().for_each(|s| *s /= rows as f64);
    }
    Ok(seg
        .shots()
        .iter()
        .map(|s| {
            let sum: f64 = per_token[s[0]..s[1]].iter().sum();
            sum / (s[1] - s[0]) as f64
        })
        .collect())
}

fn check_seg(trace: &AttentionTrace, seg: &ShotSegmentation) -> Result<()> {
    if seg.prompt_len() != trace.keys() {
        return Err(Error::Segmentation(format!(
            "segmentation covers {} tokens, trace has T = {}",
            seg.prompt_len(),
            trace.keys()
        )));
    }
    Ok(())
}

/// Greedy shot selection: scan shots by descending score and take each one
/// whose length still fits; misfits are skipped, not terminal. Returns shot
/// ids ascending.
pub fn select_shots(
    shot_scores: &[f64],
    shot_lengths: &[usize],
    prefill_budget: usize,
    mandatory_cost: usize,
) -> Result<Vec<usize>> {
    if shot_scores.len() != shot_lengths.len() {
        return Err(Error::Shape(format!(
            "{} shot scores for {} shots",
            shot_scores.len(),
            shot_lengths.len()
        )));
    }
    let mut remaining = prefill_budget.checked_sub(mandatory_cost).ok_or_else(|| {
        Error::Budget(format!(
            "prefill budget {prefill_budget} is below the mandatory cost {mandatory_cost}"
        ))
    })?;
    let mut order: Vec<usize> = (0..shot_scores.len()).collect();
    order.sort_by(|&a, &b| shot_scores[b].total_cmp(&shot_scores[a]).then(a.cmp(&b)));
    let mut chosen = Vec::new();
    for i in order {
        if shot_lengths[i] <= remaining {
            remaining -= shot_lengths[i];
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Mandatory tokens plus every token of the preserved shots.
pub fn shotkv_prefill(
    trace: &AttentionTrace,
    seg: &ShotSegmentation,
    r_p: f64,
    min_keep: usize,
) -> Result<RetainedSet> {
    shotkv_prefill_with(trace, seg, r_p, min_keep, ShotQuery::LastRow)
}

pub fn shotkv_prefill_with(
    trace: &AttentionTrace,
    seg: &ShotSegmentation,
    r_p: f64,
    min_keep: usize,
    query: ShotQuery,
) -> Result<RetainedSet> {
    let budget = budget_tokens(r_p, seg.prompt_len(), min_keep)?;
    let scores = score_prefill_shots_with(trace, seg, query)?;
    let chosen = select_shots(&scores, &seg.shot_lengths(), budget, seg.mandatory_cost())?;
    let mut spans: Vec<[usize; 2]> = seg.mandatory().to_vec();
    spans.extend(chosen.iter().map(|&i| seg.shots()[i]));
    spans.sort_unstable();
    let indices = spans.iter().flat_map(|s| s[0]..s[1]).collect();
    Ok(RetainedSet::global(Segment::Prefill, indices))
}

/// Total attention each decoding-segment key receives from the current query,
/// summed over heads and layers.
pub fn score_decoding_tokens(step: &StepAttention, prefill_len: usize) -> Result<ScoreVector> {
    if step.layers.is_empty() || step.heads == 0 {
        return Err(Error::Trace("step attention has no layers or heads".into()));
    }
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for (l, layer) in step.layers.iter().enumerate() {
        if layer.weights.len() != step.heads * layer.positions.len() {
            return Err(Error::Trace(format!(
                "layer {l}: {} weights for {} heads x {} positions",
                layer.weights.len(),
                step.heads,
                layer.positions.len()
            )));
        }
        for h in 0..step.heads {
            for (p, w) in step.restricted(l, h, prefill_len) {
                *acc.entry(p).or_default() += w as f64;
            }
        }
    }
    let (positions, scores) = acc.into_iter().unzip();
    Ok(ScoreVector {
        segment: Segment::Decoding,
        positions,
        scores,
        provenance: Provenance {
            query_rows: 1,
            layers: step.layers.len(),
            heads: step.heads,
        },
    })
}

/// Top-k decoding tokens with `k = budget_tokens(r_d, decoding_len)`, where
/// `decoding_len` counts every decoding token generated so far.
pub fn shotkv_decode_evict(
    scores: &ScoreVector,
    r_d: f64,
    decoding_len: usize,
    min_keep: usize,
) -> Result<RetainedSet> {
    if scores.positions.is_empty() {
        return Err(Error::Selection("decoding segment is empty".into()));
    }
    let k = budget_tokens(r_d, decoding_len, min_keep)?.min(scores.positions.len());
    let keep = topk(&scores.scores, k)?;
    Ok(RetainedSet::global(
        Segment::Decoding,
        keep.into_iter().map(|i| scores.positions[i]).collect(),
    ))
}

/// First `sink_count` tokens plus the most recent `budget - sink_count`.
pub fn streaming_llm(n: usize, sink_count: usize, budget: usize) -> Result<RetainedSet> {
    if budget >= n {
        return Ok(RetainedSet::global(Segment::Prefill, (0..n).collect()));
    }
    if budget < sink_count {
        return Err(Error::Budget(format!(
            "budget {budget} is below sink_count {sink_count}"
        )));
    }
    let window = budget - sink_count;
    let indices = (0..sink_count).chain(n - window..n).collect();
    Ok(RetainedSet::global(Segment::Prefill, indices))
}

/// Heavy hitters by column sums over every prompt query, plus a recency window.
/// Per layer and head.
pub fn h2o(trace: &AttentionTrace, budget: usize, recent_count: usize) -> Result<RetainedSet> {
    let n = trace.keys();
    if trace.mode() != TraceMode::Full {
        return Err(Error::Trace("H2O needs a full trace".into()));
    }
    let mut units = Vec::with_capacity(trace.layers() * trace.heads());
    for l in 0..trace.layers() {
        for h in 0..trace.heads() {
            if budget >= n {
                units.push((0..n).collect());
                continue;
            }
            if budget < recent_count {
                return Err(Error::Budget(format!(
                    "budget {budget} is below recent_count {recent_count}"
                )));
            }
            let mut cum = vec![0.0f64; n];
            for q in 0..trace.queries() {
                for (c, &w) in cum.iter_mut().zip(trace.row(l, h, q)) {
                    *c += w as f64;
                }
            }
            let split = n - recent_count;
            let mut keep = topk(&cum[..split], budget - recent_count)?;
            keep.extend(split..n);
            units.push(keep);
        }
    }
    Ok(RetainedSet::per_layer_head(Segment::Prefill, units))
}

/// Sliding max over `scores` with an odd `kernel`; the window is clipped at
/// the edges.
pub fn max_pool(scores: &[f64], kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    (0..scores.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(scores.len());
            scores[lo..hi]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn snap_select(
    trace: &AttentionTrace,
    layer: usize,
    heads: std::ops::Range<usize>,
    budget: usize,
    obs_window: usize,
    pool_kernel: usize,
) -> Result<Vec<usize>> {
    let n = trace.keys();
    if budget >= n {
        return Ok((0..n).collect());
    }
    if n <= obs_window {
        return Err(Error::Trace(format!(
            "prompt of {n} tokens is not longer than obs_window {obs_window}"
        )));
    }
    need_query_rows(trace, obs_window)?;
    let prefix = n - obs_window;
    let mut scores = vec![0.0f64; prefix];
    for h in heads {
        for q in trace.queries() - obs_window..trace.queries() {
            for (s, &w) in scores.iter_mut().zip(&trace.row(layer, h, q)[..prefix]) {
                *s += w as f64;
            }
        }
    }
    let pooled = max_pool(&scores, pool_kernel);
    let keep_window = obs_window.min(budget);
    let mut keep = topk(&pooled, budget - keep_window)?;
    keep.extend(n - keep_window..n);
    Ok(keep)
}

fn check_kernel(pool_kernel: usize) -> Result<()> {
    if pool_kernel.is_multiple_of(2) {
        Err(Error::Config(format!(
            "pool_kernel must be odd, got {pool_kernel}"
        )))
    } else {
        Ok(())
    }
}

/// Observation-window scoring with max pooling, per layer and head. The
/// window itself is always kept (truncated to the budget if needed).
pub fn snapkv(
    trace: &AttentionTrace,
    budget: usize,
    obs_window: usize,
    pool_kernel: usize,
) -> Result<RetainedSet> {
    check_kernel(pool_kernel)?;
    let mut units = Vec::with_capacity(trace.layers() * trace.heads());
    for l in 0..trace.layers() {
        for h in 0..trace.heads() {
            units.push(snap_select(trace, l, h..h + 1, budget, obs_window, pool_kernel)?);
        }
    }
    Ok(RetainedSet::per_layer_head(Segment::Prefill, units))
}

/// Integer per-layer budgets decaying linearly from the first layer to
/// `min_ratio` times that at the last, each capped at `n`, summing exactly to
/// `per_layer * layers` (largest-remainder rounding, ties to lower layers).
pub fn pyramid_budgets(
    per_layer: usize,
    layers: usize,
    n: usize,
    min_ratio: f64,
    min_keep: usize,
) -> Result<Vec<usize>> {
    if layers == 0 {
        return Err(Error::Config("pyramid needs at least one layer".into()));
    }
    if !(min_ratio > 0.0 && min_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "pyramid_min_ratio {min_ratio} outside (0, 1]"
        )));
    }
    let per_layer = per_layer.min(n);
    let total = per_layer * layers;
    let weights: Vec<f64> = (0..layers)
        .map(|l| {
            if layers == 1 {
                1.0
            } else {
                1.0 - (1.0 - min_ratio) * l as f64 / (layers - 1) as f64
            }
        })
        .collect();

    let mut capped = vec![false; layers];
    let mut shares = vec![0.0f64; layers];
    loop {
        let capped_total = capped.iter().filter(|&&c| c).count() * n;
        let free_weight: f64 = (0..layers).filter(|&l| !capped[l]).map(|l| weights[l]).sum();
        let scale = (total - capped_total) as f64 / free_weight;
        let mut changed = false;
        for l in 0..layers {
            if capped[l] {
                shares[l] = n as f64;
            } else {
                shares[l] = scale * weights[l];
                if shares[l] > n as f64 {
                    capped[l] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut out: Vec<usize> = shares.iter().map(|s| (s.floor() as usize).min(n)).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..layers).filter(|&l| out[l] < n).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(assigned);
    for l in order.into_iter().cycle().take(layers * 2) {
        if left == 0 {
            break;
        }
        if out[l] < n {
            out[l] += 1;
            left -= 1;
        }
    }
    debug_assert_eq!(out.iter().sum::<usize>(), total);
    let smallest = *out.iter().min().unwrap();
    if smallest < min_keep.min(n) {
        return Err(Error::Budget(format!(
            "layer budgets {out:?} fall below min_keep {min_keep}"
        )));
    }
    Ok(out)
}

/// SnapKV-style selection with layer-decaying budgets, one set per layer.
pub fn pyramidkv(
    trace: &AttentionTrace,
    budget: usize,
    obs_window: usize,
    pool_kernel: usize,
    pyramid_min_ratio: f64,
    min_keep: usize,
) -> Result<RetainedSet> {
    check_kernel(pool_kernel)?;
    let budgets = pyramid_budgets(
        budget,
        trace.layers(),
        trace.keys(),
        pyramid_min_ratio,
        min_keep,
    )?;
    let units = budgets
        .iter()
        .enumerate()
        .map(|(l, &b)| snap_select(trace, l, 0..trace.heads(), b, obs_window, pool_kernel))
        .collect::<Result<_>>()?;
    Ok(RetainedSet::per_layer(Segment::Prefill, units))
}

/// Fixed-size chunks ranked by observation-window attention mass; whole chunks
/// are kept in rank order and the first chunk that does not fit is trimmed to
/// its highest-scoring tokens so the budget is met exactly.
pub fn chunkkv(
    trace: &AttentionTrace,
    budget: usize,
    chunk_size: usize,
    obs_window: usize,
) -> Result<RetainedSet> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk_size must be positive".into()));
    }
    let n = trace.keys();
    if budget >= n {
        return Ok(RetainedSet::global(Segment::Prefill, (0..n).collect()));
    }
    let rows = obs_window.min(trace.queries());
    let token_scores = window_key_scores(trace, rows);
    let chunks: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(chunk_size)
        .map(|s| s..(s + chunk_size).min(n))
        .collect();
    let chunk_scores: Vec<f64> = chunks
        .iter()
        .map(|c| token_scores[c.clone()].iter().sum())
        .collect();
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    order.sort_by(score_desc_then_later(&chunk_scores));

    let mut keep = Vec::with_capacity(budget);
    let mut left = budget;
    for c in order {
        if left == 0 {
            break;
        }
        let range = chunks[c].clone();
        if range.len() <= left {
            left -= range.len();
            keep.extend(range);
        } else {
            let part = topk(&token_scores[range.clone()], left)?;
            keep.extend(part.into_iter().map(|i| range.start + i));
            left = 0;
        }
    }
    keep.sort_unstable();
    Ok(RetainedSet::global(Segment::Prefill, keep))
}

/// Prefill retention for any policy kind. Window-type parameters larger than
/// the budget are shrunk to fit it so every ratio is feasible.
pub fn run_policy(
    policy: &PolicyConfig,
    trace: &AttentionTrace,
    seg: &ShotSegmentation,
) -> Result<RetainedSet> {
    policy.validate()?;
    check_seg(trace, seg)?;
    let n = trace.keys();
    let p = &policy.params;
    let min_keep = policy.budget.min_keep;
    let r = policy.budget.prefill_ratio();
    let budget = budget_tokens(r, n, min_keep)?;
    let obs = p.obs_window.min(n.saturating_sub(1)).max(1);
    match policy.kind {
        PolicyKind::FullKV => Ok(RetainedSet::global(Segment::Prefill, (0..n).collect())),
        PolicyKind::StreamingLLM => streaming_llm(n, p.sink_count.min(budget), budget),
        PolicyKind::H2O => h2o(trace, budget, p.recent_count.min(budget / 2)),
        PolicyKind::SnapKV => snapkv(trace, budget, obs, p.pool_kernel),
        PolicyKind::PyramidKV => {
            pyramidkv(trace, budget, obs, p.pool_kernel, p.pyramid_min_ratio, min_keep)
        }
        PolicyKind::ChunkKV => chunkkv(trace, budget, p.chunk_size, p.obs_window),
        PolicyKind::ShotKV => shotkv_prefill_with(trace, seg, r, min_keep, p.shot_query),
    }
}

/// Decoding-phase eviction state for one generation.
///
/// ShotKV ranks decoding tokens by the current step's attention (optionally
/// accumulated), StreamingLLM keeps the most recent tokens, H2O keeps per-head
/// heavy hitters by accumulated attention plus a recency window. The
/// prefill-only policies (SnapKV, PyramidKV, ChunkKV) and FullKV never evict
/// decoding tokens.
#[derive(Debug, Clone)]
pub struct DecodingCompressor {
    kind: PolicyKind,
    ratio: f64,
    min_keep: usize,
    recent_count: usize,
    accumulate: bool,
    layers: usize,
    heads: usize,
    /// Accumulated scores per unit, keyed by position.
    acc: Vec<BTreeMap<usize, f64>>,
}

impl DecodingCompressor {
    pub fn new(policy: &PolicyConfig, layers: usize, heads: usize) -> Self {
        let units = match policy.kind {
            PolicyKind::H2O => layers * heads,
            _ => 1,
        };
        DecodingCompressor {
            kind: policy.kind,
            ratio: policy.budget.decoding_ratio(),
            min_keep: policy.budget.min_keep,
            recent_count: policy.params.recent_count,
            accumulate: policy.params.accumulate_decoding,
            layers,
            heads,
            acc: vec![BTreeMap::new(); units],
        }
    }

    /// Retention to apply after a decode step, if the decoding segment is
    /// over budget.
    pub fn after_step(
        &mut self,
        cache: &KVCacheSet,
        step: &StepAttention,
    ) -> Result<Option<RetainedSet>> {
        let generated = cache.decoding_total();
        let prefill_len = cache.prefill_len();
        match self.kind {
            PolicyKind::FullKV | PolicyKind::SnapKV | PolicyKind::PyramidKV | PolicyKind::ChunkKV => {
                Ok(None)
            }
            PolicyKind::StreamingLLM => {
                let budget = budget_tokens(self.ratio, generated, self.min_keep)?;
                let current = cache.visible_positions(0, 0, Segment::Decoding);
                if current.len() <= budget {
                    return Ok(None);
                }
                Ok(Some(RetainedSet::global(
                    Segment::Decoding,
                    current[current.len() - budget..].to_vec(),
                )))
            }
            PolicyKind::ShotKV => {
                let mut scores = score_decoding_tokens(step, prefill_len)?;
                if self.accumulate {
                    let acc = &mut self.acc[0];
                    for (p, s) in scores.positions.iter().zip(scores.scores.iter_mut()) {
                        let total = acc.entry(*p).or_default();
                        *total += *s;
                        *s = *total;
                    }
                }
                let budget = budget_tokens(self.ratio, generated, self.min_keep)?;
                if scores.positions.len() <= budget {
                    return Ok(None);
                }
                let set = shotkv_decode_evict(&scores, self.ratio, generated, self.min_keep)?;
                if self.accumulate {
                    let kept = &set.units[0];
                    self.acc[0].retain(|p, _| kept.binary_search(p).is_ok());
                }
                Ok(Some(set))
            }
            PolicyKind::H2O => self.h2o_step(cache, step, generated, prefill_len),
        }
    }

    fn h2o_step(
        &mut self,
        cache: &KVCacheSet,
        step: &StepAttention,
        generated: usize,
        prefill_len: usize,
    ) -> Result<Option<RetainedSet>> {
        let budget = budget_tokens(self.ratio, generated, self.min_keep)?;
        let recent = self.recent_count.min(budget / 2);
        let mut units = Vec::with_capacity(self.layers * self.heads);
        let mut evicting = false;
        for l in 0..self.layers {
            for h in 0..self.heads {
                let acc = &mut self.acc[l * self.heads + h];
                for (p, w) in step.restricted(l, h, prefill_len) {
                    *acc.entry(p).or_default() += w as f64;
                }
                let current = cache.visible_positions(l, h, Segment::Decoding);
                if current.len() <= budget {
                    units.push(current);
                    continue;
                }
                evicting = true;
                let split = current.len() - recent;
                let older: Vec<f64> = current[..split]
                    .iter()
                    .map(|p| acc.get(p).copied().unwrap_or(0.0))
                    .collect();
                let mut keep: Vec<usize> = topk(&older, budget - recent)?
                    .into_iter()
                    .map(|i| current[i])
                    .collect();
                keep.extend_from_slice(&current[split..]);
                acc.retain(|p, _| keep.binary_search(p).is_ok());
                units.push(keep);
            }
        }
        Ok(evicting.then(|| RetainedSet::per_layer_head(Segment::Decoding, units)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinyformer::LayerStep;
    use crate::traceio::TraceMeta;

    fn last_row_trace(layers: usize, heads: usize, row: &[f32]) -> AttentionTrace {
        let mut w = Vec::new();
        for _ in 0..layers * heads {
            w.extend_from_slice(row);
        }
        AttentionTrace::new(layers, heads, 1, row.len(), w, TraceMeta::default()).unwrap()
    }

    fn uniform_full(n: usize) -> AttentionTrace {
        let w = vec![1.0 / n as f32; n * n];
        AttentionTrace::new(1, 1, n, n, w, TraceMeta::default()).unwrap()
    }

    #[test]
    fn shot_score_direct_substitution() {
        let trace = last_row_trace(1, 1, &[0.5, 0.3, 0.2]);
        let seg = ShotSegmentation::new(3, vec![[0, 2]], vec![]).unwrap();
        let s = score_prefill_shots(&trace, &seg).unwrap();
        assert!((s[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn shot_score_normalization_cancels_length() {
        let c = 0.05f32;
        let trace = last_row_trace(3, 2, &[c; 20]);
        let seg = ShotSegmentation::new(20, vec![[0, 2], [2, 9], [9, 20]], vec![]).unwrap();
        for s in score_prefill_shots(&trace, &seg).unwrap() {
            assert!((s - c as f64 * 6.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shot_selection_examples() {
        assert_eq!(select_shots(&[3.0, 1.0, 2.0], &[5, 5, 5], 10, 0).unwrap(), vec![0, 2]);
        assert_eq!(select_shots(&[3.0, 1.0, 2.0], &[5, 5, 5], 100, 4).unwrap(), vec![0, 1, 2]);
        // a misfit does not stop the scan
        assert_eq!(select_shots(&[3.0, 2.0, 1.0], &[5, 8, 2], 8, 0).unwrap(), vec![0, 2]);
        // ties go to the lower shot index
        assert_eq!(select_shots(&[1.0, 1.0], &[3, 3], 3, 0).unwrap(), vec![0]);
        assert!(matches!(select_shots(&[1.0], &[1], 2, 3), Err(Error::Budget(_))));
    }

    #[test]
    fn shotkv_full_ratio_keeps_everything() {
        let trace = last_row_trace(1, 1, &[0.1; 10]);
        let seg = ShotSegmentation::new(10, vec![[1, 4], [4, 8]], vec![[0, 1]]).unwrap();
        let set = shotkv_prefill(&trace, &seg, 1.0, 1).unwrap();
        assert_eq!(set.units[0], (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn shotkv_keeps_only_mandatory_when_no_shot_fits() {
        let trace = last_row_trace(1, 1, &[0.1; 10]);
        // mandatory: [0,1) and [8,10) -> cost 3; budget floor(0.4*10) = 4; shots of 3 and 4 leave 1.
        let seg = ShotSegmentation::new(10, vec![[1, 4], [4, 8]], vec![[0, 1]]).unwrap();
        let set = shotkv_prefill(&trace, &seg, 0.4, 1).unwrap();
        assert_eq!(set.units[0], vec![0, 8, 9]);
    }

    #[test]
    fn gaps_become_mandatory() {
        let seg = ShotSegmentation::new(10, vec![[2, 4], [6, 8]], vec![]).unwrap();
        assert_eq!(seg.mandatory(), &[[0, 2], [4, 6], [8, 10]]);
        assert_eq!(seg.mandatory_cost(), 6);
    }

    #[test]
    fn segmentation_errors() {
        assert!(ShotSegmentation::new(5, vec![[0, 6]], vec![]).is_err());
        assert!(ShotSegmentation::new(5, vec![[0, 3], [2, 4]], vec![]).is_err());
        assert!(ShotSegmentation::new(5, vec![[0, 3]], vec![[2, 4]]).is_err());
        assert!(ShotSegmentation::new(5, vec![[2, 2]], vec![]).is_err());
    }

    #[test]
    fn marker_segmentation() {
        let seg = ShotSegmentation::from_marker(b"a1\n\nb22\n\nq?", b"\n\n").unwrap();
        assert_eq!(seg.shots(), &[[0, 4], [4, 9]]);
        assert_eq!(seg.mandatory(), &[[9, 11]]);
        let seg = ShotSegmentation::from_marker(b"no markers", b"\n\n").unwrap();
        assert_eq!(seg.shots(), &[[0, 10]]);
        assert!(seg.mandatory().is_empty());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk(&[5.0, 1.0, 5.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(topk(&[2.0, 2.0, 2.0], 1).unwrap(), vec![2]);
        assert_eq!(topk(&[], 0).unwrap(), Vec::<usize>::new());
        assert!(matches!(topk(&[1.0], 2), Err(Error::Selection(_))));
    }

    fn step(layers: usize, heads: usize, positions: Vec<usize>, row: &[f32]) -> StepAttention {
        let mut weights = Vec::new();
        for _ in 0..heads {
            weights.extend_from_slice(row);
        }
        StepAttention {
            heads,
            layers: (0..layers)
                .map(|_| LayerStep {
                    positions: positions.clone(),
                    weights: weights.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn decoding_scores_restrict_to_decoding_keys() {
        let s = step(1, 1, vec![0, 1, 2, 3], &[0.3, 0.2, 0.1, 0.4]);
        let v = score_decoding_tokens(&s, 2).unwrap();
        assert_eq!(v.positions, vec![2, 3]);
        assert!((v.scores[0] - 0.1).abs() < 1e-7 && (v.scores[1] - 0.4).abs() < 1e-7);
        let s = step(2, 3, vec![0, 1, 2], &[0.2, 0.2, 0.2]);
        let v = score_decoding_tokens(&s, 0).unwrap();
        assert!(v.scores.iter().all(|&x| (x - v.scores[0]).abs() < 1e-12));
    }

    #[test]
    fn decoding_scores_shape_error() {
        let mut s = step(1, 2, vec![0, 1], &[0.5, 0.5]);
        s.layers[0].weights.pop();
        assert!(matches!(score_decoding_tokens(&s, 0), Err(Error::Trace(_))));
    }

    #[test]
    fn decode_evict_clamps_and_identity() {
        let v = ScoreVector {
            segment: Segment::Decoding,
            positions: vec![10],
            scores: vec![0.3],
            provenance: Provenance {
                query_rows: 1,
                layers: 1,
                heads: 1,
            },
        };
        assert_eq!(shotkv_decode_evict(&v, 0.1, 1, 1).unwrap().units[0], vec![10]);
        let v = ScoreVector {
            positions: vec![10, 11, 12],
            scores: vec![0.3, 0.1, 0.2],
            ..v
        };
        assert_eq!(shotkv_decode_evict(&v, 1.0, 3, 1).unwrap().units[0], vec![10, 11, 12]);
        assert_eq!(shotkv_decode_evict(&v, 0.5, 4, 1).unwrap().units[0], vec![10, 12]);
    }

    #[test]
    fn streaming_examples() {
        let s = streaming_llm(10, 4, 6).unwrap();
        assert_eq!(s.units[0], vec![0, 1, 2, 3, 8, 9]);
        assert_eq!(streaming_llm(10, 4, 12).unwrap().units[0].len(), 10);
        assert!(matches!(streaming_llm(10, 4, 3), Err(Error::Budget(_))));
    }

    #[test]
    fn h2o_uniform_prefers_recent() {
        let trace = uniform_full(10);
        let set = h2o(&trace, 5, 2).unwrap();
        assert_eq!(set.units[0], vec![5, 6, 7, 8, 9]);
        assert_eq!(h2o(&trace, 10, 2).unwrap().units[0].len(), 10);
        assert!(matches!(h2o(&trace, 3, 4), Err(Error::Budget(_))));
        assert!(matches!(h2o(&trace.last_row(), 3, 1), Err(Error::Trace(_))));
    }

    #[test]
    fn snapkv_kernel_one_and_errors() {
        let trace = uniform_full(12);
        assert!(matches!(snapkv(&trace, 6, 2, 4), Err(Error::Config(_))));
        assert_eq!(snapkv(&trace, 12, 2, 3).unwrap().units[0].len(), 12);
        assert!(matches!(snapkv(&trace, 6, 12, 1), Err(Error::Trace(_))));
        assert_eq!(max_pool(&[1.0, 3.0, 2.0], 1), vec![1.0, 3.0, 2.0]);
        assert_eq!(max_pool(&[1.0, 3.0, 2.0, 0.0], 3), vec![3.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn pyramid_budget_shapes() {
        assert_eq!(pyramid_budgets(10, 1, 50, 0.2, 1).unwrap(), vec![10]);
        assert_eq!(pyramid_budgets(10, 4, 50, 1.0, 1).unwrap(), vec![10; 4]);
        let b = pyramid_budgets(10, 4, 50, 0.2, 1).unwrap();
        assert_eq!(b.iter().sum::<usize>(), 40);
        assert!(b.windows(2).all(|w| w[0] >= w[1]));
        // capped layers hand their excess to the others
        assert_eq!(pyramid_budgets(50, 3, 50, 0.2, 1).unwrap(), vec![50; 3]);
        let b = pyramid_budgets(45, 3, 50, 0.2, 1).unwrap();
        assert_eq!(b.iter().sum::<usize>(), 135);
        assert!(b.iter().all(|&x| x <= 50));
        assert!(matches!(pyramid_budgets(1, 4, 50, 0.2, 1), Err(Error::Budget(_))));
    }

    #[test]
    fn chunk_size_one_is_token_topk() {
        let row = [0.05f32, 0.3, 0.1, 0.1, 0.25, 0.2];
        let trace = last_row_trace(1, 1, &row);
        let set = chunkkv(&trace, 3, 1, 32).unwrap();
        let scores: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        assert_eq!(set.units[0], topk(&scores, 3).unwrap());
    }

    #[test]
    fn chunk_trim_fills_budget_exactly() {
        // chunks of 3: [0.1,0.1,0.1] [0.2,0.05,0.3] -> second chunk ranks first
        let row = [0.1f32, 0.1, 0.1, 0.2, 0.05, 0.3, 0.05, 0.05, 0.05];
        let trace = last_row_trace(1, 1, &row);
        let set = chunkkv(&trace, 5, 3, 1).unwrap();
        assert_eq!(set.units[0], vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn unknown_kind_and_bad_params() {
        assert!(matches!("nope".parse::<PolicyKind>(), Err(Error::Config(_))));
        assert_eq!("shotkv".parse::<PolicyKind>().unwrap(), PolicyKind::ShotKV);
        let mut p = PolicyConfig::new(PolicyKind::SnapKV, 0.5);
        p.params.pool_kernel = 4;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let p = PolicyConfig::new(PolicyKind::SnapKV, 1.5);
        assert!(matches!(p.validate(), Err(Error::Budget(_))));
    }

    #[test]
    fn policy_config_json_keys() {
        let p: PolicyConfig = serde_json::from_str(
            r#"{"kind":"shotkv","budget":{"ratio":{"prefill":0.5,"decoding":0.25}},"params":{"chunk_size":4}}"#,
        )
        .unwrap();
        assert_eq!(p.kind, PolicyKind::ShotKV);
        assert_eq!(p.budget.prefill_ratio(), 0.5);
        assert_eq!(p.budget.decoding_ratio(), 0.25);
        assert_eq!(p.params.chunk_size, 4);
        assert_eq!(p.params.sink_count, 4);
    }
}

//! A small deterministic decoder-only transformer.
//!
//! Byte-level tokens, pre-norm blocks (RMS norm without gain, rotary
//! self-attention, 4x GELU feed-forward, no biases) and untied embedding and
//! output matrices. Every weight is drawn from N(0, std^2) by a ChaCha8
//! stream seeded from the config, in a fixed tensor order: embedding, then per
//! layer `wq, wk, wv, wo, w_up, w_down`, then the output head.
//!
//! Keys are cached after rotation at their absolute position, so evicting a
//! token never changes the keys of the tokens that survive.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{CacheReport, KVCacheSet, RetainedSet, Segment};
use crate::policies::{self, DecodingCompressor, PolicyConfig, ShotSegmentation};
use crate::traceio::{AttentionTrace, TokenPiece, TraceMeta, TraceMode};

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Standard deviation of every initial weight.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_vocab() -> usize {
    256
}
fn default_max_seq() -> usize {
    512
}
fn default_rope_base() -> f64 {
    10_000.0
}
fn default_init_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            head_dim: 16,
            vocab_size: default_vocab(),
            max_seq: default_max_seq(),
            seed: 0,
            rope_base: default_rope_base(),
            init_std: default_init_std(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn descriptor(&self) -> String {
        format!(
            "tinyformer L={} H={} d={} vocab={} seed={} std={}",
            self.layers, self.heads, self.head_dim, self.vocab_size, self.seed, self.init_std
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text_origin: Option<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One token per byte.
pub fn tokenize(text: impl AsRef<[u8]>) -> TokenSequence {
    let bytes = text.as_ref();
    TokenSequence {
        ids: bytes.iter().map(|&b| b as u32).collect(),
        text_origin: std::str::from_utf8(bytes).ok().map(str::to_owned),
    }
}

/// Inverse of [`tokenize`]; ids above 255 are truncated to their low byte.
pub fn detokenize(tokens: &TokenSequence) -> Vec<u8> {
    tokens.ids.iter().map(|&id| id as u8).collect()
}

/// FNV-1a over the little-endian bytes of `values`.
pub fn checksum(values: &[f32]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
}

/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embed: Vec<f32>,
    blocks: Vec<Block>,
    lm_head: Vec<f32>,
    inv_freq: Vec<f64>,
}

pub fn init_model(config: ModelConfig) -> Result<Model> {
    Model::new(config)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f64, config.init_std)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        };
        let d = config.width();
        let ff = 4 * d;
        let embed = draw(config.vocab_size * d);
        let blocks = (0..config.layers)
            .map(|_| Block {
                wq: draw(d * d),
                wk: draw(d * d),
                wv: draw(d * d),
                wo: draw(d * d),
                w_up: draw(d * ff),
                w_down: draw(ff * d),
            })
            .collect();
        let lm_head = draw(d * config.vocab_size);
        let half = config.head_dim / 2;
        let inv_freq = (0..half)
            .map(|i| config.rope_base.powf(-(2.0 * i as f64) / config.head_dim as f64))
            .collect();
        Ok(Model {
            config,
            embed,
            blocks,
            lm_head,
            inv_freq,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Key projection matrix of `layer`, row-major `[in][out]`.
    pub fn key_projection(&self, layer: usize) -> &[f32] {
        &self.blocks[layer].wk
    }

    /// Checksum over every weight tensor in initialization order.
    pub fn weight_checksum(&self) -> u64 {
        let mut all = self.embed.clone();
        for b in &self.blocks {
            for w in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down] {
                all.extend_from_slice(w);
            }
        }
        all.extend_from_slice(&self.lm_head);
        checksum(&all)
    }

    pub fn new_cache(&self) -> KVCacheSet {
        KVCacheSet::new(self.config.layers, self.config.heads, self.config.head_dim)
    }

    fn check_token(&self, id: u32) -> Result<()> {
        if (id as usize) < self.config.vocab_size {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "token id {id} outside vocabulary of {}",
                self.config.vocab_size
            )))
        }
    }

    fn rotate(&self, x: &mut [f32], position: usize) {
        let hd = self.config.head_dim;
        for head in x.chunks_exact_mut(hd) {
            for (i, &f) in self.inv_freq.iter().enumerate() {
                let (sin, cos) = (position as f64 * f).sin_cos();
                let (a, b) = (head[2 * i] as f64, head[2 * i + 1] as f64);
                head[2 * i] = (a * cos - b * sin) as f32;
                head[2 * i + 1] = (a * sin + b * cos) as f32;
            }
        }
    }

    /// Runs one token through the stack, appending its key/value to `cache`.
    /// Returns the logits and, per layer, the attention of every head over the
    /// layer's cache entries (`[head][entry]`, zero for entries a head cannot see).
    fn forward_token(&self, cache: &mut KVCacheSet, token: u32) -> (Vec<f32>, Vec<Vec<f32>>) {
        let cfg = &self.config;
        let d = cfg.width();
        let hd = cfg.head_dim;
        let position = cache.next_position();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = self.embed[token as usize * d..(token as usize + 1) * d].to_vec();
        let mut attention = Vec::with_capacity(cfg.layers);
        for (l, block) in self.blocks.iter().enumerate() {
            let h = rms_norm(&x);
            let mut q = matvec(&h, &block.wq, d);
            let mut k = matvec(&h, &block.wk, d);
            let v = matvec(&h, &block.wv, d);
            self.rotate(&mut q, position);
            self.rotate(&mut k, position);
            cache.append(l, &k, &v);

            let entries = cache.layer(l).len();
            let mut mixed = vec![0.0f32; d];
            let mut layer_attn = vec![0.0f32; cfg.heads * entries];
            for head in 0..cfg.heads {
                let qh = &q[head * hd..(head + 1) * hd];
                let visible: Vec<usize> = (0..entries)
                    .filter(|&e| cache.is_visible(l, e, head))
                    .collect();
                let logits: Vec<f64> = visible
                    .iter()
                    .map(|&e| dot(qh, cache.key(l, e, head)) as f64 * scale)
                    .collect();
                let probs = softmax(&logits);
                let out = &mut mixed[head * hd..(head + 1) * hd];
                let mut acc = vec![0.0f64; hd];
                for (&e, &p) in visible.iter().zip(&probs) {
                    for (a, &val) in acc.iter_mut().zip(cache.value(l, e, head)) {
                        *a += p * val as f64;
                    }
                    layer_attn[head * entries + e] = p as f32;
                }
                for (o, a) in out.iter_mut().zip(acc) {
                    *o = a as f32;
                }
            }
            attention.push(layer_attn);

            add_assign(&mut x, &matvec(&mixed, &block.wo, d));
            let h2 = rms_norm(&x);
            let mut up = matvec(&h2, &block.w_up, 4 * d);
            up.iter_mut().for_each(|u| *u = gelu(*u));
            add_assign(&mut x, &matvec(&up, &block.w_down, d));
        }
        cache.commit_token();
        let logits = matvec(&rms_norm(&x), &self.lm_head, cfg.vocab_size);
        (logits, attention)
    }
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS as f64).sqrt();
    x.iter().map(|&v| (v as f64 * inv) as f32).collect()
}

/// `x` (length `rows`) times a row-major `[rows][cols]` matrix.
fn matvec(x: &[f32], w: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; cols];
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Attention of one decode step's query, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAttention {
    pub heads: usize,
    pub layers: Vec<LayerStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep {
    /// Original position of each cache entry, ascending.
    pub positions: Vec<usize>,
    /// `[head][entry]`.
    pub weights: Vec<f32>,
}

impl StepAttention {
    pub fn row(&self, layer: usize, head: usize) -> &[f32] {
        let step = &self.layers[layer];
        let n = step.positions.len();
        &step.weights[head * n..(head + 1) * n]
    }

    /// `(position, weight)` pairs of one head restricted to positions `>= from`.
    pub fn restricted(&self, layer: usize, head: usize, from: usize) -> Vec<(usize, f32)> {
        let step = &self.layers[layer];
        step.positions
            .iter()
            .zip(self.row(layer, head))
            .filter(|(&p, _)| p >= from)
            .map(|(&p, &w)| (p, w))
            .collect()
    }
}

/// Processes the whole prompt. The trace holds every query row in
/// [`TraceMode::Full`], otherwise only the final prompt position.
pub fn prefill(
    model: &Model,
    tokens: &TokenSequence,
    mode: TraceMode,
) -> Result<(KVCacheSet, AttentionTrace, Vec<f32>)> {
    let cfg = &model.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Length("prompt must contain at least one token".into()));
    }
    if n > cfg.max_seq {
        return Err(Error::Length(format!(
            "prompt of {n} tokens exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    for &id in &tokens.ids {
        model.check_token(id)?;
    }

    let queries = match mode {
        TraceMode::Full => n,
        TraceMode::LastRow => 1,
    };
    let mut trace = AttentionTrace::zeros(cfg.layers, cfg.heads, queries, n)?;
    let mut cache = model.new_cache();
    let mut logits = Vec::new();
    for (t, &id) in tokens.ids.iter().enumerate() {
        let (out, attention) = model.forward_token(&mut cache, id);
        logits = out;
        let q = match mode {
            TraceMode::Full => Some(t),
            TraceMode::LastRow => (t + 1 == n).then_some(0),
        };
        if let Some(q) = q {
            for (l, layer_attn) in attention.iter().enumerate() {
                let entries = t + 1;
                for h in 0..cfg.heads {
                    trace.row_mut(l, h, q)[..entries]
                        .copy_from_slice(&layer_attn[h * entries..(h + 1) * entries]);
                }
            }
        }
    }
    cache.seal_prefill();
    trace.meta = TraceMeta {
        tokens: tokens.ids.iter().map(|&i| TokenPiece::Id(i)).collect(),
        model: cfg.descriptor(),
        params: serde_json::json!({
            "layers": cfg.layers,
            "heads": cfg.heads,
            "head_dim": cfg.head_dim,
            "vocab_size": cfg.vocab_size,
            "seed": cfg.seed,
            "init_std": cfg.init_std,
            "rope_base": cfg.rope_base,
        }),
        ..TraceMeta::default()
    };
    Ok((cache, trace, logits))
}

/// Appends `last_token` to the cache and returns next-token logits plus the
/// new query's attention over the retained entries.
pub fn decode_step(
    model: &Model,
    cache: &mut KVCacheSet,
    last_token: u32,
) -> Result<(Vec<f32>, StepAttention)> {
    if cache.is_empty() {
        return Err(Error::Length("decode_step needs a nonempty cache".into()));
    }
    if cache.next_position() >= model.config.max_seq {
        return Err(Error::Length(format!(
            "position {} reaches max_seq {}",
            cache.next_position(),
            model.config.max_seq
        )));
    }
    model.check_token(last_token)?;
    cache.seal_prefill();
    let (logits, attention) = model.forward_token(cache, last_token);
    let layers = attention
        .into_iter()
        .enumerate()
        .map(|(l, weights)| LayerStep {
            positions: cache.layer(l).positions().to_vec(),
            weights,
        })
        .collect();
    Ok((
        logits,
        StepAttention {
            heads: model.config.heads,
            layers,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub prompt_len: usize,
    pub generated_ids: Vec<u32>,
    /// Logits that produced each generated token.
    pub per_step_logits: Vec<Vec<f32>>,
    /// Cache occupancy when each token's logits were computed.
    pub cache_sizes_per_step: Vec<CacheReport>,
    /// Union over layers/heads of retained prefill positions, per step.
    pub prefill_positions_per_step: Vec<Vec<usize>>,
    /// Union over layers/heads of retained decoding positions, per step.
    pub decoding_positions_per_step: Vec<Vec<usize>>,
    pub prefill_retained: RetainedSet,
    pub trace: AttentionTrace,
    /// Time spent inside retention selection; zero unless measured.
    pub selection_time: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub max_new: usize,
    /// Feed these tokens instead of the argmax (teacher forcing).
    pub forced: Option<Vec<u32>>,
    /// Time the selection calls with a monotonic clock.
    pub measure: bool,
}

/// Greedy generation with prefill compression applied once and decoding
/// compression after every step.
pub fn generate(
    model: &Model,
    prompt: &TokenSequence,
    max_new: usize,
    policy: &PolicyConfig,
    seg: &ShotSegmentation,
) -> Result<GenerationResult> {
    generate_with(
        model,
        prompt,
        policy,
        seg,
        &GenerateOptions {
            max_new,
            ..Default::default()
        },
    )
}

struct Stopwatch {
    enabled: bool,
    total: Duration,
}

impl Stopwatch {
    fn time<T>(&mut self, f: impl FnOnce() -> T) -> T {
        if !self.enabled {
            return f();
        }
        let start = std::time::Instant::now();
        let out = f();
        self.total += start.elapsed();
        out
    }
}

pub fn generate_with(
    model: &Model,
    prompt: &TokenSequence,
    policy: &PolicyConfig,
    seg: &ShotSegmentation,
    opts: &GenerateOptions,
) -> Result<GenerationResult> {
    if seg.prompt_len() != prompt.len() {
        return Err(Error::Segmentation(format!(
            "segmentation covers {} tokens, prompt has {}",
            seg.prompt_len(),
            prompt.len()
        )));
    }
    if let Some(forced) = &opts.forced {
        if forced.len() < opts.max_new {
            return Err(Error::Length(format!(
                "{} forced tokens for {} steps",
                forced.len(),
                opts.max_new
            )));
        }
    }
    policy.validate()?;
    let mut clock = Stopwatch {
        enabled: opts.measure,
        total: Duration::ZERO,
    };

    let (mut cache, mut trace, mut logits) = prefill(model, prompt, TraceMode::Full)?;
    trace.meta.shots = seg.shots().to_vec();
    trace.meta.mandatory = seg.mandatory().to_vec();
    trace.meta.sink_count = policy.params.sink_count;

    let prefill_retained = clock.time(|| policies::run_policy(policy, &trace, seg))?;
    cache.retain(&prefill_retained)?;
    let mut compressor = DecodingCompressor::new(policy, model.config.layers, model.config.heads);

    let mut result = GenerationResult {
        prompt_len: prompt.len(),
        generated_ids: Vec::with_capacity(opts.max_new),
        per_step_logits: Vec::with_capacity(opts.max_new),
        cache_sizes_per_step: Vec::with_capacity(opts.max_new),
        prefill_positions_per_step: Vec::with_capacity(opts.max_new),
        decoding_positions_per_step: Vec::with_capacity(opts.max_new),
        prefill_retained,
        trace,
        selection_time: Duration::ZERO,
    };
    for step in 0..opts.max_new {
        result.cache_sizes_per_step.push(cache.report());
        result
            .prefill_positions_per_step
            .push(union_positions(&cache, Segment::Prefill));
        result
            .decoding_positions_per_step
            .push(union_positions(&cache, Segment::Decoding));
        let next = match &opts.forced {
            Some(forced) => forced[step],
            None => argmax(&logits),
        };
        result.generated_ids.push(next);
        result.per_step_logits.push(std::mem::take(&mut logits));
        if step + 1 == opts.max_new {
            break;
        }
        let (out, attention) = decode_step(model, &mut cache, next)?;
        logits = out;
        if let Some(set) = clock.time(|| compressor.after_step(&cache, &attention))? {
            cache.retain(&set)?;
        }
    }
    result.selection_time = clock.total;
    Ok(result)
}

fn union_positions(cache: &KVCacheSet, segment: Segment) -> Vec<usize> {
    let mut all = Vec::new();
    for l in 0..cache.num_layers() {
        for h in 0..cache.heads() {
            all.extend(cache.visible_positions(l, h, segment));
        }
    }
    all.sort_unstable();
    all.dedup();
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 8,
            max_seq: 128,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(ModelConfig { seed: 7, ..small() }).unwrap();
        let b = Model::new(ModelConfig { seed: 7, ..small() }).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        let c = Model::new(ModelConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.weight_checksum(), c.weight_checksum());
    }

    #[test]
    fn zero_layers_is_config_error() {
        let err = Model::new(ModelConfig { layers: 0, ..small() }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = Model::new(ModelConfig { vocab_size: 1, ..small() }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("AB").ids, vec![65, 66]);
        assert!(tokenize("").ids.is_empty());
    }

    #[test]
    fn single_token_prompt_attends_to_itself() {
        let model = Model::new(small()).unwrap();
        let (cache, trace, logits) = prefill(&model, &tokenize("x"), TraceMode::Full).unwrap();
        assert_eq!(logits.len(), 256);
        assert_eq!(cache.layer(0).len(), 1);
        for l in 0..2 {
            for h in 0..2 {
                assert_eq!(trace.row(l, h, 0), &[1.0]);
            }
        }
    }

    #[test]
    fn prefill_length_errors() {
        let model = Model::new(ModelConfig { max_seq: 4, ..small() }).unwrap();
        assert!(matches!(
            prefill(&model, &tokenize(""), TraceMode::Full),
            Err(Error::Length(_))
        ));
        assert!(matches!(
            prefill(&model, &tokenize("hello"), TraceMode::Full),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn decode_overflow_is_length_error() {
        let model = Model::new(ModelConfig { max_seq: 3, ..small() }).unwrap();
        let (mut cache, _, _) = prefill(&model, &tokenize("abc"), TraceMode::LastRow).unwrap();
        assert!(matches!(
            decode_step(&model, &mut cache, 1),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn decode_on_empty_cache_fails() {
        let model = Model::new(small()).unwrap();
        let mut cache = model.new_cache();
        assert!(decode_step(&model, &mut cache, 1).is_err());
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let model = Model::new(ModelConfig { vocab_size: 16, ..small() }).unwrap();
        assert!(matches!(
            prefill(&model, &tokenize("A"), TraceMode::Full),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn last_row_matches_full_trace_tail() {
        let model = Model::new(small()).unwrap();
        let prompt = tokenize("a short prompt");
        let (_, full, _) = prefill(&model, &prompt, TraceMode::Full).unwrap();
        let (_, last, _) = prefill(&model, &prompt, TraceMode::LastRow).unwrap();
        assert_eq!(full.last_row().weights(), last.weights());
    }
}

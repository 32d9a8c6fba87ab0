//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export takes the prompt text and a model seed, runs the toy model
//! and returns plain data (JSON strings or pixel buffers) for the page to
//! draw. The `*_json` / `*_rgba` functions without the `js_` prefix are the
//! native entry points used by the tests.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use kvlab::analysis::{self, Selector};
use kvlab::harness::divergence;
use kvlab::tinyformer::{self, generate_with, tokenize, GenerateOptions};
use kvlab::{
    Budget, Error, Model, ModelConfig, PolicyConfig, PolicyKind, Result, ShotSegmentation,
    TraceMode,
};

/// Longest prompt the page accepts.
pub const MAX_PROMPT: usize = 192;
const MAX_NEW: usize = 48;

fn model(seed: u64, len: usize) -> Result<Model> {
    Model::new(ModelConfig {
        seed,
        max_seq: MAX_PROMPT + MAX_NEW + 1,
        ..ModelConfig::default()
    })
    .and_then(|m| {
        if len == 0 || len > MAX_PROMPT {
            Err(Error::Length(format!(
                "prompt must be 1..={MAX_PROMPT} bytes, got {len}"
            )))
        } else {
            Ok(m)
        }
    })
}

fn segmentation(text: &str, marker: &str) -> Result<ShotSegmentation> {
    let marker = marker.replace("\\n", "\n");
    if marker.is_empty() {
        ShotSegmentation::whole_prompt(text.len())
    } else {
        ShotSegmentation::from_marker(text.as_bytes(), marker.as_bytes())
    }
}

#[derive(Serialize)]
struct CoverageView {
    points: Vec<(f64, f64)>,
    at_01: f64,
    at_20: f64,
}

/// Coverage curve of the prompt's aggregated attention, thinned to 101 points.
pub fn coverage_json(text: &str, exclude_sinks: usize, seed: u64) -> Result<String> {
    let model = model(seed, text.len())?;
    let (_, trace, _) = tinyformer::prefill(&model, &tokenize(text), TraceMode::Full)?;
    let curve = analysis::cumulative_distribution(&analysis::aggregate_attention(&trace), exclude_sinks)?;
    let view = CoverageView {
        points: (0..=100)
            .map(|i| {
                let p = i as f64 / 100.0;
                (p, analysis::coverage_at(&curve, p))
            })
            .collect(),
        at_01: analysis::coverage_at(&curve, 0.01),
        at_20: analysis::coverage_at(&curve, 0.2),
    };
    Ok(serde_json::to_string(&view)?)
}

#[derive(Serialize)]
struct CompressView {
    policy: String,
    prompt_len: usize,
    /// Per prompt token: fraction of (layer, head) units that keep it.
    kept: Vec<f64>,
    shots: Vec<[usize; 2]>,
    kl: f64,
    top1_match: f64,
    max_abs: f64,
    baseline: String,
    compressed: String,
}

/// Runs `policy` at `ratio`, teacher-forced along the uncompressed
/// generation, and reports what was kept and how far the logits moved.
pub fn compress_json(
    text: &str,
    marker: &str,
    policy: &str,
    ratio: f64,
    max_new: usize,
    seed: u64,
) -> Result<String> {
    let model = model(seed, text.len())?;
    let max_new = max_new.clamp(1, MAX_NEW);
    let kind: PolicyKind = policy.parse()?;
    let seg = segmentation(text, marker)?;
    let prompt = tokenize(text);
    let base = generate_with(
        &model,
        &prompt,
        &PolicyConfig::full(),
        &seg,
        &GenerateOptions {
            max_new,
            ..Default::default()
        },
    )?;
    let mut config = PolicyConfig::new(kind, ratio);
    if kind == PolicyKind::ShotKV {
        config.budget = Budget::split(ratio, ratio);
    }
    let free = generate_with(
        &model,
        &prompt,
        &config,
        &seg,
        &GenerateOptions {
            max_new,
            ..Default::default()
        },
    )?;
    let forced = generate_with(
        &model,
        &prompt,
        &config,
        &seg,
        &GenerateOptions {
            max_new,
            forced: Some(base.generated_ids.clone()),
            measure: false,
        },
    )?;
    let div = divergence(&base.per_step_logits, &forced.per_step_logits)?;

    let (layers, heads) = (model.config().layers, model.config().heads);
    let set = &forced.prefill_retained;
    let mut kept = vec![0.0; prompt.len()];
    for l in 0..layers {
        for h in 0..heads {
            for &p in set.unit(l, h, heads) {
                kept[p] += 1.0 / (layers * heads) as f64;
            }
        }
    }
    let text_of = |ids: &[u32]| {
        String::from_utf8_lossy(&tinyformer::detokenize(&kvlab::TokenSequence {
            ids: ids.to_vec(),
            text_origin: None,
        }))
        .into_owned()
    };
    let view = CompressView {
        policy: kind.name().into(),
        prompt_len: prompt.len(),
        kept,
        shots: seg.shots().to_vec(),
        kl: div.kl,
        top1_match: div.top1_match,
        max_abs: div.max_abs,
        baseline: text_of(&base.generated_ids),
        compressed: text_of(&free.generated_ids),
    };
    Ok(serde_json::to_string(&view)?)
}

fn selector(v: i32) -> Selector {
    if v < 0 {
        Selector::Mean
    } else {
        Selector::Index(v as usize)
    }
}

/// Attention map as RGBA pixels, `T` by `T`, row-normalized. Negative
/// `layer` or `head` averages over all of them.
pub fn heatmap_rgba(text: &str, layer: i32, head: i32, seed: u64) -> Result<Vec<u8>> {
    let model = model(seed, text.len())?;
    let (_, trace, _) = tinyformer::prefill(&model, &tokenize(text), TraceMode::Full)?;
    let pgm = analysis::heatmap_pgm(&trace, selector(layer), selector(head))?;
    let n = trace.keys();
    let pixels = &pgm[pgm.len() - n * n..];
    Ok(pixels
        .iter()
        .flat_map(|&v| {
            let v = v as f32 / 255.0;
            let ramp = |a: f32, b: f32| (a + (b - a) * v).round() as u8;
            [ramp(250.0, 20.0), ramp(250.0, 60.0), ramp(255.0, 140.0), 255]
        })
        .collect())
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = coverageCurve)]
pub fn js_coverage_curve(text: &str, exclude_sinks: usize, seed: u64) -> Result<String, JsError> {
    coverage_json(text, exclude_sinks, seed).map_err(js)
}

#[wasm_bindgen(js_name = compressView)]
pub fn js_compress_view(
    text: &str,
    marker: &str,
    policy: &str,
    ratio: f64,
    max_new: usize,
    seed: u64,
) -> Result<String, JsError> {
    compress_json(text, marker, policy, ratio, max_new, seed).map_err(js)
}

#[wasm_bindgen(js_name = heatmapRgba)]
pub fn js_heatmap_rgba(text: &str, layer: i32, head: i32, seed: u64) -> Result<Vec<u8>, JsError> {
    heatmap_rgba(text, layer, head, seed).map_err(js)
}

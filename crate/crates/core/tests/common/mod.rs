#![allow(dead_code)]

use kvlab::traceio::{AttentionTrace, TraceMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Causal softmax rows over keys `0..=pos`, with a few sharp peaks.
fn causal_row(rng: &mut ChaCha8Rng, keys: usize, pos: usize) -> Vec<f32> {
    let logits: Vec<f64> = (0..=pos)
        .map(|_| {
            let base: f64 = rng.random_range(-2.0..2.0);
            if rng.random_bool(0.1) {
                base + 4.0
            } else {
                base
            }
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut row = vec![0.0f32; keys];
    for (r, e) in row.iter_mut().zip(exps) {
        *r = (e / sum) as f32;
    }
    row
}

pub fn random_trace(rng: &mut ChaCha8Rng, layers: usize, heads: usize, keys: usize, full: bool) -> AttentionTrace {
    let queries = if full { keys } else { 1 };
    let mut weights = Vec::with_capacity(layers * heads * queries * keys);
    for _ in 0..layers * heads {
        for q in 0..queries {
            let pos = keys - queries + q;
            weights.extend(causal_row(rng, keys, pos));
        }
    }
    AttentionTrace::new(layers, heads, queries, keys, weights, TraceMeta::default()).unwrap()
}

/// Random segmentation: shots of random lengths separated by optional gaps,
/// with a mandatory prefix/suffix sometimes present.
pub fn random_segmentation(rng: &mut ChaCha8Rng, n: usize, max_shots: usize) -> (Vec<[usize; 2]>, Vec<[usize; 2]>) {
    let mut shots = Vec::new();
    let mut mandatory = Vec::new();
    let prefix = if rng.random_bool(0.5) { rng.random_range(0..=n / 8) } else { 0 };
    if prefix > 0 {
        mandatory.push([0, prefix]);
    }
    let mut at = prefix;
    while shots.len() < max_shots && at < n {
        let len = rng.random_range(1..=(n / 3).max(1));
        let end = (at + len).min(n);
        shots.push([at, end]);
        at = end;
        if rng.random_bool(0.2) && at < n {
            at += 1;
        }
    }
    if at < n {
        mandatory.push([at, n]);
    }
    (shots, mandatory)
}

/// `O(n^2)` reference: indices of the `k` best scores under (score desc,
/// index desc), via a full sort.
pub fn topk_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| b.cmp(&a))
    });
    let mut out: Vec<usize> = idx.into_iter().take(k).collect();
    out.sort();
    out
}

/// Greedy rule written as a plain loop over a selection sort.
pub fn greedy_oracle(scores: &[f64], lengths: &[usize], budget: usize, mandatory: usize) -> Vec<usize> {
    let mut used = vec![false; scores.len()];
    let mut left = budget - mandatory;
    let mut chosen = Vec::new();
    for _ in 0..scores.len() {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if used[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if scores[i] > scores[b] => Some(i),
                keep => keep,
            };
        }
        let b = best.unwrap();
        used[b] = true;
        if lengths[b] <= left {
            left -= lengths[b];
            chosen.push(b);
        }
    }
    chosen.sort();
    chosen
}

/// Triple loop over (t in shot, h, l) of the final query row.
pub fn shot_score_oracle(trace: &AttentionTrace, shot: [usize; 2]) -> f64 {
    let mut total = 0.0f64;
    for t in shot[0]..shot[1] {
        for h in 0..trace.heads() {
            for l in 0..trace.layers() {
                total += trace.row(l, h, trace.queries() - 1)[t] as f64;
            }
        }
    }
    total / (shot[1] - shot[0]) as f64
}

pub fn floor_budget(r: f64, n: usize) -> usize {
    if r == 1.0 {
        return n;
    }
    let m = (r * n as f64 + 1e-9).floor() as usize;
    m.max(1).min(n)
}

/// Shots with some but not all tokens present in `retained`.
pub fn partial_shots(shots: &[[usize; 2]], retained: &[usize]) -> Vec<[usize; 2]> {
    shots
        .iter()
        .copied()
        .filter(|s| {
            let kept = retained.iter().filter(|&&p| p >= s[0] && p < s[1]).count();
            kept != 0 && kept != s[1] - s[0]
        })
        .collect()
}

/// Random scores drawn from a small grid so ties are common.
pub fn tied_scores(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let levels = rng.random_range(1..=8);
    (0..len)
        .map(|_| rng.random_range(0..levels) as f64 * 0.125)
        .collect()
}

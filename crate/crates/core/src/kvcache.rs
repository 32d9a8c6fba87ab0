//! Key/value cache model.
//!
//! Each layer stores one entry per cached token: the rotated key and the value
//! for all heads (`heads * head_dim` floats each), plus the token's original
//! absolute position. Entries carry a per-head visibility mask so that
//! per-head retention decisions can be represented without copying storage;
//! an entry disappears physically once no head can see it.
//!
//! Positions below `prefill_len` form the prefill segment, the rest form the
//! decoding segment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per stored scalar in the cache.
pub const BYTES_PER_SCALAR: usize = 4;

// Absorbs representation error in products such as 0.29 * 100.
const RATIO_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Prefill,
    Decoding,
}

/// Granularity of a retention decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// One index set shared by every layer and head.
    Global,
    /// One index set per layer, shared by that layer's heads.
    PerLayer,
    /// One index set per (layer, head), stored layer-major.
    PerLayerHead,
}

/// Indices (original positions) kept by a policy for one cache segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedSet {
    pub segment: Segment,
    pub scope: Scope,
    pub units: Vec<Vec<usize>>,
}

impl RetainedSet {
    pub fn global(segment: Segment, indices: Vec<usize>) -> Self {
        RetainedSet {
            segment,
            scope: Scope::Global,
            units: vec![indices],
        }
    }

    pub fn per_layer(segment: Segment, units: Vec<Vec<usize>>) -> Self {
        RetainedSet {
            segment,
            scope: Scope::PerLayer,
            units,
        }
    }

    pub fn per_layer_head(segment: Segment, units: Vec<Vec<usize>>) -> Self {
        RetainedSet {
            segment,
            scope: Scope::PerLayerHead,
            units,
        }
    }

    /// Index set governing `(layer, head)`.
    pub fn unit(&self, layer: usize, head: usize, heads: usize) -> &[usize] {
        match self.scope {
            Scope::Global => &self.units[0],
            Scope::PerLayer => &self.units[layer],
            Scope::PerLayerHead => &self.units[layer * heads + head],
        }
    }

    pub fn expected_units(&self, layers: usize, heads: usize) -> usize {
        match self.scope {
            Scope::Global => 1,
            Scope::PerLayer => layers,
            Scope::PerLayerHead => layers * heads,
        }
    }

    /// Largest unit size.
    pub fn max_len(&self) -> usize {
        self.units.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Sorted union of all units.
    pub fn union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.units.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// Checks that every unit is strictly ascending and inside `range`.
    pub fn check_indices(&self, range: std::ops::Range<usize>) -> Result<()> {
        for (u, unit) in self.units.iter().enumerate() {
            if let Some(w) = unit.windows(2).find(|w| w[0] >= w[1]) {
                return Err(Error::Retention(format!(
                    "unit {u} is not strictly ascending ({} then {})",
                    w[0], w[1]
                )));
            }
            if let Some(&bad) = unit.iter().find(|&&i| !range.contains(&i)) {
                return Err(Error::Retention(format!(
                    "index {bad} in unit {u} outside segment range {range:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Compression ratio, either shared or split between the two segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ratio {
    Single(f64),
    Split { prefill: f64, decoding: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub ratio: Ratio,
    #[serde(default = "default_min_keep")]
    pub min_keep: usize,
}

fn default_min_keep() -> usize {
    1
}

impl Budget {
    pub fn single(ratio: f64) -> Self {
        Budget {
            ratio: Ratio::Single(ratio),
            min_keep: 1,
        }
    }

    pub fn split(prefill: f64, decoding: f64) -> Self {
        Budget {
            ratio: Ratio::Split { prefill, decoding },
            min_keep: 1,
        }
    }

    pub fn prefill_ratio(&self) -> f64 {
        match self.ratio {
            Ratio::Single(r) => r,
            Ratio::Split { prefill, .. } => prefill,
        }
    }

    pub fn decoding_ratio(&self) -> f64 {
        match self.ratio {
            Ratio::Single(r) => r,
            Ratio::Split { decoding, .. } => decoding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.prefill_ratio())?;
        check_ratio(self.decoding_ratio())
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if r.is_finite() && r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::Budget(format!("ratio {r} outside (0, 1]")))
    }
}

/// Number of tokens kept out of `n` at ratio `r`: `clamp(floor(r * n), min_keep, n)`.
pub fn budget_tokens(r: f64, n: usize, min_keep: usize) -> Result<usize> {
    check_ratio(r)?;
    if r == 1.0 {
        return Ok(n);
    }
    let raw = (r * n as f64 + RATIO_EPS).floor() as usize;
    Ok(raw.max(min_keep).min(n))
}

/// Storage for one layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerCache {
    keys: Vec<f32>,
    values: Vec<f32>,
    positions: Vec<usize>,
    visible: Vec<bool>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Per-token counts and an estimated memory footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheReport {
    /// Largest number of prefill tokens visible to any (layer, head).
    pub prefill_tokens: usize,
    /// Largest number of decoding tokens visible to any (layer, head).
    pub decoding_tokens: usize,
    pub prefill_bytes: usize,
    pub decoding_bytes: usize,
    pub bytes_estimate: usize,
}

/// The whole key/value cache of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCacheSet {
    heads: usize,
    head_dim: usize,
    layers: Vec<LayerCache>,
    prefill_len: Option<usize>,
    next_position: usize,
}

impl KVCacheSet {
    pub fn new(layers: usize, heads: usize, head_dim: usize) -> Self {
        KVCacheSet {
            heads,
            head_dim,
            layers: vec![LayerCache::default(); layers],
            prefill_len: None,
            next_position: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn layer(&self, layer: usize) -> &LayerCache {
        &self.layers[layer]
    }

    /// Prompt length once the prefill segment is sealed, else the number of
    /// tokens pushed so far.
    pub fn prefill_len(&self) -> usize {
        self.prefill_len.unwrap_or(self.next_position)
    }

    /// Decoding tokens ever appended, evicted ones included.
    pub fn decoding_total(&self) -> usize {
        self.prefill_len
            .map_or(0, |p| self.next_position.saturating_sub(p))
    }

    /// Absolute position the next appended token will receive.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(LayerCache::is_empty)
    }

    pub fn segment_of(&self, position: usize) -> Segment {
        if position < self.prefill_len() {
            Segment::Prefill
        } else {
            Segment::Decoding
        }
    }

    pub fn segment_range(&self, segment: Segment) -> std::ops::Range<usize> {
        match segment {
            Segment::Prefill => 0..self.prefill_len(),
            Segment::Decoding => self.prefill_len()..self.next_position,
        }
    }

    /// Appends the key/value pair of the token at [`Self::next_position`] to one layer.
    pub fn append(&mut self, layer: usize, key: &[f32], value: &[f32]) {
        let width = self.width();
        assert_eq!(key.len(), width, "key width");
        assert_eq!(value.len(), width, "value width");
        let heads = self.heads;
        let position = self.next_position;
        let store = &mut self.layers[layer];
        debug_assert!(store.positions.last().is_none_or(|&p| p < position));
        store.keys.extend_from_slice(key);
        store.values.extend_from_slice(value);
        store.positions.push(position);
        store.visible.extend(std::iter::repeat_n(true, heads));
    }

    /// Finishes the current token after every layer has been appended.
    pub fn commit_token(&mut self) {
        self.next_position += 1;
    }

    /// Marks every token pushed so far as the prefill segment. Only the first
    /// call has an effect.
    pub fn seal_prefill(&mut self) {
        if self.prefill_len.is_none() {
            self.prefill_len = Some(self.next_position);
        }
    }

    pub fn is_sealed(&self) -> bool {
        self.prefill_len.is_some()
    }

    pub fn is_visible(&self, layer: usize, entry: usize, head: usize) -> bool {
        self.layers[layer].visible[entry * self.heads + head]
    }

    /// Original positions visible to `(layer, head)` within `segment`, ascending.
    pub fn visible_positions(&self, layer: usize, head: usize, segment: Segment) -> Vec<usize> {
        let range = self.segment_range(segment);
        let store = &self.layers[layer];
        store
            .positions
            .iter()
            .enumerate()
            .filter(|&(e, p)| range.contains(p) && store.visible[e * self.heads + head])
            .map(|(_, &p)| p)
            .collect()
    }

    pub fn segment_count(&self, layer: usize, head: usize, segment: Segment) -> usize {
        self.visible_positions(layer, head, segment).len()
    }

    /// Key slice for one head of one entry.
    pub fn key(&self, layer: usize, entry: usize, head: usize) -> &[f32] {
        let start = entry * self.width() + head * self.head_dim;
        &self.layers[layer].keys[start..start + self.head_dim]
    }

    pub fn value(&self, layer: usize, entry: usize, head: usize) -> &[f32] {
        let start = entry * self.width() + head * self.head_dim;
        &self.layers[layer].values[start..start + self.head_dim]
    }

    /// Keeps exactly the indices in `retained` within its segment; the other
    /// segment is left untouched. Evicted entries cannot be brought back, so
    /// an index that is no longer visible is an error.
    pub fn retain(&mut self, retained: &RetainedSet) -> Result<()> {
        let layers = self.layers.len();
        let heads = self.heads;
        let expected = retained.expected_units(layers, heads);
        if retained.units.len() != expected {
            return Err(Error::Retention(format!(
                "{:?} scope needs {expected} units, got {}",
                retained.scope,
                retained.units.len()
            )));
        }
        let range = self.segment_range(retained.segment);
        retained.check_indices(range.clone())?;

        let mut new_masks = Vec::with_capacity(layers);
        for l in 0..layers {
            let store = &self.layers[l];
            let mut mask = store.visible.clone();
            for h in 0..heads {
                let unit = retained.unit(l, h, heads);
                let mut matched = 0;
                for (e, p) in store.positions.iter().enumerate() {
                    if !range.contains(p) {
                        continue;
                    }
                    let slot = &mut mask[e * heads + h];
                    let keep = unit.binary_search(p).is_ok();
                    if keep && *slot {
                        matched += 1;
                    }
                    *slot &= keep;
                }
                if matched != unit.len() {
                    let missing = unit
                        .iter()
                        .find(|&&p| {
                            !store
                                .positions
                                .iter()
                                .enumerate()
                                .any(|(e, &q)| q == p && store.visible[e * heads + h])
                        })
                        .copied()
                        .unwrap_or_default();
                    return Err(Error::Retention(format!(
                        "index {missing} is not present for layer {l}, head {h} (already evicted)"
                    )));
                }
            }
            new_masks.push(mask);
        }

        let width = self.width();
        for (store, mask) in self.layers.iter_mut().zip(new_masks) {
            let mut out = LayerCache::default();
            for (e, &p) in store.positions.iter().enumerate() {
                let heads_mask = &mask[e * heads..(e + 1) * heads];
                if heads_mask.iter().any(|&v| v) {
                    out.keys
                        .extend_from_slice(&store.keys[e * width..(e + 1) * width]);
                    out.values
                        .extend_from_slice(&store.values[e * width..(e + 1) * width]);
                    out.positions.push(p);
                    out.visible.extend_from_slice(heads_mask);
                }
            }
            *store = out;
        }
        Ok(())
    }

    pub fn report(&self) -> CacheReport {
        let mut report = CacheReport::default();
        let per_token = self.head_dim * 2 * BYTES_PER_SCALAR;
        for l in 0..self.layers.len() {
            for h in 0..self.heads {
                let p = self.segment_count(l, h, Segment::Prefill);
                let d = self.segment_count(l, h, Segment::Decoding);
                report.prefill_tokens = report.prefill_tokens.max(p);
                report.decoding_tokens = report.decoding_tokens.max(d);
                report.prefill_bytes += p * per_token;
                report.decoding_bytes += d * per_token;
            }
        }
        report.bytes_estimate = report.prefill_bytes + report.decoding_bytes;
        report
    }
}

/// Functional form of [`KVCacheSet::retain`].
pub fn apply_retention(cache: &KVCacheSet, retained: &RetainedSet) -> Result<KVCacheSet> {
    let mut out = cache.clone();
    out.retain(retained)?;
    Ok(out)
}

pub fn cache_report(cache: &KVCacheSet) -> CacheReport {
    cache.report()
}

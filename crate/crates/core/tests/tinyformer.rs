mod common;

use kvlab::policies::{PolicyConfig, PolicyKind, ShotSegmentation};
use kvlab::tinyformer::{
    checksum, decode_step, detokenize, generate, prefill, tokenize, Model, ModelConfig,
};
use kvlab::{Budget, Segment, TraceMode};
use rand::Rng;

const GOLDEN_KEY_CHECKSUM: u64 = 0x6440_507c_934f_fc8b;

fn wide() -> ModelConfig {
    ModelConfig {
        layers: 4,
        heads: 4,
        head_dim: 64,
        vocab_size: 256,
        seed: 1,
        ..ModelConfig::default()
    }
}

fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        head_dim: 8,
        max_seq: 160,
        seed,
        ..ModelConfig::default()
    }
}

#[test]
fn key_projection_checksum_is_frozen() {
    let model = Model::new(wide()).unwrap();
    let sum = checksum(model.key_projection(0));
    assert_eq!(sum, GOLDEN_KEY_CHECKSUM, "got {sum:#x}");
}

#[test]
fn weights_are_deterministic() {
    let a = Model::new(wide()).unwrap();
    let b = Model::new(wide()).unwrap();
    assert_eq!(a.weight_checksum(), b.weight_checksum());
    assert_eq!(a.key_projection(3), b.key_projection(3));
}

#[test]
fn tokenize_round_trips_random_bytes() {
    let mut rng = common::rng(11);
    for _ in 0..1000 {
        let len = rng.random_range(0..64);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let tokens = tokenize(&bytes);
        assert_eq!(tokens.len(), bytes.len());
        assert_eq!(detokenize(&tokens), bytes);
    }
}

#[test]
fn decode_matches_prefill_of_extended_prompt() {
    let mut rng = common::rng(5);
    for case in 0..8 {
        let model = Model::new(small(case)).unwrap();
        let len = rng.random_range(2..=64);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let split = rng.random_range(1..len);
        let (mut cache, _, _) = prefill(&model, &tokenize(&bytes[..split]), TraceMode::LastRow).unwrap();
        let mut last = Vec::new();
        for &b in &bytes[split..] {
            last = decode_step(&model, &mut cache, b as u32).unwrap().0;
        }
        let (_, _, full) = prefill(&model, &tokenize(&bytes), TraceMode::LastRow).unwrap();
        assert_eq!(last, full, "case {case}");
    }
}

#[test]
fn prefill_rows_are_causal_distributions() {
    let model = Model::new(small(2)).unwrap();
    let (_, trace, _) = prefill(&model, &tokenize("the quick brown fox jumps"), TraceMode::Full).unwrap();
    for l in 0..trace.layers() {
        for h in 0..trace.heads() {
            for q in 0..trace.queries() {
                let row = trace.row(l, h, q);
                let sum: f64 = row.iter().map(|&w| w as f64).sum();
                assert!((sum - 1.0).abs() < 1e-5);
                assert!(row[..=q].iter().all(|&w| w > 0.0));
                assert!(row[q + 1..].iter().all(|&w| w == 0.0));
            }
        }
    }
}

#[test]
fn last_row_trace_equals_final_full_row() {
    let model = Model::new(small(4)).unwrap();
    let prompt = tokenize("abcdefghij");
    let (_, full, _) = prefill(&model, &prompt, TraceMode::Full).unwrap();
    let (_, last, _) = prefill(&model, &prompt, TraceMode::LastRow).unwrap();
    assert_eq!(last.weights(), full.last_row().weights());
}

#[test]
fn decode_past_max_seq_is_rejected() {
    let model = Model::new(ModelConfig { max_seq: 4, ..small(1) }).unwrap();
    let (mut cache, _, _) = prefill(&model, &tokenize("abc"), TraceMode::LastRow).unwrap();
    decode_step(&model, &mut cache, 1).unwrap();
    assert!(decode_step(&model, &mut cache, 1).is_err());
}

#[test]
fn full_ratio_policies_reproduce_baseline_logits() {
    let model = Model::new(small(9)).unwrap();
    let text = b"1+1=2\n\n2+2=4\n\n3+3=6\n\n4+4=";
    let prompt = tokenize(text);
    let seg = ShotSegmentation::from_marker(text, b"\n\n").unwrap();
    let base = generate(&model, &prompt, 12, &PolicyConfig::full(), &seg).unwrap();
    let mut shot = PolicyConfig::new(PolicyKind::ShotKV, 1.0);
    shot.budget = Budget::split(1.0, 1.0);
    let run = generate(&model, &prompt, 12, &shot, &seg).unwrap();
    assert_eq!(run.generated_ids, base.generated_ids);
    assert_eq!(run.per_step_logits, base.per_step_logits);
}

#[test]
fn shotkv_decoding_segment_stays_within_budget() {
    let model = Model::new(small(6)).unwrap();
    let text = b"ab\n\ncd\n\nef\n\n?";
    let prompt = tokenize(text);
    let seg = ShotSegmentation::from_marker(text, b"\n\n").unwrap();
    let mut policy = PolicyConfig::new(PolicyKind::ShotKV, 0.5);
    policy.budget = Budget::split(1.0, 0.5);
    let run = generate(&model, &prompt, 40, &policy, &seg).unwrap();
    for (step, report) in run.cache_sizes_per_step.iter().enumerate() {
        assert!(report.decoding_tokens <= step / 2 + 1, "step {step}: {report:?}");
    }
    let cache_positions = &run.decoding_positions_per_step;
    assert!(cache_positions.iter().all(|p| p.iter().all(|&x| x >= prompt.len())));
    assert_eq!(run.prefill_retained.segment, Segment::Prefill);
}

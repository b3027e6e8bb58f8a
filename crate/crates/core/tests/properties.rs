//! Property tests over the public API, each against an independent oracle.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use seqdistill::data::{
    build_sequences, k_core_filter, temporal_split, Catalog, InteractionRecord,
};
use seqdistill::distill::{
    combined_loss, two_phase_train, DistillationConfig, Phase, TrainConfig, Variant,
};
use seqdistill::model::pooling::{exp_pool, mean_pool};
use seqdistill::model::{Architecture, ModelConfig, SeqRecModel};
use seqdistill::profile::llm::ProfileRequest;
use seqdistill::profile::{generate_profiles, MockLlm, ProfileCache, RetryPolicy};

fn log_strategy(max_len: usize) -> impl Strategy<Value = Vec<InteractionRecord>> {
    proptest::collection::vec((0u8..12, 0u8..12, 0u64..60), 1..max_len).prop_map(|rows| {
        rows.into_iter()
            .map(|(u, i, t)| {
                InteractionRecord::new(format!("u{u}"), format!("i{i}"), t, None).unwrap()
            })
            .collect()
    })
}

fn triples(records: &[InteractionRecord]) -> Vec<(String, String, u64)> {
    let mut v: Vec<_> = records
        .iter()
        .map(|r| (r.user_id.clone(), r.item_id.clone(), r.timestamp))
        .collect();
    v.sort();
    v
}

/// Removes every record of the first weak user or item, one at a time.
fn k_core_oracle(records: &[InteractionRecord], k: usize) -> Vec<(String, String, u64)> {
    let mut live = triples(records);
    loop {
        let mut users: BTreeMap<String, usize> = BTreeMap::new();
        let mut items: BTreeMap<String, usize> = BTreeMap::new();
        for (u, i, _) in &live {
            *users.entry(u.clone()).or_default() += 1;
            *items.entry(i.clone()).or_default() += 1;
        }
        if let Some((u, _)) = users.iter().find(|(_, &c)| c < k) {
            let u = u.clone();
            live.retain(|(x, _, _)| *x != u);
        } else if let Some((i, _)) = items.iter().find(|(_, &c)| c < k) {
            let i = i.clone();
            live.retain(|(_, x, _)| *x != i);
        } else {
            return live;
        }
    }
}

fn tiny_model(arch: Architecture, d: usize, items: usize, seed: u64) -> SeqRecModel {
    SeqRecModel::new(
        ModelConfig {
            architecture: arch,
            hidden_dim: d,
            num_layers: 2,
            num_heads: 2,
            dropout: 0.0,
            max_len: 8,
            num_items: items,
            mask_prob: 0.2,
        },
        seed,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn k_core_matches_peeling_oracle(log in log_strategy(200), k in 1usize..5) {
        let core = k_core_filter(&log, k);
        prop_assert_eq!(triples(&core), k_core_oracle(&log, k));
        prop_assert_eq!(k_core_filter(&core, k), core.clone());
        prop_assert_eq!(k_core_filter(&log, k), core);
    }

    #[test]
    fn split_matches_sort_and_cut(log in log_strategy(200), fraction in 0.05f64..0.95) {
        let mut ts: Vec<u64> = log.iter().map(|r| r.timestamp).collect();
        ts.sort_unstable();
        let distinct = ts.first() != ts.last();
        match temporal_split(&log, fraction) {
            Err(_) => prop_assert!(!distinct),
            Ok(s) => {
                let cut = ((fraction * ts.len() as f64).floor() as usize).min(ts.len() - 1);
                let mut threshold = ts[cut];
                if threshold == ts[0] {
                    threshold = *ts.iter().find(|&&t| t > ts[0]).unwrap();
                }
                prop_assert_eq!(s.threshold, threshold);
                prop_assert!(s.train.iter().all(|r| r.timestamp < threshold));
                prop_assert!(s.test.iter().all(|r| r.timestamp >= threshold));
                let mut joined = s.train.clone();
                joined.extend(s.test.iter().cloned());
                prop_assert_eq!(triples(&joined), triples(&log));
                prop_assert!(!s.train.is_empty() && !s.test.is_empty());
                prop_assert_eq!(temporal_split(&log, fraction).unwrap(), s);
            }
        }
    }

    #[test]
    fn sequences_keep_latest_items(log in log_strategy(150), max_len in 1usize..8) {
        let catalog = Catalog::build(&log, &HashMap::new());
        let seqs = build_sequences(&log, &catalog, max_len);

        let mut by_user: BTreeMap<&str, Vec<(u64, usize)>> = BTreeMap::new();
        for (pos, r) in log.iter().enumerate() {
            by_user.entry(&r.user_id).or_default().push((r.timestamp, pos));
        }
        let mut want: Vec<usize> = Vec::new();
        for events in by_user.values_mut() {
            events.sort();
            for &(_, pos) in events.iter().rev().take(max_len) {
                want.push(catalog.index_of(&log[pos].item_id).unwrap());
            }
        }
        let mut got: Vec<usize> = seqs.iter().flat_map(|s| s.items.iter().copied()).collect();
        want.sort_unstable();
        got.sort_unstable();
        prop_assert_eq!(got, want);
        for s in &seqs {
            prop_assert!(!s.items.is_empty() && s.items.len() <= max_len);
            prop_assert!(!s.items.contains(&0));
            prop_assert!(s.timestamps.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn appending_padding_never_changes_pooled_state(
        values in proptest::collection::vec(-5.0f64..5.0, 24),
        pad in 1usize..5,
        gamma in 0.0f64..10.0,
    ) {
        // One row, four real positions, d = 6.
        let states = Array3::from_shape_vec((1, 4, 6), values).unwrap();
        let mask = Array2::from_elem((1, 4), true);
        let mut wide = Array3::from_elem((1, 4 + pad, 6), 1e6);
        wide.slice_mut(ndarray::s![.., ..4, ..]).assign(&states);
        let mut wide_mask = Array2::from_elem((1, 4 + pad), false);
        wide_mask.slice_mut(ndarray::s![.., ..4]).fill(true);
        prop_assert_eq!(
            exp_pool(states.view(), mask.view(), gamma).unwrap(),
            exp_pool(wide.view(), wide_mask.view(), gamma).unwrap()
        );
        prop_assert_eq!(
            mean_pool(states.view(), mask.view()).unwrap(),
            mean_pool(wide.view(), wide_mask.view()).unwrap()
        );
    }

    #[test]
    fn causal_logits_ignore_later_items(
        items in proptest::collection::vec(1usize..9, 2..8),
        at in 0usize..8,
        replacement in 1usize..9,
        seed in 0u64..1000,
    ) {
        let model = tiny_model(Architecture::Causal, 8, 8, seed);
        let t = at % items.len();
        let mut alt = items.clone();
        alt[t] = replacement;
        let a = model.forward(&[&items]).unwrap();
        let b = model.forward(&[&alt]).unwrap();
        for p in 0..t {
            prop_assert_eq!(a.logits.slice(ndarray::s![0, p, ..]), b.logits.slice(ndarray::s![0, p, ..]));
        }
    }

    #[test]
    fn dynamic_scaling_restores_model_loss(
        l_model in 1e-3f64..50.0,
        l_distill in 1e-6f64..50.0,
        alpha in 0.0f64..=1.0,
    ) {
        let cfg = DistillationConfig { alpha, use_dynamic_beta: true, ..Default::default() };
        let b = combined_loss(l_model, l_distill, &cfg);
        prop_assert!((b.beta * l_distill - l_model).abs() <= 1e-6 * l_model.max(1.0));
        prop_assert!((b.total - l_model).abs() <= 1e-6 * l_model.max(1.0));
    }

    #[test]
    fn static_blend_is_affine_in_alpha(l_model in 0.0f64..50.0, l_distill in 0.0f64..50.0) {
        let at = |alpha| {
            combined_loss(l_model, l_distill, &DistillationConfig { alpha, use_dynamic_beta: false, ..Default::default() })
                .total
        };
        prop_assert_eq!(at(0.0), l_model);
        prop_assert_eq!(at(1.0), l_distill);
        prop_assert!((at(0.5) - (l_model + l_distill) / 2.0).abs() <= 1e-12 * (1.0 + l_model + l_distill));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn phases_flip_at_rounded_fraction(epochs in 1usize..7, fraction in 0.0f64..=1.0, seed in 0u64..50) {
        let sequences: Vec<_> = (0..6)
            .map(|u| seqdistill::data::UserSequence {
                user_id: format!("u{u}"),
                items: (0..5).map(|t| 1 + (u + t) % 6).collect(),
                timestamps: (0..5).collect(),
                ratings: vec![None; 5],
            })
            .collect();
        let targets: HashMap<String, Vec<f32>> =
            (0..6).map(|u| (format!("u{u}"), vec![0.1 * u as f32; 4])).collect();
        let distill = DistillationConfig { phase1_fraction: fraction, ..Default::default() };
        let train = TrainConfig { epochs, batch_size: 3, learning_rate: 1e-3, clip_norm: 5.0 };
        let model = SeqRecModel::new(
            ModelConfig {
                architecture: Architecture::Causal,
                hidden_dim: 4,
                num_layers: 1,
                num_heads: 2,
                dropout: 0.1,
                max_len: 5,
                num_items: 6,
                mask_prob: 0.2,
            },
            seed,
        )
        .unwrap();
        let run = || two_phase_train(model.clone(), &sequences, Some(&targets), &distill, &train, Variant::Distilled, seed)
            .unwrap();
        let out = run();
        let flip = ((fraction * epochs as f64).round() as usize).min(epochs);
        for r in &out.trajectory.records {
            let want = if r.epoch < flip { Phase::Distill } else { Phase::Finetune };
            prop_assert_eq!(r.phase, want);
            prop_assert_eq!(r.beta.is_some(), want == Phase::Distill);
        }
        prop_assert_eq!(out.trajectory.transition_epoch, flip);
        let again = run();
        prop_assert_eq!(again.trajectory, out.trajectory);
        prop_assert_eq!(again.model.params(), out.model.params());
    }

    #[test]
    fn second_generation_pass_makes_no_calls(users in 1usize..12) {
        let requests: Vec<ProfileRequest> = (0..users)
            .map(|u| ProfileRequest { user_id: format!("u{u}"), prompt: format!("history of user {u}") })
            .collect();
        let cache = ProfileCache::in_memory();
        let llm = MockLlm::new();
        let first = generate_profiles(&requests, &llm, &cache, 2, &RetryPolicy::no_wait(1)).unwrap();
        prop_assert_eq!(first.calls, users);
        let second = generate_profiles(&requests, &llm, &cache, 2, &RetryPolicy::no_wait(1)).unwrap();
        prop_assert_eq!(second.calls, 0);
        prop_assert_eq!(second.cache_hits, users);
        prop_assert_eq!(llm.calls(), users);
        let texts = |r: &seqdistill::profile::llm::GenerationReport| {
            r.profiles.iter().map(|p| p.text.clone()).collect::<Vec<_>>()
        };
        prop_assert_eq!(texts(&first), texts(&second));
    }
}

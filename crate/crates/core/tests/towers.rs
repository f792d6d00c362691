//! Invariants of the two towers and the in-batch loss.

use idw_core::dataset::{compute_item_stats, DatasetSplits, InteractionLog, ItemStats, PAD};
use idw_core::tensor::{dot, Mat};
use idw_core::towers::{
    batch_softmax_loss, score, user_encode, user_interests, LossOptions, TowerConfig, TowerParams,
};
use proptest::prelude::*;

fn setup(seed: u64, num_reps: usize) -> (TowerParams, DatasetSplits, ItemStats) {
    let num_items = 7;
    let config = TowerConfig {
        embed_dim: 4,
        num_reps,
        attention_heads: 2,
        ffn_dim: 6,
        max_len: 10,
        init_seed: seed,
        ..TowerConfig::new(num_items)
    };
    let params = TowerParams::init(&config).unwrap();
    let seqs: Vec<Vec<u32>> = (0..4u32)
        .map(|u| {
            (0..9)
                .map(|i| (u * 3 + i * (u + 2)) % num_items as u32)
                .collect()
        })
        .collect();
    let log = InteractionLog::new(seqs, num_items).unwrap();
    let splits = DatasetSplits::from_log(&log, 10).unwrap();
    let stats = compute_item_stats(&splits.train, num_items).unwrap();
    (params, splits, stats)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn padding_contents_do_not_matter(
        seed in 0u64..1000,
        ctx in prop::collection::vec(0u32..7, 1..10),
        junk in prop::collection::vec(0u32..7, 10),
    ) {
        let (params, _, _) = setup(seed, 3);
        let n = ctx.len();
        let mut padded = vec![PAD; 10 - n];
        padded.extend_from_slice(&ctx);
        let mut noisy = junk[..10 - n].to_vec();
        noisy.extend_from_slice(&ctx);
        let a = user_encode(&params, &padded, n).unwrap();
        let b = user_encode(&params, &noisy, n).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn single_interest_scores_are_dot_products(seed in 0u64..1000) {
        let (params, splits, stats) = setup(seed, 1);
        let batch = &splits.train[..6];
        let (scored, _) = batch_softmax_loss(
            &params, &splits, batch, &stats, &[1.0; 6], &LossOptions::default(),
        ).unwrap();
        for (i, ex) in batch.iter().enumerate() {
            let z = user_interests(&params, splits.context(ex)).unwrap();
            prop_assert_eq!(z.rows, 1);
            for j in 0..batch.len() {
                let item = scored.items.row(j);
                prop_assert!(rel_close(scored.logits.get(i, j), dot(z.row(0), item), 1e-12));
                prop_assert!(rel_close(score(&z, item), dot(z.row(0), item), 1e-12));
            }
        }
    }

    #[test]
    fn uniform_weight_scales_loss_and_gradients(seed in 0u64..1000, c in 0.01f64..50.0) {
        let (params, splits, stats) = setup(seed, 3);
        let batch = &splits.train[..8];
        let opts = LossOptions::default();
        let (one, g1) = batch_softmax_loss(&params, &splits, batch, &stats, &[1.0; 8], &opts).unwrap();
        let (scaled, gc) = batch_softmax_loss(&params, &splits, batch, &stats, &[c; 8], &opts).unwrap();
        prop_assert!(rel_close(scaled.loss, c * one.loss, 1e-12));
        for (a, b) in g1.iter().zip(&gc) {
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((y - c * x).abs() <= 1e-10 * (c * x).abs() + 1e-15 * c, "{} vs {}", y, c * x);
            }
        }
    }

    #[test]
    fn zero_weight_drops_only_that_row(seed in 0u64..1000, k in 0usize..8) {
        let (params, splits, stats) = setup(seed, 3);
        let batch = &splits.train[..8];
        let opts = LossOptions::default();
        let ones = [1.0; 8];
        let mut w = ones;
        w[k] = 0.0;
        let (full, g_full) = batch_softmax_loss(&params, &splits, batch, &stats, &ones, &opts).unwrap();
        let (dropped, g_drop) = batch_softmax_loss(&params, &splits, batch, &stats, &w, &opts).unwrap();
        let mut only = [0.0; 8];
        only[k] = 1.0;
        let (_, g_only) = batch_softmax_loss(&params, &splits, batch, &stats, &only, &opts).unwrap();
        // the denominator stays the batch size
        let others: f64 = (0..8).filter(|&i| i != k).map(|i| full.per_example_loss[i]).sum();
        prop_assert!(rel_close(dropped.loss * 8.0, others, 1e-12));
        for i in (0..8).filter(|&i| i != k) {
            prop_assert_eq!(dropped.per_example_loss[i], full.per_example_loss[i]);
        }
        // gradient of the remaining rows = full gradient minus row k's
        for ((f, d), o) in g_full.iter().zip(&g_drop).zip(&g_only) {
            for ((x, y), z) in f.data.iter().zip(&d.data).zip(&o.data) {
                prop_assert!((x - z - y).abs() <= 1e-10 * x.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn logq_correction_subtracts_log_probability(seed in 0u64..1000) {
        let (params, splits, stats) = setup(seed, 2);
        let batch = &splits.train[..6];
        let (scored, _) = batch_softmax_loss(
            &params, &splits, batch, &stats, &[1.0; 6], &LossOptions::default(),
        ).unwrap();
        for i in 0..batch.len() {
            for (j, ex) in batch.iter().enumerate() {
                let expected = scored.logits.get(i, j) - stats.probability(ex.label).ln();
                prop_assert!(rel_close(scored.corrected.get(i, j), expected, 1e-12));
            }
        }
    }
}

#[test]
fn interest_set_has_one_row_per_query() {
    let (params, splits, _) = setup(3, 4);
    let z = user_interests(&params, splits.context(&splits.test[0])).unwrap();
    assert_eq!((z.rows, z.cols), (4, 4));
    assert!(z.is_finite());
    let m: Mat = user_encode(
        &params,
        &splits.padded_context(&splits.test[0]),
        splits.test[0].valid_len as usize,
    )
    .unwrap();
    assert_eq!(m.rows, splits.test[0].valid_len as usize);
}

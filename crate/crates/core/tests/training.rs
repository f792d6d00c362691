//! End-to-end training behaviour on small synthetic tasks.

use idw_core::dataset::ItemPartition;
use idw_core::eval::{evaluate, EvalProtocol, Split};
use idw_core::experiment::{prepare_synthetic, Prepared};
use idw_core::idw::{run_idw, IdwConfig, IdwStart};
use idw_core::synthetic::SynthConfig;
use idw_core::towers::{all_item_representations, TowerConfig, TowerParams};
use idw_core::training::{
    freeze_item_tower_train, train, validation_metrics, RunOptions, TrainConfig,
};

/// Two clusters of ten items; every user stays inside one cluster.
fn separable() -> Prepared {
    let synth = SynthConfig {
        num_clusters: 2,
        items_per_cluster: 10,
        num_users: 300,
        seq_len: 20,
        alpha: 1.0,
        gamma: 0.0,
        item_exponent: 0.0,
        interests_per_user: 1,
        rng_seed: 11,
        ..SynthConfig::default()
    };
    prepare_synthetic(&synth, &[0]).unwrap()
}

fn tower(data: &Prepared, seed: u64) -> TowerParams {
    TowerParams::init(&TowerConfig {
        embed_dim: 8,
        num_reps: 2,
        attention_heads: 2,
        ffn_dim: 8,
        init_seed: seed,
        ..TowerConfig::new(data.splits.num_items)
    })
    .unwrap()
}

fn small_train() -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        max_epochs: 6,
        patience: 10,
        val_k: 5,
        val_negatives: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_falls_and_training_examples_are_ranked_well() {
    let data = separable();
    // batches of a few users make the in-batch loss noisy; the default
    // batch size averages over enough windows
    let config = TrainConfig {
        max_epochs: 8,
        batch_size: 256,
        ..small_train()
    };
    let out = train(
        &tower(&data, 0),
        &data.splits,
        &data.stats,
        &config,
        &RunOptions::default(),
    )
    .unwrap();
    let losses: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
    assert!(losses.len() >= 5);
    for w in losses[..5].windows(2) {
        assert!(w[1] < w[0], "loss did not decrease: {losses:?}");
    }
    let protocol = EvalProtocol {
        k_values: vec![5],
        num_negatives: 9,
        seeds: vec![0],
        normalize_items: false,
    };
    let everything = ItemPartition::from_clusters(&data.clusters.clone().unwrap(), &[0, 1]);
    let report = evaluate(
        &out.params,
        &data.splits,
        &data.splits.train,
        &everything,
        &protocol,
    )
    .unwrap();
    let hr = report.hr(Split::Overall, 5).unwrap();
    assert!(hr > 0.9, "train HR@5 = {hr}, losses {losses:?}");
}

#[test]
fn training_is_deterministic() {
    let data = separable();
    let config = TrainConfig {
        max_epochs: 2,
        ..small_train()
    };
    let a = train(
        &tower(&data, 3),
        &data.splits,
        &data.stats,
        &config,
        &RunOptions::default(),
    )
    .unwrap();
    let b = train(
        &tower(&data, 3),
        &data.splits,
        &data.stats,
        &config,
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params.tensors, b.params.tensors);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = separable();
    let init = tower(&data, 1);
    let config = TrainConfig {
        learning_rate: 0.0,
        max_epochs: 3,
        ..small_train()
    };
    let out = train(
        &init,
        &data.splits,
        &data.stats,
        &config,
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(out.params.tensors, init.tensors);
    assert_eq!(out.history.len(), 3);
}

#[test]
fn calibration_leaves_item_tower_untouched() {
    let data = separable();
    let config = TrainConfig {
        max_epochs: 2,
        ..small_train()
    };
    let trained = train(
        &tower(&data, 2),
        &data.splits,
        &data.stats,
        &config,
        &RunOptions::default(),
    )
    .unwrap()
    .params;
    let calibrated = freeze_item_tower_train(&trained, &data.splits, &data.stats, &config).unwrap();
    for id in 0..trained.len() {
        if trained.is_item_tower(id) {
            assert_eq!(
                calibrated.params.tensors[id], trained.tensors[id],
                "{}",
                trained.names[id]
            );
        }
    }
    assert_eq!(
        all_item_representations(&calibrated.params, false),
        all_item_representations(&trained, false)
    );
    let before = validation_metrics(&trained, &data.splits, &config)
        .unwrap()
        .0;
    assert!(calibrated.best_val_hr >= before);

    let none = TrainConfig {
        max_epochs: 0,
        ..config
    };
    let same = freeze_item_tower_train(&trained, &data.splits, &data.stats, &none).unwrap();
    assert_eq!(same.params.tensors, trained.tensors);
}

#[test]
fn full_momentum_idw_is_baseline_plus_calibration() {
    let data = separable();
    let wake = TrainConfig {
        max_epochs: 3,
        seed: 4,
        ..small_train()
    };
    let config = IdwConfig {
        momentum: 1.0,
        wake: wake.clone(),
        ..IdwConfig::default()
    };
    let init = tower(&data, 4);
    let out = run_idw(
        IdwStart::Init(&init),
        &data.splits,
        &data.stats,
        &config,
        data.clusters.as_deref(),
    )
    .unwrap();
    assert_eq!(out.log.len(), 1);
    assert!(!out.log[0].woke);
    assert_eq!(out.log[0].delta_w, 0.0);

    let baseline = train(
        &init,
        &data.splits,
        &data.stats,
        &wake,
        &RunOptions::default(),
    )
    .unwrap();
    let calibrated =
        freeze_item_tower_train(&baseline.params, &data.splits, &data.stats, &wake).unwrap();
    assert_eq!(out.baseline.params.tensors, baseline.params.tensors);
    assert_eq!(out.params.tensors, calibrated.params.tensors);
}

#[test]
fn untrained_model_ranks_like_chance() {
    // 500 items, no popularity skew: an untrained model places the label
    // uniformly among 100 candidates, so HR@20 is about 20/100.
    let synth = SynthConfig {
        num_clusters: 20,
        items_per_cluster: 25,
        num_users: 2000,
        seq_len: 20,
        item_exponent: 0.0,
        rng_seed: 5,
        ..SynthConfig::default()
    };
    let data = prepare_synthetic(&synth, &[0]).unwrap();
    let protocol = EvalProtocol {
        k_values: vec![20],
        num_negatives: 99,
        seeds: vec![0, 1, 2],
        normalize_items: false,
    };
    for seed in 0..3 {
        let params = TowerParams::init(&TowerConfig {
            init_seed: seed,
            ..TowerConfig::new(data.splits.num_items)
        })
        .unwrap();
        let report = evaluate(
            &params,
            &data.splits,
            &data.splits.test,
            &data.partition,
            &protocol,
        )
        .unwrap();
        let hr = report.hr(Split::Overall, 20).unwrap();
        assert!((hr - 0.20).abs() <= 0.02, "seed {seed}: HR@20 = {hr}");
    }
}

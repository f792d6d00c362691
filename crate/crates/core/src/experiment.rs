//! End-to-end runs: build splits, train a method, evaluate it.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    compute_item_stats, head_tail_partition, DatasetSplits, InteractionLog, ItemPartition,
    ItemStats,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_silhouette, EvalProtocol, MetricsReport};
use crate::idw::{run_idw, IdwConfig, IdwIteration, IdwStart};
use crate::synthetic::{generate_dataset, GeneratedDataset, SynthConfig};
use crate::towers::{all_item_representations, TowerConfig, TowerParams};
use crate::training::{train, EpochRecord, RunOptions, Strategy, TrainConfig, TrainOutcome};

/// A model/training recipe. Everything except `Sur` uses the configured
/// number of user representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sur,
    Mur,
    MurIdw,
    Frequency,
    Focal,
    Qmargin,
    ItemNorm,
    ItemNormPosthoc,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Sur,
        Method::Mur,
        Method::MurIdw,
        Method::Frequency,
        Method::Focal,
        Method::Qmargin,
        Method::ItemNorm,
        Method::ItemNormPosthoc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sur => "sur",
            Method::Mur => "mur",
            Method::MurIdw => "mur_idw",
            Method::Frequency => "frequency",
            Method::Focal => "focal",
            Method::Qmargin => "qmargin",
            Method::ItemNorm => "item_norm",
            Method::ItemNormPosthoc => "item_norm_posthoc",
        }
    }

    /// The training strategy of the method's (first) training run.
    pub fn strategy(self) -> Strategy {
        match self {
            Method::Sur | Method::Mur | Method::MurIdw => Strategy::Uniform,
            Method::Frequency => Strategy::Frequency,
            Method::Focal => Strategy::Focal { gamma: 2.0 },
            Method::Qmargin => Strategy::Qmargin { max_margin: 0.5 },
            Method::ItemNorm => Strategy::ItemNorm,
            Method::ItemNormPosthoc => Strategy::ItemNormPosthoc,
        }
    }

    pub fn tower(self, base: &TowerConfig) -> TowerConfig {
        let mut t = base.clone();
        if self == Method::Sur {
            t.num_reps = 1;
        }
        t
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// `num_items` is overwritten from the data.
    pub tower: TowerConfig,
    pub train: TrainConfig,
    pub idw: IdwConfig,
    pub eval: EvalProtocol,
}

impl ExperimentConfig {
    /// Defaults for real datasets.
    pub fn real() -> Self {
        Self {
            tower: TowerConfig::new(1),
            train: TrainConfig::default(),
            idw: IdwConfig::default(),
            eval: EvalProtocol::default(),
        }
    }

    /// Defaults for metric runs on the 50-item synthetic catalog, trained to
    /// convergence. A user's history can cover a large part of the catalog,
    /// so evaluation uses 20 sampled negatives and HR@5 for early stopping.
    pub fn synthetic() -> Self {
        let train = TrainConfig {
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            val_k: 5,
            val_negatives: 20,
            ..TrainConfig::default()
        };
        Self {
            tower: TowerConfig::new(1),
            idw: IdwConfig {
                wake: TrainConfig {
                    patience: 2,
                    ..train.clone()
                },
                ..IdwConfig::default()
            },
            train,
            eval: EvalProtocol {
                k_values: vec![5, 20],
                num_negatives: 20,
                ..EvalProtocol::default()
            },
        }
    }

    /// [`synthetic`](Self::synthetic) with two-dimensional representations
    /// for plotting. The final LayerNorm is off: in two dimensions it maps
    /// every hidden state onto one of two points.
    pub fn synthetic_2d() -> Self {
        let mut c = Self::synthetic();
        c.tower.embed_dim = 2;
        c.tower.attention_heads = 2;
        c.tower.ffn_dim = 2;
        c.tower.final_norm = false;
        c
    }

    /// Applies one seed to data-independent randomness: initialization,
    /// batch shuffling and validation negatives.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.tower.init_seed = seed;
        c.train.seed = seed;
        c.idw.wake.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.idw.validate()?;
        self.eval.validate()
    }
}

/// Splits, label statistics and the head/tail partition of one dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: DatasetSplits,
    pub stats: ItemStats,
    pub partition: ItemPartition,
    /// Ground-truth cluster per item, when known.
    pub clusters: Option<Vec<usize>>,
}

impl Prepared {
    /// Real data: Pareto head/tail split, no clusters.
    pub fn from_log(log: &InteractionLog, max_len: usize) -> Result<Self> {
        let splits = DatasetSplits::from_log(log, max_len)?;
        let stats = compute_item_stats(&splits.train, splits.num_items)?;
        let partition = head_tail_partition(&stats);
        Ok(Self {
            splits,
            stats,
            partition,
            clusters: None,
        })
    }

    /// Synthetic data: the head is the set of items in `head_clusters`.
    pub fn from_synthetic(data: &GeneratedDataset, head_clusters: &[usize]) -> Result<Self> {
        let splits = DatasetSplits::from_log(&data.log, crate::dataset::MAX_LEN)?;
        let stats = compute_item_stats(&splits.train, splits.num_items)?;
        Ok(Self {
            splits,
            stats,
            partition: ItemPartition::from_clusters(&data.item_cluster, head_clusters),
            clusters: Some(data.item_cluster.clone()),
        })
    }
}

/// Generates a synthetic dataset and prepares it.
pub fn prepare_synthetic(config: &SynthConfig, head_clusters: &[usize]) -> Result<Prepared> {
    Prepared::from_synthetic(&generate_dataset(config)?, head_clusters)
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub params: TowerParams,
    pub report: MetricsReport,
    /// Training history of the first (or only) training run.
    pub history: Vec<EpochRecord>,
    pub idw_log: Vec<IdwIteration>,
    /// The unweighted training run, reusable as an IDW starting point.
    pub trained: Option<TrainOutcome>,
    pub idw: Option<crate::idw::IdwOutcome>,
}

/// Trains and evaluates one method. For `MurIdw`, `mur_baseline` (a `Mur`
/// run under the same config and seed) is reused instead of retraining it.
pub fn run_method(
    method: Method,
    data: &Prepared,
    config: &ExperimentConfig,
    mur_baseline: Option<&TrainOutcome>,
) -> Result<MethodRun> {
    config.validate()?;
    let tower = TowerConfig {
        num_items: data.splits.num_items,
        ..method.tower(&config.tower)
    };
    let init = TowerParams::init(&tower)?;
    let clusters = data.clusters.as_deref();
    let mut eval = config.eval.clone();
    eval.normalize_items = method.strategy().normalizes_at_eval();

    let (params, history, idw_log, trained, idw) = if method == Method::MurIdw {
        let base = match mur_baseline {
            Some(b) => b.clone(),
            None => train(
                &init,
                &data.splits,
                &data.stats,
                &config.train,
                &RunOptions::default(),
            )?,
        };
        let out = run_idw(
            IdwStart::Trained(&base),
            &data.splits,
            &data.stats,
            &config.idw,
            clusters,
        )?;
        (
            out.params.clone(),
            base.history.clone(),
            out.log.clone(),
            Some(base),
            Some(out),
        )
    } else {
        let train_config = TrainConfig {
            strategy: method.strategy(),
            ..config.train.clone()
        };
        let out = train(
            &init,
            &data.splits,
            &data.stats,
            &train_config,
            &RunOptions::default(),
        )?;
        (
            out.params.clone(),
            out.history.clone(),
            Vec::new(),
            Some(out),
            None,
        )
    };

    let mut report = evaluate(
        &params,
        &data.splits,
        &data.splits.test,
        &data.partition,
        &eval,
    )?;
    if let Some(c) = clusters {
        report.ms_score = Some(mean_silhouette(
            &all_item_representations(&params, false),
            c,
        )?);
    }
    Ok(MethodRun {
        method,
        params,
        report,
        history,
        idw_log,
        trained,
        idw,
    })
}

/// Runs several methods on one dataset, sharing the unweighted MUR run
/// between `Mur` and `MurIdw`.
pub fn run_methods(
    methods: &[Method],
    data: &Prepared,
    config: &ExperimentConfig,
) -> Result<Vec<MethodRun>> {
    let mut runs: Vec<MethodRun> = Vec::new();
    let mut order: Vec<Method> = methods.to_vec();
    // make sure Mur runs before MurIdw
    order.sort_by_key(|m| (*m != Method::Mur, *m));
    for m in order {
        let baseline = runs
            .iter()
            .find(|r| r.method == Method::Mur)
            .and_then(|r| r.trained.clone());
        runs.push(run_method(m, data, config, baseline.as_ref())?);
    }
    runs.sort_by_key(|r| methods.iter().position(|m| *m == r.method));
    Ok(runs)
}

//! Mini-batch training with pluggable loss weighting and early stopping.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplits, ItemStats, SequenceExample};
use crate::error::{Error, Result};
use crate::eval::{example_ranks, hr_at_k, ndcg_at_k, EvalProtocol};
use crate::optim::Adam;
use crate::towers::{batch_softmax_loss, LossOptions, TowerParams};

/// How per-item loss weights (or loss modifiers) are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    /// `w_y ∝ 1/p(y)`, normalized to mean 1 over observed items.
    Frequency,
    /// Multiplies each example's loss by `(1 - p_model)^gamma`.
    Focal {
        gamma: f64,
    },
    /// Subtracts `δ_y ∝ p(y)^(-1/4)` from the positive logit; the largest
    /// margin is `max_margin`.
    Qmargin {
        max_margin: f64,
    },
    /// Item representations are L2-normalized in training and evaluation.
    ItemNorm,
    /// Item representations are L2-normalized only at evaluation.
    ItemNormPosthoc,
    /// Weights supplied by the caller, e.g. from IDW.
    ExternalWeights,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Frequency => "frequency",
            Strategy::Focal { .. } => "focal",
            Strategy::Qmargin { .. } => "qmargin",
            Strategy::ItemNorm => "item_norm",
            Strategy::ItemNormPosthoc => "item_norm_posthoc",
            Strategy::ExternalWeights => "external_weights",
        }
    }

    /// Whether evaluation should score against normalized item vectors.
    pub fn normalizes_at_eval(&self) -> bool {
        matches!(self, Strategy::ItemNorm | Strategy::ItemNormPosthoc)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => Strategy::Uniform,
            "frequency" => Strategy::Frequency,
            "focal" => Strategy::Focal { gamma: 2.0 },
            "qmargin" => Strategy::Qmargin { max_margin: 0.5 },
            "item_norm" => Strategy::ItemNorm,
            "item_norm_posthoc" => Strategy::ItemNormPosthoc,
            "external_weights" => Strategy::ExternalWeights,
            other => {
                return Err(Error::InvalidConfig(format!("unknown strategy `{other}`")));
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Minimum number of examples per step; whole windows are packed until
    /// the batch reaches this size.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub strategy: Strategy,
    /// Cutoff of the validation hit ratio used for early stopping.
    pub val_k: usize,
    pub val_negatives: usize,
    pub val_seed: u64,
    /// Mask in-batch candidates that come from the row's own user.
    pub mask_same_user: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 256,
            max_epochs: 30,
            patience: 3,
            seed: 0,
            strategy: Strategy::Uniform,
            val_k: 20,
            val_negatives: 99,
            val_seed: 0,
            mask_same_user: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        match self.strategy {
            Strategy::Focal { gamma } if !(gamma >= 0.0) => {
                Err(Error::InvalidConfig("focal gamma must be >= 0".into()))
            }
            Strategy::Qmargin { max_margin } if !(max_margin >= 0.0) => Err(Error::InvalidConfig(
                "qmargin max_margin must be >= 0".into(),
            )),
            _ => Ok(()),
        }
    }

    fn validation_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            k_values: vec![self.val_k],
            num_negatives: self.val_negatives,
            seeds: vec![self.val_seed],
            normalize_items: self.strategy.normalizes_at_eval(),
        }
    }
}

/// Per-item loss weights, indexed by item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub weights: Vec<f64>,
}

impl WeightTable {
    pub fn uniform(num_items: usize) -> Self {
        Self {
            weights: vec![1.0; num_items],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self
            .weights
            .iter()
            .find(|w| !(**w >= 0.0) || !w.is_finite())
        {
            Some(w) => Err(Error::InvalidConfig(format!(
                "item weight {w} is not finite and >= 0"
            ))),
            None => Ok(()),
        }
    }

    /// Per-example weights: the table rescaled to mean 1 over items, so
    /// tables that differ only by a constant factor train identically.
    pub fn example_weights(&self, batch: &[SequenceExample]) -> Vec<f64> {
        let sum: f64 = self.weights.iter().sum();
        let scale = if sum > 0.0 {
            self.weights.len() as f64 / sum
        } else {
            0.0
        };
        batch
            .iter()
            .map(|e| self.weights[e.label as usize] * scale)
            .collect()
    }

    /// Writes `item_id,weight`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "item_id,weight")?;
        for (i, w) in self.weights.iter().enumerate() {
            writeln!(out, "{i},{w}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Frequency-balanced weights: `1/p(y)` rescaled to mean 1 over observed
/// items. Unobserved items get weight 0.
pub fn frequency_weights(stats: &ItemStats) -> WeightTable {
    let probs = stats.probabilities();
    let unobserved = probs.iter().filter(|&&p| p <= 0.0).count();
    if unobserved > 0 {
        warn!("{unobserved} items never appear as training labels; their frequency weight is 0");
    }
    let mut weights: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { 1.0 / p } else { 0.0 })
        .collect();
    let observed = (probs.len() - unobserved) as f64;
    let mean = weights.iter().sum::<f64>() / observed;
    for w in &mut weights {
        *w /= mean;
    }
    WeightTable { weights }
}

/// Qmargin margins `scale · p(y)^(-1/4)`, with `scale` chosen so the rarest
/// observed item gets `max_margin`. Unobserved items get 0.
pub fn qmargin_margins(stats: &ItemStats, max_margin: f64) -> Vec<f64> {
    let probs = stats.probabilities();
    let raw: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { p.powf(-0.25) } else { 0.0 })
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return raw;
    }
    raw.iter().map(|r| r * max_margin / max).collect()
}

/// The weight table and loss modifiers a strategy implies.
pub fn strategy_weights(
    strategy: &Strategy,
    stats: &ItemStats,
    external: Option<&WeightTable>,
) -> Result<(WeightTable, LossOptions)> {
    let n = stats.num_items();
    let mut opts = LossOptions::default();
    let table = match strategy {
        Strategy::Frequency => frequency_weights(stats),
        Strategy::ExternalWeights => {
            let t = external.ok_or_else(|| {
                Error::InvalidConfig("external_weights needs a weight table".into())
            })?;
            if t.weights.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "weight table has {} entries for {n} items",
                    t.weights.len()
                )));
            }
            t.validate()?;
            t.clone()
        }
        Strategy::Focal { gamma } => {
            opts.focal_gamma = *gamma;
            WeightTable::uniform(n)
        }
        Strategy::Qmargin { max_margin } => {
            opts.margins = Some(qmargin_margins(stats, *max_margin));
            WeightTable::uniform(n)
        }
        Strategy::ItemNorm => {
            opts.item_norm = true;
            WeightTable::uniform(n)
        }
        Strategy::Uniform | Strategy::ItemNormPosthoc => WeightTable::uniform(n),
    };
    Ok((table, opts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_hr: f64,
    pub val_ndcg: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The checkpoint with the best validation hit ratio.
    pub params: TowerParams,
    pub history: Vec<EpochRecord>,
    /// 0 when the starting parameters were kept.
    pub best_epoch: usize,
    pub best_val_hr: f64,
    pub val_k: usize,
}

impl TrainOutcome {
    /// Writes `epoch,train_loss,val_hr<K>,val_ndcg<K>`.
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        write_history_csv(path, &self.history, self.val_k)
    }
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord], k: usize) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,train_loss,val_hr{k},val_ndcg{k}")?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{}",
            r.epoch, r.train_loss, r.val_hr, r.val_ndcg
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Validation HR@K and NDCG@K under the training config's protocol.
pub fn validation_metrics(
    params: &TowerParams,
    splits: &DatasetSplits,
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    let protocol = config.validation_protocol();
    let ranks = example_ranks(
        params,
        splits,
        &splits.validation,
        &protocol,
        config.val_seed,
    )?;
    let n = ranks.len().max(1) as f64;
    let hr = ranks
        .iter()
        .map(|r| hr_at_k(r.rank, config.val_k))
        .sum::<f64>()
        / n;
    let ndcg = ranks
        .iter()
        .map(|r| ndcg_at_k(r.rank, config.val_k))
        .sum::<f64>()
        / n;
    Ok((hr, ndcg))
}

/// Groups training examples by window, shuffles the windows and packs them
/// into batches of at least `batch_size` examples. A final batch with fewer
/// than two examples is merged into its predecessor.
pub fn make_batches(
    train: &[SequenceExample],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<SequenceExample>> {
    let mut by_window: std::collections::BTreeMap<u32, Vec<SequenceExample>> = Default::default();
    for ex in train {
        by_window.entry(ex.window).or_default().push(*ex);
    }
    let mut groups: Vec<Vec<SequenceExample>> = by_window.into_values().collect();
    groups.shuffle(rng);
    let mut batches: Vec<Vec<SequenceExample>> = Vec::new();
    let mut current = Vec::new();
    for g in groups {
        current.extend(g);
        if current.len() >= batch_size {
            batches.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        match batches.last_mut() {
            Some(last) if current.len() < 2 => last.extend(current),
            _ => batches.push(current),
        }
    }
    batches
}

/// Options of a training run beyond [`TrainConfig`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Weights for [`Strategy::ExternalWeights`].
    pub external: Option<&'a WeightTable>,
    /// Tensors that receive no updates.
    pub frozen: Option<Vec<bool>>,
    /// Let the starting parameters compete for the best checkpoint.
    pub include_initial: bool,
}

/// Trains from `params` and returns the best-validation checkpoint.
pub fn train(
    params: &TowerParams,
    splits: &DatasetSplits,
    stats: &ItemStats,
    config: &TrainConfig,
    options: &RunOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (table, mut loss_opts) = strategy_weights(&config.strategy, stats, options.external)?;
    loss_opts.mask_same_user = config.mask_same_user;
    let frozen = options
        .frozen
        .clone()
        .unwrap_or_else(|| vec![false; params.len()]);

    let mut current = params.clone();
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_hr = f64::NEG_INFINITY;
    if options.include_initial || config.max_epochs == 0 {
        best_hr = validation_metrics(params, splits, config)?.0;
    }
    let mut history = Vec::new();
    let mut opt = Adam::new(params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        let batches = make_batches(&splits.train, config.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (step, batch) in batches.iter().enumerate() {
            let weights = table.example_weights(batch);
            let (scored, grads) =
                batch_softmax_loss(&current, splits, batch, stats, &weights, &loss_opts)?;
            if !scored.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: scored.loss,
                });
            }
            loss_sum += scored.loss * batch.len() as f64;
            count += batch.len();
            opt.step(&mut current, &grads, &frozen);
        }
        if !current.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: batches.len(),
                loss: f64::NAN,
            });
        }
        let (val_hr, val_ndcg) = validation_metrics(&current, splits, config)?;
        let train_loss = loss_sum / count.max(1) as f64;
        debug!(
            "epoch {epoch}: loss {train_loss:.5} val HR@{} {val_hr:.4}",
            config.val_k
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_hr,
            val_ndcg,
        });
        if val_hr > best_hr {
            best_hr = val_hr;
            best = current.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    info!(
        "{} training: {} epochs, best epoch {best_epoch} (val HR@{} {best_hr:.4})",
        config.strategy.name(),
        history.len(),
        config.val_k
    );
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch,
        best_val_hr: best_hr,
        val_k: config.val_k,
    })
}

/// Trains only the user tower with uniform weights; every item-tower tensor
/// is left bit-for-bit unchanged. The starting parameters are kept if no
/// epoch improves validation.
pub fn freeze_item_tower_train(
    params: &TowerParams,
    splits: &DatasetSplits,
    stats: &ItemStats,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let config = TrainConfig {
        strategy: Strategy::Uniform,
        ..config.clone()
    };
    let frozen = (0..params.len())
        .map(|id| params.is_item_tower(id))
        .collect();
    train(
        params,
        splits,
        stats,
        &config,
        &RunOptions {
            external: None,
            frozen: Some(frozen),
            include_initial: true,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(counts: Vec<u64>) -> ItemStats {
        let total = counts.iter().sum();
        ItemStats { counts, total }
    }

    #[test]
    fn frequency_weights_examples() {
        assert_eq!(
            frequency_weights(&stats(vec![10, 10])).weights,
            vec![1.0, 1.0]
        );
        let w = frequency_weights(&stats(vec![9, 1])).weights;
        assert!((w[1] / w[0] - 9.0).abs() < 1e-12);
        assert!(((w[0] + w[1]) / 2.0 - 1.0).abs() < 1e-12);
        let w = frequency_weights(&stats(vec![3, 0, 1])).weights;
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn qmargin_is_nonincreasing_in_probability() {
        let s = stats(vec![100, 10, 1, 50, 0]);
        let m = qmargin_margins(&s, 0.5);
        assert!((m[2] - 0.5).abs() < 1e-15);
        assert_eq!(m[4], 0.0);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by_key(|&i| s.counts[i]);
        for w in order.windows(2) {
            assert!(m[w[0]] >= m[w[1]]);
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for name in [
            "uniform",
            "frequency",
            "focal",
            "qmargin",
            "item_norm",
            "item_norm_posthoc",
        ] {
            assert_eq!(name.parse::<Strategy>().unwrap().name(), name);
        }
        assert!("nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn batches_cover_every_example_once() {
        let train: Vec<SequenceExample> = (0..7u32)
            .flat_map(|w| {
                (1..=5u16).map(move |p| SequenceExample {
                    owner: w,
                    window: w,
                    valid_len: p,
                    label: p as u32,
                })
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = make_batches(&train, 12, &mut rng);
        let mut all: Vec<_> = batches.iter().flatten().copied().collect();
        assert!(batches.iter().all(|b| b.len() >= 2));
        all.sort_by_key(|e| (e.window, e.valid_len));
        assert_eq!(all, train);
    }
}

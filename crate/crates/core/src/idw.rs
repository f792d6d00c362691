//! Iterative density weighting.
//!
//! Alternates a sleep phase, which re-estimates per-item loss weights from a
//! kernel density over the item representations, with a wake phase that
//! retrains the towers under those weights. The loop ends when the weights
//! stop moving, after which the user tower is recalibrated on the unweighted
//! loss with the item tower frozen.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplits, ItemStats};
use crate::error::{Error, Result};
use crate::eval::mean_silhouette;
use crate::tensor::Mat;
use crate::towers::{all_item_representations, TowerParams};
use crate::training::{
    freeze_item_tower_train, train, validation_metrics, RunOptions, Strategy, TrainConfig,
    TrainOutcome, WeightTable,
};

const BANDWIDTH_FLOOR: f64 = 1e-6;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdwConfig {
    pub momentum: f64,
    pub eta: f64,
    pub max_iterations: usize,
    /// Used for the baseline, every wake phase and the calibration. The
    /// strategy field is ignored.
    pub wake: TrainConfig,
}

impl Default for IdwConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            eta: 3e-4,
            max_iterations: 15,
            wake: TrainConfig {
                patience: 2,
                ..TrainConfig::default()
            },
        }
    }
}

impl IdwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1]".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig("eta must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        self.wake.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityState {
    /// Per-item weights; nonnegative and summing to 1.
    pub weights: Vec<f64>,
    pub iteration: usize,
    pub last_delta: f64,
    pub bandwidth: f64,
}

impl DensityState {
    /// Starts from the normalized training-label frequencies.
    pub fn from_stats(stats: &ItemStats) -> Self {
        Self {
            weights: stats.probabilities(),
            iteration: 0,
            last_delta: f64::NAN,
            bandwidth: f64::NAN,
        }
    }
}

/// Scott's rule with a scalar spread: `N^(-1/(d+4))` times the mean of the
/// per-dimension sample standard deviations, floored at 1e-6.
pub fn scott_bandwidth(reps: &Mat) -> Result<f64> {
    let (n, d) = (reps.rows, reps.cols);
    if n < 2 || d == 0 {
        return Err(Error::InvalidConfig(format!(
            "bandwidth needs at least 2 points of dimension >= 1, got {n} x {d}"
        )));
    }
    let mut spread = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| reps.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (reps.get(i, j) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        spread += var.sqrt();
    }
    spread /= d as f64;
    let l = (n as f64).powf(-1.0 / (d as f64 + 4.0)) * spread;
    if l < BANDWIDTH_FLOOR {
        warn!(
            "item representations are (nearly) identical; bandwidth floored at {BANDWIDTH_FLOOR}"
        );
        return Ok(BANDWIDTH_FLOOR);
    }
    Ok(l)
}

/// Weighted Gaussian KDE evaluated at every item's own representation,
/// including its own term: `(1/ℓ) Σ_k w_k K(‖v_y − v_k‖ / ℓ)`.
pub fn kde_density(reps: &Mat, weights: &[f64], bandwidth: f64) -> Vec<f64> {
    assert_eq!(reps.rows, weights.len(), "one weight per item");
    let n = reps.rows;
    let inv_l2 = 1.0 / (bandwidth * bandwidth);
    let mut out = vec![0.0; n];
    for y in 0..n {
        out[y] += weights[y];
        for k in y + 1..n {
            let sq: f64 = reps
                .row(y)
                .iter()
                .zip(reps.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let kern = (-0.5 * sq * inv_l2).exp();
            out[y] += weights[k] * kern;
            out[k] += weights[y] * kern;
        }
    }
    let scale = INV_SQRT_2PI / bandwidth;
    out.iter_mut().for_each(|p| *p *= scale);
    out
}

/// Min-max rescaling into [0, 1]; a constant input maps to all zeros.
pub fn relative_density(density: &[f64]) -> Vec<f64> {
    let min = density.iter().copied().fold(f64::INFINITY, f64::min);
    let max = density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; density.len()];
    }
    density.iter().map(|p| (p - min) / (max - min)).collect()
}

/// `w' = m·w + (1−m)·h/Σh` with `h = 1 − p'`. If `Σh = 0` the weights are
/// returned unchanged.
pub fn update_weights(weights: &[f64], relative: &[f64], momentum: f64) -> Vec<f64> {
    let h: Vec<f64> = relative.iter().map(|p| 1.0 - p).collect();
    let sum: f64 = h.iter().sum();
    if !(sum > 0.0) {
        warn!("every item sits at maximal density; weights left unchanged");
        return weights.to_vec();
    }
    weights
        .iter()
        .zip(&h)
        .map(|(w, hk)| momentum * w + (1.0 - momentum) * hk / sum)
        .collect()
}

pub fn weight_delta(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// True iff `‖new − old‖₂ < eta`.
pub fn check_convergence(old: &[f64], new: &[f64], eta: f64) -> bool {
    weight_delta(old, new) < eta
}

/// One sleep phase: new weights from the current item representations.
pub fn sleep(params: &TowerParams, state: &DensityState, momentum: f64) -> Result<DensityState> {
    let reps = all_item_representations(params, false);
    let bandwidth = scott_bandwidth(&reps)?;
    let density = kde_density(&reps, &state.weights, bandwidth);
    let relative = relative_density(&density);
    let weights = update_weights(&state.weights, &relative, momentum);
    Ok(DensityState {
        last_delta: weight_delta(&state.weights, &weights),
        weights,
        iteration: state.iteration + 1,
        bandwidth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdwIteration {
    pub iteration: usize,
    pub delta_w: f64,
    /// Mean silhouette of the item representations after this iteration,
    /// when ground-truth clusters are known.
    pub ms_score: Option<f64>,
    pub val_hr: f64,
    pub val_ndcg: f64,
    /// False for the iteration that met the stopping criterion.
    pub woke: bool,
}

#[derive(Debug, Clone)]
pub struct IdwOutcome {
    /// Calibrated parameters.
    pub params: TowerParams,
    /// Parameters after the last wake phase, before calibration.
    pub uncalibrated: TowerParams,
    pub baseline: TrainOutcome,
    pub calibration: TrainOutcome,
    pub log: Vec<IdwIteration>,
    /// Weights after each sleep phase.
    pub weights: Vec<Vec<f64>>,
    pub state: DensityState,
    pub val_k: usize,
}

impl IdwOutcome {
    /// Writes `iteration,delta_w,ms_score,val_hr<K>,val_ndcg<K>`; the MS
    /// column is empty when no clusters were given.
    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let k = self.val_k;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "iteration,delta_w,ms_score,val_hr{k},val_ndcg{k}")?;
        for r in &self.log {
            let ms = r.ms_score.map(|m| m.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{ms},{},{}",
                r.iteration, r.delta_w, r.val_hr, r.val_ndcg
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn final_weights(&self) -> WeightTable {
        WeightTable {
            weights: self.state.weights.clone(),
        }
    }
}

/// Where the IDW loop starts.
#[derive(Debug, Clone, Copy)]
pub enum IdwStart<'a> {
    /// Train the unweighted baseline from these initial parameters.
    Init(&'a TowerParams),
    /// Reuse an already trained unweighted baseline.
    Trained(&'a TrainOutcome),
}

/// Runs the full procedure: baseline, sleep/wake iterations, calibration.
/// `clusters` (one ground-truth label per item) enables the MS column.
pub fn run_idw(
    start: IdwStart<'_>,
    splits: &DatasetSplits,
    stats: &ItemStats,
    config: &IdwConfig,
    clusters: Option<&[usize]>,
) -> Result<IdwOutcome> {
    config.validate()?;
    let uniform = TrainConfig {
        strategy: Strategy::Uniform,
        ..config.wake.clone()
    };
    let baseline = match start {
        IdwStart::Init(init) => train(init, splits, stats, &uniform, &RunOptions::default())?,
        IdwStart::Trained(outcome) => outcome.clone(),
    };
    let ms = |p: &TowerParams| -> Result<Option<f64>> {
        clusters
            .map(|c| mean_silhouette(&all_item_representations(p, false), c))
            .transpose()
    };

    let mut current = baseline.params.clone();
    let mut state = DensityState::from_stats(stats);
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let wake_config = TrainConfig {
        strategy: Strategy::ExternalWeights,
        ..config.wake.clone()
    };
    for t in 1..=config.max_iterations {
        let next = sleep(&current, &state, config.momentum)?;
        snapshots.push(next.weights.clone());
        let converged = next.last_delta < config.eta;
        if !converged {
            let table = WeightTable {
                weights: next.weights.clone(),
            };
            let opts = RunOptions {
                external: Some(&table),
                ..RunOptions::default()
            };
            current = train(&current, splits, stats, &wake_config, &opts)
                .map_err(|e| Error::WakeDivergence {
                    iteration: t,
                    source: Box::new(e),
                })?
                .params;
        }
        let (val_hr, val_ndcg) = validation_metrics(&current, splits, &uniform)?;
        let row = IdwIteration {
            iteration: t,
            delta_w: next.last_delta,
            ms_score: ms(&current)?,
            val_hr,
            val_ndcg,
            woke: !converged,
        };
        info!(
            "IDW iteration {t}: |dw| {:.3e}, MS {:?}, val HR@{} {val_hr:.4}",
            row.delta_w, row.ms_score, uniform.val_k
        );
        log.push(row);
        state = next;
        if converged {
            break;
        }
    }
    let uncalibrated = current.clone();
    let calibration = freeze_item_tower_train(&current, splits, stats, &uniform)?;
    Ok(IdwOutcome {
        params: calibration.params.clone(),
        uncalibrated,
        baseline,
        calibration,
        log,
        weights: snapshots,
        state,
        val_k: uniform.val_k,
    })
}

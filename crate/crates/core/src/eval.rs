//! Sampled-negative ranking metrics, head/tail breakdown and the mean
//! silhouette of item representations.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplits, ItemPartition, Segment, SequenceExample};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::towers::{all_item_representations, score, user_interests, TowerParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub k_values: Vec<usize>,
    pub num_negatives: usize,
    /// Negatives are drawn once per (window, seed); metrics are averaged over
    /// seeds.
    pub seeds: Vec<u64>,
    /// Score against L2-normalized item representations.
    pub normalize_items: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            k_values: vec![5, 20],
            num_negatives: 99,
            seeds: vec![0, 1, 2],
            normalize_items: false,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.num_negatives == 0 {
            return Err(Error::InvalidConfig(
                "num_negatives must be at least 1".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        if let Some(k) = self
            .k_values
            .iter()
            .find(|&&k| k == 0 || k > self.num_negatives + 1)
        {
            return Err(Error::InvalidConfig(format!(
                "k = {k} outside 1..={}",
                self.num_negatives + 1
            )));
        }
        Ok(())
    }
}

/// `n` distinct items outside `history` and different from `label`.
pub fn sample_negatives<R: Rng + ?Sized>(
    history: &[u32],
    label: u32,
    num_items: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let seen: HashSet<u32> = history.iter().copied().chain([label]).collect();
    let pool: Vec<u32> = (0..num_items as u32)
        .filter(|i| !seen.contains(i))
        .collect();
    if pool.len() < n {
        return Err(Error::Protocol(format!(
            "only {} candidate negatives for {n} requested",
            pool.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// The negative-sampling stream for one example under one protocol seed.
pub fn negative_rng(seed: u64, window: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(window as u64);
    rng
}

/// 1-based rank of the label; negatives scoring equal to it rank above it.
pub fn rank_of_label(label_score: f64, negative_scores: &[f64]) -> usize {
    1 + negative_scores
        .iter()
        .filter(|&&s| s >= label_score)
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRank {
    pub user_id: u32,
    pub label: u32,
    pub rank: usize,
}

/// Ranks of every example's label among its sampled negatives.
pub fn example_ranks(
    params: &TowerParams,
    splits: &DatasetSplits,
    examples: &[SequenceExample],
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<Vec<ExampleRank>> {
    let reps = all_item_representations(params, protocol.normalize_items);
    let interests = example_interests(params, splits, examples)?;
    ranks_with(
        &reps,
        &interests,
        splits,
        examples,
        protocol.num_negatives,
        seed,
    )
}

fn example_interests(
    params: &TowerParams,
    splits: &DatasetSplits,
    examples: &[SequenceExample],
) -> Result<Vec<Mat>> {
    examples
        .iter()
        .map(|ex| user_interests(params, splits.context(ex)))
        .collect()
}

fn ranks_with(
    reps: &Mat,
    interests: &[Mat],
    splits: &DatasetSplits,
    examples: &[SequenceExample],
    num_negatives: usize,
    seed: u64,
) -> Result<Vec<ExampleRank>> {
    examples
        .iter()
        .zip(interests)
        .map(|(ex, z)| {
            let mut rng = negative_rng(seed, ex.window);
            let negatives = sample_negatives(
                splits.history(ex.owner),
                ex.label,
                splits.num_items,
                num_negatives,
                &mut rng,
            )?;
            let label_score = score(z, reps.row(ex.label as usize));
            let neg: Vec<f64> = negatives
                .iter()
                .map(|&n| score(z, reps.row(n as usize)))
                .collect();
            Ok(ExampleRank {
                user_id: ex.owner,
                label: ex.label,
                rank: rank_of_label(label_score, &neg),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Overall,
    Head,
    Tail,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Overall => "overall",
            Split::Head => "head",
            Split::Tail => "tail",
        }
    }
}

/// HR@K and NDCG@K on one split: means over examples, then mean and
/// sample standard deviation over protocol seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub k: usize,
    pub examples: usize,
    pub hr: f64,
    pub hr_std: f64,
    pub ndcg: f64,
    pub ndcg_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// One entry per (split, K); splits without examples are absent.
    pub metrics: Vec<SplitMetrics>,
    pub ms_score: Option<f64>,
    pub num_negatives: usize,
    pub seeds: Vec<u64>,
}

impl MetricsReport {
    pub fn get(&self, split: Split, k: usize) -> Option<&SplitMetrics> {
        self.metrics.iter().find(|m| m.split == split && m.k == k)
    }

    pub fn hr(&self, split: Split, k: usize) -> Option<f64> {
        self.get(split, k).map(|m| m.hr)
    }

    pub fn ndcg(&self, split: Split, k: usize) -> Option<f64> {
        self.get(split, k).map(|m| m.ndcg)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Metrics on `examples` (typically the test split) for every protocol seed.
pub fn evaluate(
    params: &TowerParams,
    splits: &DatasetSplits,
    examples: &[SequenceExample],
    partition: &ItemPartition,
    protocol: &EvalProtocol,
) -> Result<MetricsReport> {
    protocol.validate()?;
    let reps = all_item_representations(params, protocol.normalize_items);
    let interests = example_interests(params, splits, examples)?;
    // (split, k) -> per-seed (hr, ndcg) means
    let mut per_seed: BTreeMap<(Split, usize), (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for &seed in &protocol.seeds {
        let ranks = ranks_with(
            &reps,
            &interests,
            splits,
            examples,
            protocol.num_negatives,
            seed,
        )?;
        for split in [Split::Overall, Split::Head, Split::Tail] {
            let chosen: Vec<usize> = ranks
                .iter()
                .filter(|r| match split {
                    Split::Overall => true,
                    Split::Head => partition.of(r.label) == Segment::Head,
                    Split::Tail => partition.of(r.label) == Segment::Tail,
                })
                .map(|r| r.rank)
                .collect();
            if chosen.is_empty() {
                continue;
            }
            let n = chosen.len() as f64;
            for &k in &protocol.k_values {
                let hr = chosen.iter().map(|&r| hr_at_k(r, k)).sum::<f64>() / n;
                let ndcg = chosen.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n;
                let e = per_seed.entry((split, k)).or_default();
                e.0.push(hr);
                e.1.push(ndcg);
                e.2 = chosen.len();
            }
        }
    }
    let metrics = per_seed
        .into_iter()
        .map(|((split, k), (hrs, ndcgs, count))| {
            let (hr, hr_std) = mean_std(&hrs);
            let (ndcg, ndcg_std) = mean_std(&ndcgs);
            SplitMetrics {
                split,
                k,
                examples: count,
                hr,
                hr_std,
                ndcg,
                ndcg_std,
            }
        })
        .collect();
    Ok(MetricsReport {
        metrics,
        ms_score: None,
        num_negatives: protocol.num_negatives,
        seeds: protocol.seeds.clone(),
    })
}

/// Writes `user_id,label,rank`.
pub fn write_ranks_csv(path: &Path, ranks: &[ExampleRank]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "user_id,label,rank")?;
    for r in ranks {
        writeln!(out, "{},{},{}", r.user_id, r.label, r.rank)?;
    }
    out.flush()?;
    Ok(())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette of `points` (one row each) under `labels`, with Euclidean
/// distance. Points in singleton clusters score 0, as do points with
/// `a = b = 0`.
pub fn mean_silhouette(points: &Mat, labels: &[usize]) -> Result<f64> {
    assert_eq!(points.rows, labels.len(), "one label per point");
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "silhouette needs at least 2 clusters, got {}",
            ids.len()
        )));
    }
    let cluster: Vec<usize> = labels
        .iter()
        .map(|l| ids.binary_search(l).unwrap())
        .collect();
    let mut sizes = vec![0usize; ids.len()];
    for &c in &cluster {
        sizes[c] += 1;
    }
    let n = points.rows;
    let mut total = 0.0;
    let mut sums = vec![0.0; ids.len()];
    for p in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for q in 0..n {
            if q != p {
                sums[cluster[q]] += distance(points.row(p), points.row(q));
            }
        }
        let own = cluster[p];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negatives_avoid_history_and_are_exhaustive_when_tight() {
        let history: Vec<u32> = (0..20).collect();
        let mut rng = negative_rng(3, 0);
        let mut neg = sample_negatives(&history, 20, 120, 99, &mut rng).unwrap();
        neg.sort_unstable();
        assert_eq!(neg, (21..120).collect::<Vec<u32>>());
        let neg = sample_negatives(&history, 5, 500, 99, &mut negative_rng(1, 7)).unwrap();
        assert_eq!(neg.len(), 99);
        assert!(neg.iter().all(|n| !history.contains(n)));
        let again = sample_negatives(&history, 5, 500, 99, &mut negative_rng(1, 7)).unwrap();
        assert_eq!(neg, again);
        assert!(matches!(
            sample_negatives(&history, 20, 119, 99, &mut rng),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn ranks_and_cutoffs() {
        assert_eq!(rank_of_label(3.0, &[1.0, 2.0]), 1);
        assert_eq!(rank_of_label(3.0, &[3.0, 2.0]), 2);
        assert_eq!((hr_at_k(1, 5), ndcg_at_k(1, 5)), (1.0, 1.0));
        assert!((ndcg_at_k(3, 20) - 0.5).abs() < 1e-15);
        assert_eq!((hr_at_k(21, 20), ndcg_at_k(21, 20)), (0.0, 0.0));
    }

    #[test]
    fn silhouette_examples() {
        let far = Mat::from_rows(&[vec![0.0], vec![0.0], vec![10.0], vec![10.0]]);
        assert!((mean_silhouette(&far, &[0, 0, 1, 1]).unwrap() - 1.0).abs() < 1e-15);
        let same = Mat::from_rows(&vec![vec![1.0, 2.0]; 4]);
        assert_eq!(mean_silhouette(&same, &[0, 0, 1, 1]).unwrap(), 0.0);
        let line = Mat::from_rows(&[vec![0.0], vec![1.0], vec![10.0], vec![11.0]]);
        let expected = (2.0 * (9.5 / 10.5) + 2.0 * (8.5 / 9.5)) / 4.0;
        let ms = mean_silhouette(&line, &[0, 0, 1, 1]).unwrap();
        assert!((ms - expected).abs() < 1e-12);
        assert!((ms - 0.8998).abs() < 1e-4);
        assert!(matches!(
            mean_silhouette(&line, &[2, 2, 2, 2]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn protocol_validation() {
        assert!(EvalProtocol::default().validate().is_ok());
        let bad = EvalProtocol {
            k_values: vec![101],
            ..EvalProtocol::default()
        };
        assert!(bad.validate().is_err());
    }
}

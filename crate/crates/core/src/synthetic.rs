//! Synthetic sequential-interaction data from a per-user hidden Markov model
//! over interest clusters.
//!
//! Every user gets a set of interest clusters drawn from a power-law
//! distribution over clusters. A user-specific cluster transition matrix
//! produces a hidden cluster sequence, and every visited cluster emits one
//! item drawn from a power-law distribution over that cluster's items.
//! Item ids are laid out cluster-major: `item = cluster * K + index`.

use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionLog;
use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_clusters: usize,
    pub items_per_cluster: usize,
    pub num_users: usize,
    pub seq_len: usize,
    /// Probability of staying in the current interest cluster.
    pub alpha: f64,
    /// Total probability of switching to another of the user's interests.
    pub gamma: f64,
    /// Probability of staying in a cluster outside the user's interests.
    pub epsilon: f64,
    pub interest_exponent: f64,
    pub item_exponent: f64,
    pub interests_per_user: usize,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_clusters: 5,
            items_per_cluster: 10,
            num_users: 1000,
            seq_len: 20,
            alpha: 0.6,
            gamma: 0.3,
            epsilon: 0.1,
            interest_exponent: 0.0,
            item_exponent: 0.5,
            interests_per_user: 2,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn num_items(&self) -> usize {
        self.num_clusters * self.items_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_clusters == 0 {
            return bad("num_clusters must be positive");
        }
        if self.items_per_cluster == 0 {
            return bad("items_per_cluster must be positive");
        }
        if self.num_users == 0 {
            return bad("num_users must be positive");
        }
        if self.seq_len == 0 {
            return bad("seq_len must be positive");
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.alpha + self.gamma > 1.0 + STOCHASTIC_TOL {
            return bad("alpha + gamma must not exceed 1");
        }
        if !(self.interest_exponent >= 0.0) || !(self.item_exponent >= 0.0) {
            return bad("power-law exponents must be nonnegative");
        }
        if self.interests_per_user == 0 || self.interests_per_user > self.num_clusters {
            return bad("interests_per_user must lie in 1..=num_clusters");
        }
        Ok(())
    }
}

/// A user's interest clusters together with the induced transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user_id: usize,
    pub interests: Vec<usize>,
    /// Row-major `C x C` matrix, `transition[i][j] = P(next = j | current = i)`.
    pub transition: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub config: SynthConfig,
    pub log: InteractionLog,
    /// Ground-truth cluster of every item id.
    pub item_cluster: Vec<usize>,
    pub interest_weights: Vec<f64>,
    pub per_cluster_item_weights: Vec<Vec<f64>>,
    pub user_interests: Vec<Vec<usize>>,
}

/// Power-law weights over ranks `1..=n`, normalized to sum to one.
pub fn power_law_weights(exponent: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidConfig("power law over zero ranks".into()));
    }
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

pub fn sample_interest_weights(exponent: f64, num_clusters: usize) -> Result<Vec<f64>> {
    power_law_weights(exponent, num_clusters)
}

/// Draws `n` distinct clusters without replacement, each draw proportional to
/// the remaining weights. Once the remaining mass is zero, draws are uniform
/// over the clusters left.
pub fn assign_user_interests<R: Rng + ?Sized>(
    weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n > weights.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot draw {n} interests from {} clusters",
            weights.len()
        )));
    }
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut chosen = Vec::with_capacity(n);
    for _ in 0..n {
        let mass: f64 = remaining.iter().map(|&c| weights[c]).sum();
        let pick = if mass > 0.0 {
            let mut u = rng.gen::<f64>() * mass;
            let mut idx = remaining.len() - 1;
            for (i, &c) in remaining.iter().enumerate() {
                if u < weights[c] {
                    idx = i;
                    break;
                }
                u -= weights[c];
            }
            // Rounding can leave `u` past the last positive entry.
            while weights[remaining[idx]] <= 0.0 && idx > 0 {
                idx -= 1;
            }
            idx
        } else {
            rng.gen_range(0..remaining.len())
        };
        chosen.push(remaining.remove(pick));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn build_transition_matrix(
    interests: &[usize],
    alpha: f64,
    gamma: f64,
    epsilon: f64,
    num_clusters: usize,
) -> Result<Vec<Vec<f64>>> {
    let c = num_clusters;
    let y = interests.len();
    if y == 0 {
        return Err(Error::InvalidConfig("user has no interests".into()));
    }
    if interests.iter().any(|&i| i >= c) {
        return Err(Error::InvalidConfig("interest cluster out of range".into()));
    }
    let mut is_interest = vec![false; c];
    for &i in interests {
        if is_interest[i] {
            return Err(Error::InvalidConfig("duplicate interest cluster".into()));
        }
        is_interest[i] = true;
    }
    let leak = 1.0 - alpha - gamma;
    if y == c && leak.abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidConfig(
            "all clusters are interests but alpha + gamma < 1 leaves mass with nowhere to go"
                .into(),
        ));
    }

    let mut p = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            p[i][j] = match (is_interest[i], is_interest[j]) {
                (true, true) if i == j => {
                    if y == 1 {
                        alpha + gamma
                    } else {
                        alpha
                    }
                }
                (true, true) => gamma / (y - 1) as f64,
                (true, false) => leak / (c - y) as f64,
                (false, false) if i == j => epsilon,
                (false, true) => (1.0 - epsilon) / y as f64,
                (false, false) => 0.0,
            };
        }
    }
    Ok(p)
}

pub fn sample_cluster_sequence<R: Rng + ?Sized>(
    transition: &[Vec<f64>],
    interests: &[usize],
    len: usize,
    rng: &mut R,
) -> Vec<usize> {
    let rows: Vec<WeightedIndex<f64>> = transition
        .iter()
        .map(|row| WeightedIndex::new(row).expect("transition rows are stochastic"))
        .collect();
    let mut out = Vec::with_capacity(len);
    if len == 0 {
        return out;
    }
    let mut state = interests[rng.gen_range(0..interests.len())];
    out.push(state);
    for _ in 1..len {
        state = rows[state].sample(rng);
        out.push(state);
    }
    out
}

pub fn sample_item_sequence<R: Rng + ?Sized>(
    clusters: &[usize],
    per_cluster_item_weights: &[Vec<f64>],
    rng: &mut R,
) -> Vec<u32> {
    let dists: Vec<WeightedIndex<f64>> = per_cluster_item_weights
        .iter()
        .map(|w| WeightedIndex::new(w).expect("item weights are a distribution"))
        .collect();
    clusters
        .iter()
        .map(|&c| {
            let k = per_cluster_item_weights[c].len();
            (c * k + dists[c].sample(rng)) as u32
        })
        .collect()
}

/// Independent, reproducible random stream for one user.
pub fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64);
    rng
}

pub fn user_profile(config: &SynthConfig, weights: &[f64], user: usize) -> Result<UserProfile> {
    let mut rng = user_rng(config.rng_seed, user);
    let interests = assign_user_interests(weights, config.interests_per_user, &mut rng)?;
    let transition = build_transition_matrix(
        &interests,
        config.alpha,
        config.gamma,
        config.epsilon,
        config.num_clusters,
    )?;
    Ok(UserProfile {
        user_id: user,
        interests,
        transition,
    })
}

pub fn generate_dataset(config: &SynthConfig) -> Result<GeneratedDataset> {
    config.validate()?;
    let interest_weights = sample_interest_weights(config.interest_exponent, config.num_clusters)?;
    let item_weights = power_law_weights(config.item_exponent, config.items_per_cluster)?;
    let per_cluster_item_weights = vec![item_weights; config.num_clusters];

    let mut sequences = Vec::with_capacity(config.num_users);
    let mut user_interests = Vec::with_capacity(config.num_users);
    for user in 0..config.num_users {
        // Profile and sequence share the user's stream; the profile draws come first.
        let mut rng = user_rng(config.rng_seed, user);
        let interests =
            assign_user_interests(&interest_weights, config.interests_per_user, &mut rng)?;
        let transition = build_transition_matrix(
            &interests,
            config.alpha,
            config.gamma,
            config.epsilon,
            config.num_clusters,
        )?;
        let clusters = sample_cluster_sequence(&transition, &interests, config.seq_len, &mut rng);
        sequences.push(sample_item_sequence(
            &clusters,
            &per_cluster_item_weights,
            &mut rng,
        ));
        user_interests.push(interests);
    }

    let item_cluster = (0..config.num_items())
        .map(|i| i / config.items_per_cluster)
        .collect();
    Ok(GeneratedDataset {
        config: config.clone(),
        log: InteractionLog::new(sequences, config.num_items())?,
        item_cluster,
        interest_weights,
        per_cluster_item_weights,
        user_interests,
    })
}

impl GeneratedDataset {
    /// Fraction of all emitted items that fall in each cluster.
    pub fn cluster_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.config.num_clusters];
        let mut total = 0usize;
        for seq in &self.log.sequences {
            for &item in seq {
                counts[self.item_cluster[item as usize]] += 1;
                total += 1;
            }
        }
        counts
            .into_iter()
            .map(|c| c as f64 / total.max(1) as f64)
            .collect()
    }

    /// Writes `interactions.tsv`, `ground_truth.tsv` and `config.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.log.write_tsv(&dir.join("interactions.tsv"))?;
        let mut gt = std::io::BufWriter::new(std::fs::File::create(dir.join("ground_truth.tsv"))?);
        for (item, cluster) in self.item_cluster.iter().enumerate() {
            writeln!(gt, "{item}\t{cluster}")?;
        }
        gt.flush()?;
        let json = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(dir.join("config.json"), json)?;
        Ok(())
    }
}

/// Reads a ground-truth `item_id<TAB>cluster_id` file.
pub fn read_ground_truth(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(item), Some(cluster)) = (cols.next(), cols.next()) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n as u64 + 1,
                msg: "expected item_id<TAB>cluster_id".into(),
            });
        };
        let cluster = cluster.trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: n as u64 + 1,
            msg: format!("cluster id {cluster:?} is not an integer"),
        })?;
        out.push((item.trim().to_string(), cluster));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn interest_weights_closed_forms() {
        let w = sample_interest_weights(0.0, 5).unwrap();
        assert!(w.iter().all(|&x| close(x, 0.2, 1e-15)));
        let w = sample_interest_weights(1.0, 2).unwrap();
        assert!(close(w[0], 2.0 / 3.0, 1e-15) && close(w[1], 1.0 / 3.0, 1e-15));
        let w = sample_interest_weights(2.0, 3).unwrap();
        for (got, want) in w.iter().zip([36.0 / 49.0, 9.0 / 49.0, 4.0 / 49.0]) {
            assert!(close(*got, want, 1e-15));
        }
        assert!(matches!(
            sample_interest_weights(1.0, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn interest_assignment_edge_cases() {
        let mut rng = user_rng(1, 0);
        assert_eq!(
            assign_user_interests(&[1.0, 0.0, 0.0], 1, &mut rng).unwrap(),
            vec![0]
        );
        let uniform = vec![0.2; 5];
        assert_eq!(
            assign_user_interests(&uniform, 5, &mut rng).unwrap(),
            vec![0, 1, 2, 3, 4]
        );
        assert!(assign_user_interests(&uniform, 6, &mut rng).is_err());
    }

    #[test]
    fn interest_assignment_matches_weights() {
        let mut rng = user_rng(7, 3);
        let draws = 100_000;
        let hits = (0..draws)
            .filter(|_| assign_user_interests(&[0.8, 0.2], 1, &mut rng).unwrap()[0] == 0)
            .count();
        assert!(close(hits as f64 / draws as f64, 0.8, 0.01));
    }

    #[test]
    fn transition_matrix_worked_example() {
        let p = build_transition_matrix(&[0, 1], 0.6, 0.3, 0.1, 5).unwrap();
        let row0 = [0.6, 0.3, 0.1 / 3.0, 0.1 / 3.0, 0.1 / 3.0];
        let row2 = [0.45, 0.45, 0.1, 0.0, 0.0];
        for j in 0..5 {
            assert!(close(p[0][j], row0[j], 1e-12));
            assert!(close(p[2][j], row2[j], 1e-12));
        }
        for row in &p {
            assert!(close(row.iter().sum::<f64>(), 1.0, 1e-9));
        }
    }

    #[test]
    fn transition_matrix_degenerate_cases() {
        let p = build_transition_matrix(&[0], 1.0, 0.0, 0.5, 2).unwrap();
        assert_eq!(p[0], vec![1.0, 0.0]);
        // Single interest folds gamma into the self-transition.
        let p = build_transition_matrix(&[1], 0.6, 0.3, 0.1, 3).unwrap();
        assert!(close(p[1][1], 0.9, 1e-15));
        assert!(close(p[1].iter().sum::<f64>(), 1.0, 1e-12));
        // All clusters are interests but mass leaks.
        assert!(build_transition_matrix(&[0, 1], 0.6, 0.3, 0.1, 2).is_err());
        assert!(build_transition_matrix(&[0, 1], 0.6, 0.4, 0.1, 2).is_ok());
    }

    #[test]
    fn absorbing_chain_is_constant() {
        let identity: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut rng = user_rng(0, 0);
        let seq = sample_cluster_sequence(&identity, &[2], 50, &mut rng);
        assert!(seq.iter().all(|&c| c == 2));
    }

    #[test]
    fn self_transition_frequency_matches_alpha() {
        let p = build_transition_matrix(&[0, 1], 0.6, 0.3, 0.1, 5).unwrap();
        let mut rng = user_rng(11, 0);
        let seq = sample_cluster_sequence(&p, &[0, 1], 100_000, &mut rng);
        let (mut from_interest, mut stayed) = (0usize, 0usize);
        for w in seq.windows(2) {
            if w[0] < 2 {
                from_interest += 1;
                stayed += usize::from(w[0] == w[1]);
            }
        }
        assert!(close(stayed as f64 / from_interest as f64, 0.6, 0.01));
    }

    #[test]
    fn doubly_stochastic_chain_visits_uniformly() {
        let p = vec![vec![0.25; 4]; 4];
        let mut rng = user_rng(5, 9);
        let seq = sample_cluster_sequence(&p, &[0], 100_000, &mut rng);
        for c in 0..4 {
            let f = seq.iter().filter(|&&s| s == c).count() as f64 / seq.len() as f64;
            assert!(close(f, 0.25, 0.01), "cluster {c}: {f}");
        }
    }

    #[test]
    fn item_sequence_id_arithmetic() {
        let one_hot = vec![vec![1.0, 0.0, 0.0]; 4];
        let mut rng = user_rng(0, 0);
        assert_eq!(
            sample_item_sequence(&[0, 3, 1], &one_hot, &mut rng),
            vec![0, 9, 3]
        );
        let w = vec![power_law_weights(0.5, 10).unwrap(); 3];
        let items = sample_item_sequence(&[2, 2], &w, &mut rng);
        assert!(items.iter().all(|&i| (20..30).contains(&i)));
    }

    #[test]
    fn item_frequencies_follow_power_law() {
        let w = power_law_weights(0.5, 10).unwrap();
        let table = vec![w.clone()];
        let mut rng = user_rng(3, 1);
        let n = 100_000;
        let items = sample_item_sequence(&vec![0; n], &table, &mut rng);
        let mut freq = [0.0; 10];
        for i in items {
            freq[i as usize] += 1.0 / n as f64;
        }
        let tv: f64 = 0.5 * freq.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            num_users: 50,
            rng_seed: 42,
            ..SynthConfig::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a
            .log
            .sequences
            .iter()
            .flatten()
            .all(|&i| (i as usize) < cfg.num_items()));
    }

    #[test]
    fn profile_helper_matches_generation() {
        let cfg = SynthConfig {
            num_users: 5,
            rng_seed: 9,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for u in 0..5 {
            let profile = user_profile(&cfg, &ds.interest_weights, u).unwrap();
            assert_eq!(profile.interests, ds.user_interests[u]);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SynthConfig::default();
        for cfg in [
            SynthConfig {
                alpha: 0.8,
                gamma: 0.3,
                ..base.clone()
            },
            SynthConfig {
                interests_per_user: 6,
                ..base.clone()
            },
            SynthConfig {
                num_clusters: 0,
                ..base.clone()
            },
            SynthConfig {
                epsilon: 1.5,
                ..base.clone()
            },
        ] {
            assert!(matches!(
                generate_dataset(&cfg),
                Err(Error::InvalidConfig(_))
            ));
        }
    }
}

//! Acceptance criteria, one test per criterion.
//!
//! Criteria 1-5 train many models (or need MovieLens-1M) and are ignored by
//! default. Run everything with
//!
//! ```text
//! IDW_ML1M_PATH=/path/to/ratings.dat \
//!     cargo test -p idw-core --test acceptance -- --include-ignored --nocapture
//! ```

use std::sync::OnceLock;

use idw_core::dataset::{ingest, LogFormat, MAX_LEN};
use idw_core::eval::Split;
use idw_core::experiment::{
    prepare_synthetic, run_methods, ExperimentConfig, Method, MethodRun, Prepared,
};
use idw_core::synthetic::SynthConfig;

/// Criterion 6 is the property suites.
#[path = "gradients.rs"]
mod criterion_6_gradients;
#[path = "properties.rs"]
mod criterion_6_properties;
#[path = "towers.rs"]
mod criterion_6_towers;
#[path = "training.rs"]
mod criterion_6_training;

const EXPONENTS: [f64; 3] = [0.0, 1.0, 2.0];
const SEEDS: [u64; 3] = [0, 1, 2];
const HEAD_CLUSTERS: [usize; 2] = [0, 1];

fn report(name: &str, pass: bool, detail: String) {
    println!("{name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name} failed: {detail}");
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone)]
struct Summary {
    ms: f64,
    hr_all: f64,
    hr_tail: f64,
    /// MS after each IDW iteration.
    ms_trajectory: Vec<f64>,
}

impl Summary {
    fn of(run: &MethodRun) -> Self {
        Self {
            ms: run.report.ms_score.expect("clusters are known"),
            hr_all: run.report.hr(Split::Overall, 5).unwrap(),
            hr_tail: run.report.hr(Split::Tail, 5).unwrap(),
            ms_trajectory: run.idw_log.iter().filter_map(|r| r.ms_score).collect(),
        }
    }
}

/// Runs SUR, MUR and MUR-IDW on one synthetic log.
fn run_seed(exponent: f64, seed: u64, config: &ExperimentConfig, tag: &str) -> [Summary; 3] {
    let methods = [Method::Sur, Method::Mur, Method::MurIdw];
    let synth = SynthConfig {
        interest_exponent: exponent,
        rng_seed: seed,
        ..SynthConfig::default()
    };
    let data = prepare_synthetic(&synth, &HEAD_CLUSTERS).unwrap();
    let runs = run_methods(&methods, &data, &config.with_seed(seed)).unwrap();
    let s = [0, 1, 2].map(|i| Summary::of(&runs[i]));
    for (m, x) in methods.iter().zip(&s) {
        println!(
            "{tag} exponent {exponent} seed {seed} {:8} MS {:.3} HR@5 all {:.3} tail {:.3}",
            m.name(),
            x.ms,
            x.hr_all,
            x.hr_tail
        );
    }
    println!("  IDW MS trajectory {:.3?}", s[2].ms_trajectory);
    s
}

/// `[exponent][seed] -> (SUR, MUR, MUR-IDW)` with the d=16 metric preset.
type Sweep = Vec<Vec<[Summary; 3]>>;

fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let config = ExperimentConfig::synthetic();
        EXPONENTS
            .iter()
            .map(|&e| {
                SEEDS
                    .iter()
                    .map(|&s| run_seed(e, s, &config, "d=16"))
                    .collect()
            })
            .collect()
    })
}

/// `[seed] -> (SUR, MUR, MUR-IDW)` at exponent 2 with the d=2 preset.
fn high_skew_2d() -> &'static Vec<[Summary; 3]> {
    static RUNS: OnceLock<Vec<[Summary; 3]>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let config = ExperimentConfig::synthetic_2d();
        SEEDS
            .iter()
            .map(|&s| run_seed(2.0, s, &config, "d=2"))
            .collect()
    })
}

fn at(exponent: usize, method: usize, f: impl Fn(&Summary) -> f64) -> f64 {
    mean(sweep()[exponent].iter().map(|runs| f(&runs[method])))
}

const SUR: usize = 0;
const MUR: usize = 1;
const IDW: usize = 2;

#[test]
#[ignore = "synthetic sweep: 27 training runs"]
fn criterion_1a_mur_tail_drops_with_skew() {
    let low = at(0, MUR, |s| s.hr_tail);
    let high = at(2, MUR, |s| s.hr_tail);
    report(
        "criterion 1a",
        low - high >= 0.10,
        format!(
            "MUR tail HR@5 {low:.3} at exponent 0, {high:.3} at exponent 2, need a drop >= 0.10"
        ),
    );
}

#[test]
#[ignore = "synthetic sweep: 27 training runs"]
fn criterion_1b_idw_tail_at_high_skew() {
    let mur = at(2, MUR, |s| s.hr_tail);
    let idw = at(2, IDW, |s| s.hr_tail);
    report(
        "criterion 1b",
        idw >= mur,
        format!("tail HR@5 at exponent 2: MUR-IDW {idw:.3}, MUR {mur:.3}"),
    );
}

#[test]
#[ignore = "synthetic sweep: 27 training runs"]
fn criterion_1c_idw_overall_at_high_skew() {
    let mur = at(2, MUR, |s| s.hr_all);
    let idw = at(2, IDW, |s| s.hr_all);
    report(
        "criterion 1c",
        idw >= mur,
        format!("all-cluster HR@5 at exponent 2: MUR-IDW {idw:.3}, MUR {mur:.3}"),
    );
}

#[test]
#[ignore = "synthetic runs: 9 training runs at d=2"]
fn criterion_2_ms_rises_over_idw_iterations() {
    // every seed must gain >= 0.3; the level reached within ten iterations
    // must be 0.65 within the 0.15 tolerance, averaged over seeds
    let runs = high_skew_2d();
    let gains: Vec<f64> = runs
        .iter()
        .map(|r| {
            let t = &r[IDW].ms_trajectory;
            t.last().unwrap() - t[0]
        })
        .collect();
    let peak = mean(runs.iter().map(|r| {
        r[IDW]
            .ms_trajectory
            .iter()
            .take(10)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }));
    let first = mean(runs.iter().map(|r| r[IDW].ms_trajectory[0]));
    report(
        "criterion 2",
        gains.iter().all(|&g| g >= 0.3) && peak >= 0.65 - 0.15,
        format!(
            "MS gain per seed {gains:.3?} (need >= 0.3 each), mean MS at iteration 1 {first:.3}, \
             mean best MS within 10 iterations {peak:.3} (need >= 0.50)"
        ),
    );
}

#[test]
#[ignore = "synthetic sweep: 27 training runs"]
fn criterion_3_mur_clusters_better_than_sur() {
    let pairs: Vec<(f64, f64)> = (0..EXPONENTS.len())
        .map(|e| (at(e, MUR, |s| s.ms), at(e, SUR, |s| s.ms)))
        .collect();
    report(
        "criterion 3",
        pairs.iter().all(|(m, s)| m >= s),
        format!("mean MS (MUR, SUR) per exponent {pairs:.3?}"),
    );
}

/// Per-seed MUR and MUR-IDW runs on MovieLens-1M.
struct Movielens {
    mur: Vec<MethodRun>,
    idw: Vec<MethodRun>,
}

fn movielens() -> &'static Result<Movielens, String> {
    static RUNS: OnceLock<Result<Movielens, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let path = std::env::var("IDW_ML1M_PATH").map_err(|_| {
            "IDW_ML1M_PATH is not set; MovieLens-1M ratings.dat is unavailable".to_string()
        })?;
        let log = ingest(std::path::Path::new(&path), LogFormat::MovieLens)
            .map_err(|e| e.to_string())?
            .log;
        let data = Prepared::from_log(&log, MAX_LEN).map_err(|e| e.to_string())?;
        let mut out = Movielens {
            mur: Vec::new(),
            idw: Vec::new(),
        };
        for seed in SEEDS {
            let config = ExperimentConfig::real().with_seed(seed);
            let mut runs = run_methods(&[Method::Mur, Method::MurIdw], &data, &config)
                .map_err(|e| e.to_string())?;
            out.idw.push(runs.pop().unwrap());
            out.mur.push(runs.pop().unwrap());
        }
        Ok(out)
    })
}

fn ml_mean(runs: &[MethodRun], split: Split, ndcg: bool) -> f64 {
    mean(runs.iter().map(|r| {
        if ndcg {
            r.report.ndcg(split, 20).unwrap()
        } else {
            r.report.hr(split, 20).unwrap()
        }
    }))
}

#[test]
#[ignore = "needs MovieLens-1M (IDW_ML1M_PATH)"]
fn criterion_4_movielens_reproduction() {
    let runs = match movielens() {
        Ok(r) => r,
        Err(e) => return report("criterion 4", false, e.clone()),
    };
    let hr = ml_mean(&runs.idw, Split::Overall, false);
    let ndcg = ml_mean(&runs.idw, Split::Overall, true);
    let mur_hr = ml_mean(&runs.mur, Split::Overall, false);
    let mur_ndcg = ml_mean(&runs.mur, Split::Overall, true);
    let close = (hr - 0.8265).abs() <= 0.025 && (ndcg - 0.4967).abs() <= 0.025;
    let ordered = hr > mur_hr && ndcg > mur_ndcg;
    report(
        "criterion 4",
        close && ordered,
        format!(
            "MUR-IDW HR@20 {hr:.4} NDCG@20 {ndcg:.4} (targets 0.8265 / 0.4967 +- 0.025); \
             MUR HR@20 {mur_hr:.4} NDCG@20 {mur_ndcg:.4}"
        ),
    );
}

#[test]
#[ignore = "needs MovieLens-1M (IDW_ML1M_PATH)"]
fn criterion_5_movielens_head_tail() {
    let runs = match movielens() {
        Ok(r) => r,
        Err(e) => return report("criterion 5", false, e.clone()),
    };
    let tail = (
        ml_mean(&runs.mur, Split::Tail, true),
        ml_mean(&runs.idw, Split::Tail, true),
    );
    let head = (
        ml_mean(&runs.mur, Split::Head, true),
        ml_mean(&runs.idw, Split::Head, true),
    );
    report(
        "criterion 5",
        tail.1 > tail.0 && head.0 - head.1 <= 0.02,
        format!(
            "tail NDCG@20 MUR {:.4} -> MUR-IDW {:.4}; head NDCG@20 MUR {:.4} -> MUR-IDW {:.4}",
            tail.0, tail.1, head.0, head.1
        ),
    );
}

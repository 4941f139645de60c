//! Score tables, return normalization, generalization gap and aggregate
//! statistics with stratified bootstrap confidence intervals.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::LevelKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub env_kind: LevelKind,
    pub level_seed: u64,
    pub policy_id: String,
    pub run_seed: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub split: Split,
}

/// Per-level returns; `(env_kind, level_seed, policy_id, run_seed)` is unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    rows: Vec<ScoreRow>,
    keys: BTreeSet<(LevelKind, u64, String, u64)>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ScoreRow) -> Result<()> {
        let key = (row.env_kind, row.level_seed, row.policy_id.clone(), row.run_seed);
        if !self.keys.insert(key) {
            return Err(Error::Config(format!(
                "duplicate score row for level {} policy {} run {}",
                row.level_seed, row.policy_id, row.run_seed
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[ScoreRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn extend(&mut self, other: ScoreTable) -> Result<()> {
        other.rows.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn policies(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.policy_id.clone()).collect()
    }

    /// Mean raw return of one policy on one split, over every row.
    pub fn mean_return(&self, policy_id: &str, split: Split) -> Option<f64> {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.policy_id == policy_id && r.split == split)
            .map(|r| r.ret)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush().map_err(|e| Error::io("scores.csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut t = ScoreTable::new();
        for row in rd.deserialize() {
            t.push(row?)?;
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub r_min: f64,
    pub r_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub per_kind: BTreeMap<LevelKind, Bounds>,
}

impl Default for NormalizationConstants {
    /// Maze kinds use (5, 10); key-door levels use (3.5, 10).
    fn default() -> Self {
        let maze = Bounds {
            r_min: 5.0,
            r_max: 10.0,
        };
        NormalizationConstants {
            per_kind: BTreeMap::from([
                (LevelKind::Maze, maze),
                (LevelKind::HiddenMaze, maze),
                (
                    LevelKind::KeyDoor,
                    Bounds {
                        r_min: 3.5,
                        r_max: 10.0,
                    },
                ),
            ]),
        }
    }
}

impl NormalizationConstants {
    pub fn get(&self, kind: LevelKind) -> Result<Bounds> {
        let b = self
            .per_kind
            .get(&kind)
            .copied()
            .ok_or_else(|| Error::Config(format!("no normalization constants for {}", kind.name())))?;
        if !(b.r_max > b.r_min) {
            return Err(Error::Config(format!("r_max must exceed r_min for {}", kind.name())));
        }
        Ok(b)
    }

    /// Replaces `r_min` with the measured random-policy return when the two
    /// differ by more than 20% of the tabled value. Returns whether it did.
    pub fn calibrate_min(&mut self, kind: LevelKind, random_return: f64) -> Result<bool> {
        let b = self.get(kind)?;
        let off = (random_return - b.r_min).abs() > 0.2 * b.r_min.abs();
        if off {
            if !(random_return < b.r_max) {
                return Err(Error::Config(format!(
                    "random return {random_return} is not below r_max for {}",
                    kind.name()
                )));
            }
            self.per_kind.insert(
                kind,
                Bounds {
                    r_min: random_return,
                    r_max: b.r_max,
                },
            );
        }
        Ok(off)
    }
}

pub fn normalized_return(r: f64, consts: &NormalizationConstants, kind: LevelKind) -> Result<f64> {
    let b = consts.get(kind)?;
    Ok((r - b.r_min) / (b.r_max - b.r_min))
}

/// `(train - test) / train`.
pub fn generalization_gap(train_mean: f64, test_mean: f64) -> Result<f64> {
    if train_mean == 0.0 {
        return Err(Error::UndefinedGap);
    }
    Ok((train_mean - test_mean) / train_mean)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Interquartile mean: drops `floor(n/4)` values from each end.
pub fn iqm(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let cut = v.len() / 4;
    mean(&v[cut..v.len() - cut])
}

pub fn optimality_gap(xs: &[f64]) -> f64 {
    1.0 - mean(xs)
}

pub fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mean,
    Median,
    Iqm,
    OptimalityGap,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Mean, Metric::Median, Metric::Iqm, Metric::OptimalityGap];

    pub fn compute(self, xs: &[f64]) -> f64 {
        match self {
            Metric::Mean => mean(xs),
            Metric::Median => median(xs),
            Metric::Iqm => iqm(xs),
            Metric::OptimalityGap => optimality_gap(xs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy_id: String,
    pub split: Split,
    pub n_runs: usize,
    /// Normalized score of every run, keyed by `(env_kind, run_seed)`.
    pub run_scores: Vec<(LevelKind, u64, f64)>,
    pub metrics: BTreeMap<Metric, Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_bootstrap: usize,
    pub policies: Vec<PolicyReport>,
}

/// Mean normalized return of each `(env_kind, run_seed)` for one policy and split.
pub fn run_scores(
    table: &ScoreTable,
    consts: &NormalizationConstants,
    policy_id: &str,
    split: Split,
) -> Result<BTreeMap<(LevelKind, u64), f64>> {
    let mut acc: BTreeMap<(LevelKind, u64), (f64, usize)> = BTreeMap::new();
    for r in table.rows().iter().filter(|r| r.policy_id == policy_id && r.split == split) {
        let n = normalized_return(r.ret, consts, r.env_kind)?;
        let e = acc.entry((r.env_kind, r.run_seed)).or_insert((0.0, 0));
        e.0 += n;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Percentile bootstrap over runs, resampling within each env kind.
pub fn stratified_bootstrap(
    strata: &BTreeMap<LevelKind, Vec<f64>>,
    metric: Metric,
    n_bootstrap: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let total: usize = strata.values().map(Vec::len).sum();
    let mut sample = Vec::with_capacity(total);
    (0..n_bootstrap)
        .map(|_| {
            sample.clear();
            for xs in strata.values() {
                for _ in 0..xs.len() {
                    sample.push(xs[rng.random_range(0..xs.len())]);
                }
            }
            metric.compute(&sample)
        })
        .collect()
}

/// Linear-interpolated percentile `q` in [0, 100].
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Bootstrap draws kept for export, keyed by `(policy, metric)`.
pub type BootstrapDraws = BTreeMap<(String, Metric), Vec<f64>>;

/// Mean, median, IQM and optimality gap of normalized run scores for every
/// policy on `split`, each with a 95% stratified-bootstrap interval.
pub fn aggregate_metrics(
    table: &ScoreTable,
    consts: &NormalizationConstants,
    split: Split,
    n_bootstrap: usize,
    seed: u64,
) -> Result<(AggregateReport, BootstrapDraws)> {
    if table.is_empty() {
        return Err(Error::NoData("empty score table".into()));
    }
    if n_bootstrap == 0 {
        return Err(Error::Config("n_bootstrap must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policies = Vec::new();
    let mut draws = BTreeMap::new();
    for pid in table.policies() {
        let scores = run_scores(table, consts, &pid, split)?;
        if scores.is_empty() {
            continue;
        }
        if scores.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: scores.len(),
            });
        }
        let mut strata: BTreeMap<LevelKind, Vec<f64>> = BTreeMap::new();
        for (&(kind, _), &s) in &scores {
            strata.entry(kind).or_default().push(s);
        }
        let all: Vec<f64> = scores.values().copied().collect();
        let mut metrics = BTreeMap::new();
        for metric in Metric::ALL {
            let value = metric.compute(&all);
            let boot = stratified_bootstrap(&strata, metric, n_bootstrap, &mut rng);
            // The percentile interval can exclude the point estimate for
            // skewed statistics; widen it so it always contains it.
            let ci_low = percentile(&boot, 2.5).min(value);
            let ci_high = percentile(&boot, 97.5).max(value);
            metrics.insert(
                metric,
                Estimate {
                    value,
                    ci_low,
                    ci_high,
                },
            );
            draws.insert((pid.clone(), metric), boot);
        }
        policies.push(PolicyReport {
            policy_id: pid,
            split,
            n_runs: all.len(),
            run_scores: scores.into_iter().map(|((k, s), v)| (k, s, v)).collect(),
            metrics,
        });
    }
    if policies.is_empty() {
        return Err(Error::NoData(format!("no rows for split {split:?}")));
    }
    Ok((
        AggregateReport {
            n_bootstrap,
            policies,
        },
        draws,
    ))
}

pub fn write_bootstrap_csv<W: Write>(w: W, draws: &BootstrapDraws) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        policy_id: &'a str,
        metric: Metric,
        resample: usize,
        value: f64,
    }
    let mut wr = csv::Writer::from_writer(w);
    for ((pid, metric), values) in draws {
        for (i, &value) in values.iter().enumerate() {
            wr.serialize(Row {
                policy_id: pid,
                metric: *metric,
                resample: i,
                value,
            })?;
        }
    }
    wr.flush().map_err(|e| Error::io("bootstrap.csv", e))?;
    Ok(())
}

/// Average over environments of `P(x > y) + 0.5 P(x = y)` across all run
/// pairs. Both maps must cover the same environments.
pub fn probability_of_improvement(
    x: &BTreeMap<String, Vec<f64>>,
    y: &BTreeMap<String, Vec<f64>>,
) -> Result<f64> {
    if x.keys().ne(y.keys()) {
        return Err(Error::Config("probability of improvement needs matching environments".into()));
    }
    if x.is_empty() {
        return Err(Error::NoData("no environments".into()));
    }
    let mut total = 0.0;
    for (env, xs) in x {
        let ys = &y[env];
        if xs.is_empty() || ys.is_empty() {
            return Err(Error::NoData(format!("no runs for {env}")));
        }
        let mut wins = 0.0;
        for &a in xs {
            for &b in ys {
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total += wins / (xs.len() * ys.len()) as f64;
    }
    Ok(total / x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        let c = NormalizationConstants::default();
        assert!((normalized_return(5.6, &c, LevelKind::Maze).unwrap() - 0.12).abs() < 1e-12);
        assert_eq!(normalized_return(5.0, &c, LevelKind::Maze).unwrap(), 0.0);
        assert_eq!(normalized_return(10.0, &c, LevelKind::Maze).unwrap(), 1.0);
        assert!(normalized_return(2.0, &c, LevelKind::KeyDoor).unwrap() < 0.0);
        let empty = NormalizationConstants {
            per_kind: BTreeMap::new(),
        };
        assert!(normalized_return(1.0, &empty, LevelKind::Maze).unwrap_err().is_config());
    }

    #[test]
    fn calibration_threshold() {
        let mut c = NormalizationConstants::default();
        assert!(!c.calibrate_min(LevelKind::Maze, 5.9).unwrap());
        assert_eq!(c.get(LevelKind::Maze).unwrap().r_min, 5.0);
        assert!(c.calibrate_min(LevelKind::Maze, 6.5).unwrap());
        assert_eq!(c.get(LevelKind::Maze).unwrap().r_min, 6.5);
    }

    #[test]
    fn gap_examples() {
        let g = generalization_gap(33.9, 31.3).unwrap();
        assert!((g - 0.0767).abs() < 1e-4);
        assert_eq!((g * 1000.0).round() / 10.0, 7.7);
        assert_eq!(generalization_gap(4.0, 4.0).unwrap(), 0.0);
        assert!(generalization_gap(4.0, 5.0).unwrap() < 0.0);
        assert!(matches!(generalization_gap(0.0, 1.0), Err(Error::UndefinedGap)));
    }

    #[test]
    fn iqm_examples() {
        let xs: Vec<f64> = (1..=8).map(|i| i as f64 / 8.0).collect();
        assert_eq!(iqm(&xs), 0.5625);
        let ones = vec![1.0; 7];
        for m in [Metric::Mean, Metric::Median, Metric::Iqm] {
            assert_eq!(m.compute(&ones), 1.0);
        }
        assert_eq!(optimality_gap(&ones), 0.0);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    #[test]
    fn improvement_examples() {
        let env = |v: &[f64]| BTreeMap::from([("maze".to_string(), v.to_vec())]);
        assert_eq!(probability_of_improvement(&env(&[3.0, 4.0]), &env(&[1.0, 2.0])).unwrap(), 1.0);
        assert_eq!(probability_of_improvement(&env(&[1.0, 2.0]), &env(&[1.0, 2.0])).unwrap(), 0.5);
        let other = BTreeMap::from([("heist".to_string(), vec![1.0])]);
        assert!(probability_of_improvement(&env(&[1.0]), &other).is_err());
    }

    fn table() -> ScoreTable {
        let mut t = ScoreTable::new();
        for run in 0..4u64 {
            for level in 0..3u64 {
                t.push(ScoreRow {
                    env_kind: LevelKind::Maze,
                    level_seed: 100 + level,
                    policy_id: "a".into(),
                    run_seed: run,
                    ret: 5.0 + run as f64 + level as f64 * 0.5,
                    split: Split::Test,
                })
                .unwrap();
            }
        }
        t
    }

    #[test]
    fn duplicate_rows_rejected() {
        let mut t = table();
        let r = t.rows()[0].clone();
        assert!(t.push(r).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = table();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("env_kind,level_seed,policy_id,run_seed,return,split"));
        assert_eq!(ScoreTable::read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn aggregate_contains_point_estimates() {
        let (rep, draws) = aggregate_metrics(&table(), &NormalizationConstants::default(), Split::Test, 2000, 1).unwrap();
        let p = &rep.policies[0];
        assert_eq!(p.n_runs, 4);
        // Run means: (5.5 + r) -> normalized (0.5 + r) / 5.
        let mean_expected = (0..4).map(|r| (0.5 + r as f64) / 5.0).sum::<f64>() / 4.0;
        assert!((p.metrics[&Metric::Mean].value - mean_expected).abs() < 1e-12);
        for e in p.metrics.values() {
            assert!(e.ci_low <= e.value && e.value <= e.ci_high);
        }
        assert_eq!(draws[&("a".to_string(), Metric::Iqm)].len(), 2000);
        assert!(aggregate_metrics(&ScoreTable::new(), &NormalizationConstants::default(), Split::Test, 10, 0).is_err());
    }
}

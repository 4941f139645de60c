//! Config-driven experiment runner and report export.
//!
//! An experiment directory holds `config.toml` (the resolved config),
//! `runs/run-<seed>/` with checkpoints, training curves and a per-run
//! `scores.csv`, plus the merged `scores.csv`, `summary.json`,
//! `report.csv`, `bootstrap.csv`, `summary.txt` and `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{run_episode, BundleManifest, EnsembleBundle, Fallback};
use crate::entropy::KnnConfig;
use crate::env::{generate_level, LevelKind, LevelSpec, ObsMode, Action, DEFAULT_HORIZON, GOAL_REWARD};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_metrics, write_bootstrap_csv, AggregateReport, NormalizationConstants, ScoreRow, ScoreTable, Split,
};
use crate::policy::{save_checkpoint, Architecture, ObsEncoding, PolicyParams};
use crate::ppo::{evaluate_policy, evaluate_random, train, write_curve_csv, EpisodeStats, PpoConfig, RewardSource, TrainOutcome, TrainSpec};

pub const SCHEMA_VERSION: u32 = 1;
/// Test levels start this far above the training seed base.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;
/// Policy ids ending with this suffix hold intrinsic returns.
pub const INTRINSIC_SUFFIX: &str = "/intrinsic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TrainMaxent,
    TrainEnsemble,
    EvalExpgen,
    AblationMixedReward,
    AblationRandomFallback,
    HiddenMaze,
    KnnSweep,
    MemoryAblation,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TrainMaxent => "train-maxent",
            ExperimentKind::TrainEnsemble => "train-ensemble",
            ExperimentKind::EvalExpgen => "eval-expgen",
            ExperimentKind::AblationMixedReward => "ablation-mixed-reward",
            ExperimentKind::AblationRandomFallback => "ablation-random-fallback",
            ExperimentKind::HiddenMaze => "hidden-maze",
            ExperimentKind::KnnSweep => "knn-sweep",
            ExperimentKind::MemoryAblation => "memory-ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSettings {
    pub kind: LevelKind,
    pub width: usize,
    pub height: usize,
    pub n_train_levels: u64,
    pub level_seed_base: u64,
    pub horizon: usize,
    /// Defaults to the level kind's own mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ObsMode>,
}

impl Default for EnvSettings {
    fn default() -> Self {
        EnvSettings {
            kind: LevelKind::Maze,
            width: 9,
            height: 9,
            n_train_levels: 8,
            level_seed_base: 0,
            horizon: DEFAULT_HORIZON,
            mode: None,
        }
    }
}

impl EnvSettings {
    pub fn mode(&self) -> ObsMode {
        self.mode.unwrap_or_else(|| self.kind.default_mode())
    }

    pub fn train_seeds(&self) -> std::ops::Range<u64> {
        self.level_seed_base..self.level_seed_base + self.n_train_levels
    }

    pub fn test_seeds(&self, n_test: u64) -> std::ops::Range<u64> {
        let start = self.level_seed_base + TEST_SEED_OFFSET;
        start..start + n_test
    }

    pub fn levels(&self, seeds: std::ops::Range<u64>) -> Result<Vec<Arc<LevelSpec>>> {
        seeds
            .map(|s| generate_level(s, self.kind, self.width, self.height).map(Arc::new))
            .collect()
    }
}

/// Shape of the exploration policy (also used for the extrinsic comparator
/// and the hidden-maze policy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySettings {
    pub encoding: ObsEncoding,
    pub hidden: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recurrent: Option<usize>,
}

impl Default for PolicySettings {
    fn default() -> Self {
        PolicySettings {
            encoding: ObsEncoding::Egocentric {
                radius: 1,
                include_position: false,
            },
            hidden: vec![32, 32],
            recurrent: Some(32),
        }
    }
}

impl PolicySettings {
    pub fn architecture(&self, env: &EnvSettings) -> Architecture {
        Architecture::new(
            self.encoding,
            env.width,
            env.height,
            self.hidden.clone(),
            self.recurrent,
            Action::COUNT,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSettings {
    pub m: usize,
    pub k: usize,
    pub alpha: f64,
    pub fallback: Fallback,
    pub encoding: ObsEncoding,
    pub hidden: Vec<usize>,
    /// Training steps per member; defaults to `ppo.total_steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<usize>,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        EnsembleSettings {
            m: 10,
            k: 6,
            alpha: 0.5,
            fallback: Fallback::MaxEnt,
            encoding: ObsEncoding::Flat,
            hidden: vec![32],
            total_steps: None,
        }
    }
}

impl EnsembleSettings {
    pub fn architecture(&self, env: &EnvSettings) -> Architecture {
        Architecture::new(self.encoding, env.width, env.height, self.hidden.clone(), None, Action::COUNT)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub n_test_levels: u64,
    pub episodes_per_level: usize,
    pub n_bootstrap: usize,
    pub greedy: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_test_levels: 32,
            episodes_per_level: 1,
            n_bootstrap: 2000,
            greedy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub knn_k: Vec<usize>,
    pub mixed_beta: Vec<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            knn_k: vec![1, 2, 4, 8],
            mixed_beta: vec![0.0, 0.5, 0.9, 1.0],
        }
    }
}

/// Pre-trained policies for evaluation kinds. Relative paths resolve against
/// the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Independent runs, seeded `seed, seed + 1, ...`.
    #[serde(default = "default_runs")]
    pub n_runs: u64,
    /// Also train an extrinsic-reward policy with the exploration
    /// policy's architecture and settings.
    #[serde(default)]
    pub compare_extrinsic: bool,
    #[serde(default)]
    pub env: EnvSettings,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub knn: KnnConfig,
    #[serde(default)]
    pub policy: PolicySettings,
    #[serde(default)]
    pub ensemble: EnsembleSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub checkpoints: CheckpointSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_runs() -> u64 {
    3
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            kind,
            seed: 0,
            n_runs: default_runs(),
            compare_extrinsic: false,
            env: EnvSettings::default(),
            ppo: PpoConfig::default(),
            knn: KnnConfig::default(),
            policy: PolicySettings::default(),
            ensemble: EnsembleSettings::default(),
            eval: EvalSettings::default(),
            sweep: SweepSettings::default(),
            checkpoints: CheckpointSettings::default(),
            output_dir: None,
        }
    }

    /// Parses TOML, applying `key.path=value` overrides first.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let (Some(b), Some(base)) = (&cfg.checkpoints.bundle, path.parent()) {
            if b.is_relative() {
                cfg.checkpoints.bundle = Some(base.join(b));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return cfg_err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.n_runs == 0 {
            return cfg_err("n_runs must be at least 1".into());
        }
        if self.env.n_train_levels == 0 || self.eval.n_test_levels == 0 {
            return cfg_err("level counts must be positive".into());
        }
        if self.env.n_train_levels > TEST_SEED_OFFSET {
            return cfg_err(format!(
                "training seeds {:?} overlap the test range starting at {}",
                self.env.train_seeds(),
                self.env.level_seed_base + TEST_SEED_OFFSET
            ));
        }
        if self.env.horizon == 0 {
            return cfg_err("env.horizon must be positive".into());
        }
        if self.eval.episodes_per_level == 0 || self.eval.n_bootstrap == 0 {
            return cfg_err("eval.episodes_per_level and eval.n_bootstrap must be positive".into());
        }
        // Level generation validates the dimensions.
        generate_level(self.env.level_seed_base, self.env.kind, self.env.width, self.env.height)?;
        self.knn.validate()?;
        self.ppo.validate(self.policy.recurrent.is_some())?;
        let e = &self.ensemble;
        if e.m == 0 || e.k == 0 || e.k > e.m + 1 {
            return cfg_err(format!("ensemble needs m >= 1 and 1 <= k <= m + 1, got m={} k={}", e.m, e.k));
        }
        if !(e.alpha > 0.0 && e.alpha <= 1.0) {
            return cfg_err(format!("ensemble.alpha must lie in (0, 1], got {}", e.alpha));
        }
        let mut member_ppo = self.ppo.clone();
        member_ppo.total_steps = e.total_steps.unwrap_or(member_ppo.total_steps);
        member_ppo.validate(false)?;
        match self.kind {
            ExperimentKind::KnnSweep if self.sweep.knn_k.is_empty() || self.sweep.knn_k.contains(&0) => {
                return cfg_err("sweep.knn_k must be a non-empty list of positive values".into());
            }
            ExperimentKind::AblationMixedReward
                if self.sweep.mixed_beta.is_empty()
                    || self.sweep.mixed_beta.iter().any(|b| !(0.0..=1.0).contains(b)) =>
            {
                return cfg_err("sweep.mixed_beta must be a non-empty list within [0, 1]".into());
            }
            ExperimentKind::HiddenMaze if self.env.mode() != ObsMode::Hidden => {
                return cfg_err("hidden-maze experiments need hidden observations".into());
            }
            ExperimentKind::MemoryAblation if self.policy.recurrent.is_none() => {
                return cfg_err("memory-ablation needs policy.recurrent set".into());
            }
            _ => {}
        }
        if let Some(b) = &self.checkpoints.bundle {
            if !b.exists() {
                return cfg_err(format!("missing checkpoint bundle {}", b.display()));
            }
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> std::ops::Range<u64> {
        self.seed..self.seed + self.n_runs
    }

    fn member_ppo(&self) -> PpoConfig {
        let mut p = self.ppo.clone();
        p.total_steps = self.ensemble.total_steps.unwrap_or(p.total_steps);
        p
    }
}

/// Sets `a.b.c = value` inside a TOML document. The value is parsed as TOML
/// and falls back to a bare string.
pub fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` does not name a table path")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not name a table path")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Independent stream `stream` of a seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_MAXENT: u64 = 1;
const STREAM_EXTRINSIC: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_MEMBER: u64 = 100;

/// Levels and settings shared by every run of one experiment.
pub struct Workspace<'a> {
    pub cfg: &'a ExperimentConfig,
    pub train_levels: Vec<Arc<LevelSpec>>,
    pub test_levels: Vec<Arc<LevelSpec>>,
}

impl<'a> Workspace<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        Ok(Workspace {
            train_levels: cfg.env.levels(cfg.env.train_seeds())?,
            test_levels: cfg.env.levels(cfg.env.test_seeds(cfg.eval.n_test_levels))?,
            cfg,
        })
    }

    pub fn train_policy(
        &self,
        arch: Architecture,
        ppo: &PpoConfig,
        src: RewardSource,
        seed: u64,
    ) -> Result<TrainOutcome> {
        train(&TrainSpec {
            levels: &self.train_levels,
            eval_levels: &[],
            mode: self.cfg.env.mode(),
            horizon: self.cfg.env.horizon,
            cfg: ppo,
            src: &src,
            arch,
            seed,
            eval_every: 0,
        })
    }

    /// Exploration policy trained on the intrinsic reward.
    pub fn train_maxent(&self, run_seed: u64, knn: KnnConfig, policy: &PolicySettings) -> Result<TrainOutcome> {
        self.train_policy(
            policy.architecture(&self.cfg.env),
            &self.cfg.ppo,
            RewardSource::Intrinsic { knn },
            derive_seed(run_seed, STREAM_MAXENT),
        )
    }

    /// Extrinsic-reward policy with the exploration policy's settings.
    pub fn train_extrinsic(&self, run_seed: u64) -> Result<TrainOutcome> {
        self.train_policy(
            self.cfg.policy.architecture(&self.cfg.env),
            &self.cfg.ppo,
            RewardSource::Extrinsic,
            derive_seed(run_seed, STREAM_EXTRINSIC),
        )
    }

    /// Reward-seeking ensemble members, differing only in seed.
    pub fn train_members(&self, run_seed: u64) -> Result<Vec<TrainOutcome>> {
        let ppo = self.cfg.member_ppo();
        (0..self.cfg.ensemble.m as u64)
            .map(|i| {
                self.train_policy(
                    self.cfg.ensemble.architecture(&self.cfg.env),
                    &ppo,
                    RewardSource::Extrinsic,
                    derive_seed(run_seed, STREAM_MEMBER + i),
                )
            })
            .collect()
    }

    pub fn levels(&self, split: Split) -> &[Arc<LevelSpec>] {
        match split {
            Split::Train => &self.train_levels,
            Split::Test => &self.test_levels,
        }
    }

    fn eval_rng(run_seed: u64, policy_id: &str, split: Split) -> ChaCha8Rng {
        // Each (policy, split) pair gets its own stream so adding a policy
        // does not perturb the others.
        let tag = policy_id
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, STREAM_EVAL) ^ tag);
        rng.set_stream(split as u64);
        rng
    }

    pub fn evaluate_params(
        &self,
        params: &PolicyParams,
        policy_id: &str,
        run_seed: u64,
        split: Split,
    ) -> Result<Vec<EpisodeStats>> {
        let mut rng = Self::eval_rng(run_seed, policy_id, split);
        evaluate_policy(
            params,
            self.levels(split),
            self.cfg.env.mode(),
            self.cfg.env.horizon,
            Some(&self.cfg.knn),
            self.cfg.eval.episodes_per_level,
            self.cfg.eval.greedy,
            &mut rng,
        )
    }

    pub fn evaluate_random(&self, run_seed: u64, split: Split) -> Result<Vec<EpisodeStats>> {
        let mut rng = Self::eval_rng(run_seed, "random", split);
        evaluate_random(
            self.levels(split),
            self.cfg.env.mode(),
            self.cfg.env.horizon,
            Some(&self.cfg.knn),
            self.cfg.eval.episodes_per_level,
            &mut rng,
        )
    }

    pub fn evaluate_bundle(
        &self,
        bundle: &EnsembleBundle,
        policy_id: &str,
        run_seed: u64,
        split: Split,
    ) -> Result<Vec<EpisodeStats>> {
        let mut rng = Self::eval_rng(run_seed, policy_id, split);
        let mut out = Vec::new();
        for level in self.levels(split) {
            for _ in 0..self.cfg.eval.episodes_per_level {
                let r = run_episode(
                    bundle,
                    level.clone(),
                    self.cfg.env.mode(),
                    self.cfg.env.horizon,
                    Some(&self.cfg.knn),
                    &mut rng,
                )?;
                out.push(r.stats);
            }
        }
        Ok(out)
    }
}

/// Collects the per-level rows of one run.
pub struct RunScores {
    pub kind: LevelKind,
    pub run_seed: u64,
    pub table: ScoreTable,
    pub episodes: Vec<EpisodeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub policy_id: String,
    pub split: Split,
    pub level_seed: u64,
    pub extrinsic_return: f64,
    pub intrinsic_return: f64,
    pub success: bool,
    pub length: usize,
    pub distinct_cells: usize,
}

impl RunScores {
    pub fn new(kind: LevelKind, run_seed: u64) -> Self {
        RunScores {
            kind,
            run_seed,
            table: ScoreTable::new(),
            episodes: Vec::new(),
        }
    }

    /// Adds per-level mean extrinsic returns under `policy_id`, and mean
    /// intrinsic returns under `policy_id/intrinsic` when requested.
    pub fn add(&mut self, policy_id: &str, split: Split, eps: &[EpisodeStats], intrinsic: bool) -> Result<()> {
        self.add_column(policy_id, split, eps, |e| e.extrinsic_return)?;
        if intrinsic {
            self.add_column(&format!("{policy_id}{INTRINSIC_SUFFIX}"), split, eps, |e| e.intrinsic_return)?;
        }
        self.episodes.extend(eps.iter().map(|e| EpisodeRow {
            policy_id: policy_id.to_string(),
            split,
            level_seed: e.level_seed,
            extrinsic_return: e.extrinsic_return,
            intrinsic_return: e.intrinsic_return,
            success: e.success,
            length: e.length,
            distinct_cells: e.distinct_cells,
        }));
        Ok(())
    }

    fn add_column(&mut self, policy_id: &str, split: Split, eps: &[EpisodeStats], f: impl Fn(&EpisodeStats) -> f64) -> Result<()> {
        let mut per_level: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for e in eps {
            let s = per_level.entry(e.level_seed).or_insert((0.0, 0));
            s.0 += f(e);
            s.1 += 1;
        }
        for (level_seed, (sum, n)) in per_level {
            self.table.push(ScoreRow {
                env_kind: self.kind,
                level_seed,
                policy_id: policy_id.to_string(),
                run_seed: self.run_seed,
                ret: sum / n as f64,
                split,
            })?;
        }
        Ok(())
    }
}

fn write_csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn save_outcome(dir: &Path, name: &str, out: &TrainOutcome) -> Result<()> {
    save_checkpoint(&dir.join(format!("{name}.ckpt")), &out.params, Some(&out.optimizer))?;
    let path = dir.join(format!("curve-{name}.csv"));
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_curve_csv(f, &out.curve)
}

fn run_dir(root: &Path, run_seed: u64) -> PathBuf {
    root.join("runs").join(format!("run-{run_seed}"))
}

/// Evaluates `params` on both splits.
fn eval_both(ws: &Workspace<'_>, scores: &mut RunScores, params: &PolicyParams, id: &str, intrinsic: bool) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        let eps = ws.evaluate_params(params, id, scores.run_seed, split)?;
        scores.add(id, split, &eps, intrinsic)?;
    }
    Ok(())
}

fn eval_bundle_both(ws: &Workspace<'_>, scores: &mut RunScores, bundle: &EnsembleBundle, id: &str) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        let eps = ws.evaluate_bundle(bundle, id, scores.run_seed, split)?;
        scores.add(id, split, &eps, false)?;
    }
    Ok(())
}

fn fallback_id(f: Fallback) -> &'static str {
    match f {
        Fallback::MaxEnt => "expgen",
        Fallback::Random => "ensemble-random",
    }
}

/// Writes member checkpoints and a bundle manifest; returns the bundle.
fn build_bundle(
    ws: &Workspace<'_>,
    dir: &Path,
    run_seed: u64,
    maxent: Option<&TrainOutcome>,
) -> Result<(EnsembleBundle, Vec<PolicyParams>)> {
    let e = &ws.cfg.ensemble;
    let members = ws.train_members(run_seed)?;
    let mut paths = Vec::new();
    for (i, m) in members.iter().enumerate() {
        let name = format!("member-{i}");
        save_outcome(dir, &name, m)?;
        paths.push(PathBuf::from(format!("{name}.ckpt")));
    }
    if let Some(me) = maxent {
        save_outcome(dir, "maxent", me)?;
    }
    let fallback = if maxent.is_some() { e.fallback } else { Fallback::Random };
    BundleManifest {
        consensus_k: e.k,
        alpha: e.alpha,
        fallback,
        members: paths,
        maxent: maxent.map(|_| PathBuf::from("maxent.ckpt")),
    }
    .save(&dir.join("bundle.toml"))?;
    let params: Vec<PolicyParams> = members.into_iter().map(|m| m.params).collect();
    let bundle = EnsembleBundle::new(params.clone(), maxent.map(|m| m.params.clone()), e.k, e.alpha, fallback)?;
    Ok((bundle, params))
}

fn run_one(ws: &Workspace<'_>, root: &Path, run_seed: u64) -> Result<RunScores> {
    let cfg = ws.cfg;
    let dir = run_dir(root, run_seed);
    create_dir(&dir)?;
    let mut scores = RunScores::new(cfg.env.kind, run_seed);
    for split in [Split::Train, Split::Test] {
        let eps = ws.evaluate_random(run_seed, split)?;
        scores.add("random", split, &eps, true)?;
    }
    match cfg.kind {
        ExperimentKind::TrainMaxent => {
            let out = ws.train_maxent(run_seed, cfg.knn, &cfg.policy)?;
            save_outcome(&dir, "maxent", &out)?;
            eval_both(ws, &mut scores, &out.params, "maxent", true)?;
            if cfg.compare_extrinsic {
                let ext = ws.train_extrinsic(run_seed)?;
                save_outcome(&dir, "extrinsic", &ext)?;
                eval_both(ws, &mut scores, &ext.params, "extrinsic", true)?;
            }
        }
        ExperimentKind::TrainEnsemble => {
            let (bundle, members) = build_bundle(ws, &dir, run_seed, None)?;
            for (i, p) in members.iter().enumerate() {
                eval_both(ws, &mut scores, p, &format!("member-{i}"), false)?;
            }
            eval_bundle_both(ws, &mut scores, &bundle, "ensemble-random")?;
        }
        ExperimentKind::EvalExpgen | ExperimentKind::AblationRandomFallback => {
            let (bundle, members) = match &cfg.checkpoints.bundle {
                Some(path) => {
                    let manifest = BundleManifest::load(path)?;
                    let base = path.parent().unwrap_or(Path::new("."));
                    let mut b = manifest.load_bundle(base)?;
                    b.fallback = cfg.ensemble.fallback;
                    b.alpha = cfg.ensemble.alpha;
                    b.consensus_k = cfg.ensemble.k;
                    b.validate()?;
                    let members = b.reward_policies.clone();
                    (b, members)
                }
                None => {
                    let maxent = ws.train_maxent(run_seed, cfg.knn, &cfg.policy)?;
                    build_bundle(ws, &dir, run_seed, Some(&maxent))?
                }
            };
            if cfg.kind == ExperimentKind::EvalExpgen {
                eval_bundle_both(ws, &mut scores, &bundle, fallback_id(bundle.fallback))?;
            } else {
                for fb in [Fallback::MaxEnt, Fallback::Random] {
                    let mut b = bundle.clone();
                    b.fallback = fb;
                    b.validate()?;
                    eval_bundle_both(ws, &mut scores, &b, fallback_id(fb))?;
                }
                eval_both(ws, &mut scores, &members[0], "ppo", false)?;
            }
        }
        ExperimentKind::AblationMixedReward => {
            for &beta in &cfg.sweep.mixed_beta {
                let id = format!("mixed-{beta}");
                let out = ws.train_policy(
                    cfg.policy.architecture(&cfg.env),
                    &cfg.ppo,
                    RewardSource::Mixed { beta, knn: cfg.knn },
                    derive_seed(run_seed, STREAM_MAXENT),
                )?;
                save_outcome(&dir, &id, &out)?;
                eval_both(ws, &mut scores, &out.params, &id, true)?;
            }
        }
        ExperimentKind::HiddenMaze => {
            let out = ws.train_extrinsic(run_seed)?;
            save_outcome(&dir, "extrinsic", &out)?;
            eval_both(ws, &mut scores, &out.params, "extrinsic", false)?;
        }
        ExperimentKind::KnnSweep => {
            for &k in &cfg.sweep.knn_k {
                let id = format!("maxent-k{k}");
                let knn = KnnConfig { k, ..cfg.knn };
                let out = ws.train_maxent(run_seed, knn, &cfg.policy)?;
                save_outcome(&dir, &id, &out)?;
                eval_both(ws, &mut scores, &out.params, &id, true)?;
            }
        }
        ExperimentKind::MemoryAblation => {
            for (id, recurrent) in [("maxent-recurrent", cfg.policy.recurrent), ("maxent-feedforward", None)] {
                let settings = PolicySettings {
                    recurrent,
                    ..cfg.policy.clone()
                };
                let out = ws.train_maxent(run_seed, cfg.knn, &settings)?;
                save_outcome(&dir, id, &out)?;
                eval_both(ws, &mut scores, &out.params, id, true)?;
            }
        }
    }
    let path = dir.join("scores.csv");
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    scores.table.write_csv(f)?;
    write_csv_file(&dir.join("episodes.csv"), &scores.episodes)?;
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub run_seeds: Vec<u64>,
    pub train_level_seeds: [u64; 2],
    pub test_level_seeds: [u64; 2],
    pub files: Vec<String>,
}

/// Runs every configured run into `dir` and exports the report. Output is a
/// deterministic function of the config.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    create_dir(dir)?;
    let snapshot = dir.join("config.toml");
    fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
    let ws = Workspace::new(cfg)?;
    for run_seed in cfg.run_seeds() {
        log::info!("{}: run {run_seed}", cfg.kind.name());
        run_one(&ws, dir, run_seed)?;
    }
    let report = export_report(
        dir,
        &ReportOptions {
            n_bootstrap: cfg.eval.n_bootstrap,
            seed: cfg.seed,
        },
    )?;
    let train = cfg.env.train_seeds();
    let test = cfg.env.test_seeds(cfg.eval.n_test_levels);
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.push("manifest.json".into());
    files.sort();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        kind: cfg.kind,
        seed: cfg.seed,
        run_seeds: cfg.run_seeds().collect(),
        train_level_seeds: [train.start, train.end],
        test_level_seeds: [test.start, test.end],
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub n_bootstrap: usize,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            n_bootstrap: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    /// Mean over runs of each run's mean return.
    pub mean: f64,
    /// Sample standard deviation over runs (0 for one run).
    pub std: f64,
    pub n_runs: usize,
    /// Fraction of levels solved; only meaningful for extrinsic returns.
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy_id: String,
    pub train: Option<SplitSummary>,
    pub test: Option<SplitSummary>,
    /// `(train - test) / train` of the split means; absent when undefined.
    pub gap: Option<f64>,
    /// Per-run gaps, keyed by run seed.
    pub run_gaps: BTreeMap<u64, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub policies: Vec<PolicySummary>,
    /// Normalized test-split aggregates of extrinsic returns; absent with
    /// fewer than two runs.
    pub aggregates: Option<AggregateReport>,
}

impl ExperimentReport {
    pub fn policy(&self, id: &str) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.policy_id == id)
    }
}

fn split_summary(table: &ScoreTable, policy_id: &str, split: Split) -> Option<(SplitSummary, BTreeMap<u64, f64>)> {
    let mut per_run: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in table.rows().iter().filter(|r| r.policy_id == policy_id && r.split == split) {
        let e = per_run.entry(r.run_seed).or_insert((0.0, 0));
        e.0 += r.ret;
        e.1 += 1;
    }
    if per_run.is_empty() {
        return None;
    }
    let means: BTreeMap<u64, f64> = per_run.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let xs: Vec<f64> = means.values().copied().collect();
    let mean = crate::metrics::mean(&xs);
    let std = if xs.len() > 1 { crate::metrics::sample_std(&xs) } else { 0.0 };
    Some((
        SplitSummary {
            mean,
            std,
            n_runs: xs.len(),
            success: mean / GOAL_REWARD,
        },
        means,
    ))
}

/// Per-policy split means, gaps and (with two or more runs) bootstrap
/// aggregates of a score table.
pub fn summarize(table: &ScoreTable, opts: &ReportOptions) -> Result<(ExperimentReport, Option<crate::metrics::BootstrapDraws>)> {
    if table.is_empty() {
        return Err(Error::NoData("no score rows".into()));
    }
    let mut policies = Vec::new();
    for id in table.policies() {
        let train = split_summary(table, &id, Split::Train);
        let test = split_summary(table, &id, Split::Test);
        let gap = match (&train, &test) {
            (Some((a, _)), Some((b, _))) => crate::metrics::generalization_gap(a.mean, b.mean).ok(),
            _ => None,
        };
        let run_gaps = match (&train, &test) {
            (Some((_, a)), Some((_, b))) => a
                .iter()
                .filter_map(|(seed, tr)| {
                    let te = b.get(seed)?;
                    crate::metrics::generalization_gap(*tr, *te).ok().map(|g| (*seed, g))
                })
                .collect(),
            _ => BTreeMap::new(),
        };
        policies.push(PolicySummary {
            policy_id: id,
            train: train.map(|t| t.0),
            test: test.map(|t| t.0),
            gap,
            run_gaps,
        });
    }
    let mut extrinsic = ScoreTable::new();
    for r in table.rows().iter().filter(|r| !r.policy_id.ends_with(INTRINSIC_SUFFIX)) {
        extrinsic.push(r.clone())?;
    }
    let (aggregates, draws) = match aggregate_metrics(
        &extrinsic,
        &NormalizationConstants::default(),
        Split::Test,
        opts.n_bootstrap,
        opts.seed,
    ) {
        Ok((a, d)) => (Some(a), Some(d)),
        Err(Error::InsufficientSamples { .. }) => (None, None),
        Err(e) => return Err(e),
    };
    Ok((ExperimentReport { policies, aggregates }, draws))
}

/// Reads every `runs/*/scores.csv` under `dir`. Unreadable files are
/// reported together rather than skipped.
pub fn load_scores(dir: &Path) -> Result<ScoreTable> {
    let runs = dir.join("runs");
    let mut files = Vec::new();
    if runs.is_dir() {
        for entry in fs::read_dir(&runs).map_err(|e| Error::io(&runs, e))? {
            let p = entry.map_err(|e| Error::io(&runs, e))?.path().join("scores.csv");
            if p.is_file() {
                files.push(p);
            }
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::NoData(format!("no run score files under {}", dir.display())));
    }
    let mut table = ScoreTable::new();
    let mut corrupt = Vec::new();
    for f in files {
        let parsed = fs::File::open(&f)
            .map_err(|e| Error::io(&f, e))
            .and_then(ScoreTable::read_csv)
            .and_then(|t| if t.is_empty() { Err(Error::NoData("empty".into())) } else { Ok(t) });
        match parsed.and_then(|t| table.extend(t)) {
            Ok(()) => {}
            Err(_) => corrupt.push(f),
        }
    }
    if !corrupt.is_empty() {
        return Err(Error::CorruptRuns(corrupt));
    }
    Ok(table)
}

/// Merges run score tables and writes `scores.csv`, `summary.json`,
/// `report.csv`, `bootstrap.csv` and `summary.txt` into `dir`.
pub fn export_report(dir: &Path, opts: &ReportOptions) -> Result<ExperimentReport> {
    let table = load_scores(dir)?;
    let (report, draws) = summarize(&table, opts)?;
    let scores = dir.join("scores.csv");
    table.write_csv(fs::File::create(&scores).map_err(|e| Error::io(&scores, e))?)?;
    let json = dir.join("summary.json");
    fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json, e))?;

    #[derive(Serialize)]
    struct Row<'a> {
        policy_id: &'a str,
        split: Split,
        mean: f64,
        std: f64,
        n_runs: usize,
        gap: Option<f64>,
    }
    let mut rows = Vec::new();
    for p in &report.policies {
        for (split, s) in [(Split::Train, &p.train), (Split::Test, &p.test)] {
            if let Some(s) = s {
                rows.push(Row {
                    policy_id: &p.policy_id,
                    split,
                    mean: s.mean,
                    std: s.std,
                    n_runs: s.n_runs,
                    gap: p.gap,
                });
            }
        }
    }
    write_csv_file(&dir.join("report.csv"), &rows)?;
    if let Some(d) = &draws {
        let path = dir.join("bootstrap.csv");
        write_bootstrap_csv(fs::File::create(&path).map_err(|e| Error::io(&path, e))?, d)?;
    }
    let text = dir.join("summary.txt");
    fs::write(&text, render_summary(&report)).map_err(|e| Error::io(&text, e))?;
    Ok(report)
}

/// Fixed-width table of split means and gaps.
pub fn render_summary(report: &ExperimentReport) -> String {
    let fmt = |s: &Option<SplitSummary>| match s {
        Some(s) => format!("{:>8.3} ± {:<7.3}", s.mean, s.std),
        None => format!("{:>18}", "-"),
    };
    let mut out = format!("{:<28} {:>18} {:>18} {:>8}\n", "policy", "train", "test", "gap");
    for p in &report.policies {
        let gap = p.gap.map_or("-".to_string(), |g| format!("{:.1}%", 100.0 * g));
        out += &format!("{:<28} {} {} {:>8}\n", p.policy_id, fmt(&p.train), fmt(&p.test), gap);
    }
    if let Some(agg) = &report.aggregates {
        out += "\nnormalized test aggregates (95% bootstrap CI)\n";
        for p in &agg.policies {
            out += &format!("{}:", p.policy_id);
            for (m, e) in &p.metrics {
                out += &format!(" {m:?} {:.3} [{:.3}, {:.3}]", e.value, e.ci_low, e.ci_high);
            }
            out += "\n";
        }
    }
    out
}

/// Outcome of one directional check on a finished experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Standard error of the difference of two test-split means, pooling every
/// per-level return across runs.
pub fn pooled_standard_error(table: &ScoreTable, a: &str, b: &str) -> Option<f64> {
    let col = |id: &str| -> Vec<f64> {
        table
            .rows()
            .iter()
            .filter(|r| r.policy_id == id && r.split == Split::Test)
            .map(|r| r.ret)
            .collect()
    };
    let (xa, xb) = (col(a), col(b));
    if xa.len() < 2 || xb.len() < 2 {
        return None;
    }
    let var = |x: &[f64]| crate::metrics::sample_std(x).powi(2) / x.len() as f64;
    Some((var(&xa) + var(&xb)).sqrt())
}

/// Directional claims each experiment kind is expected to show.
pub fn directional_checks(kind: ExperimentKind, table: &ScoreTable, report: &ExperimentReport) -> Vec<Check> {
    let test_mean = |id: &str| report.policy(id).and_then(|p| p.test).map(|s| s.mean);
    let mut out = Vec::new();
    match kind {
        ExperimentKind::TrainMaxent => {
            let gap = report.policy(&format!("maxent{INTRINSIC_SUFFIX}")).and_then(|p| p.gap);
            out.push(Check {
                name: "maxent intrinsic gap below 15%".into(),
                passed: gap.is_some_and(|g| g < 0.15),
                detail: format!("gap {gap:?}"),
            });
            if let Some(ext) = report.policy("extrinsic").and_then(|p| p.gap) {
                out.push(Check {
                    name: "maxent gap below half the extrinsic gap".into(),
                    passed: gap.is_some_and(|g| g < 0.5 * ext),
                    detail: format!("maxent {gap:?} extrinsic {ext:.4}"),
                });
            }
        }
        ExperimentKind::AblationRandomFallback => {
            let (e, r, p) = (test_mean("expgen"), test_mean("ensemble-random"), test_mean("ppo"));
            let se = pooled_standard_error(table, "expgen", "ensemble-random");
            out.push(Check {
                name: "expgen beats random fallback by one pooled standard error".into(),
                passed: matches!((e, r, se), (Some(e), Some(r), Some(se)) if e - r > se),
                detail: format!("expgen {e:?} random-fallback {r:?} se {se:?}"),
            });
            out.push(Check {
                name: "random fallback beats single policy".into(),
                passed: matches!((r, p), (Some(r), Some(p)) if r > p),
                detail: format!("random-fallback {r:?} ppo {p:?}"),
            });
        }
        ExperimentKind::HiddenMaze => {
            let policy = report.policy("extrinsic");
            let train = policy.and_then(|p| p.train).map(|s| s.success);
            let test = policy.and_then(|p| p.test).map(|s| s.success);
            let random = report.policy("random").and_then(|p| p.test).map(|s| s.success);
            out.push(Check {
                name: "hidden-maze train success at least 70%".into(),
                passed: train.is_some_and(|t| t >= 0.7),
                detail: format!("train success {train:?}"),
            });
            out.push(Check {
                name: "hidden-maze test success within twice random".into(),
                passed: matches!((test, random), (Some(t), Some(r)) if t <= 2.0 * r),
                detail: format!("test success {test:?} random {random:?}"),
            });
        }
        _ => {}
    }
    out
}

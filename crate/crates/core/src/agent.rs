//! Test-time ExpGen controller: play the reward ensemble's consensus action
//! when enough members agree, otherwise hand control to the maximum-entropy
//! explorer for a geometrically distributed number of steps.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::entropy::KnnConfig;
use crate::env::{new_episode_with_horizon, Action, DoneReason, LevelSpec, ObsMode, Observation};
use crate::error::{Error, Result};
use crate::policy::{load_checkpoint, MemoryState, PolicyParams};
use crate::ppo::{EpisodeStats, EpisodeTracker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    MaxEnt,
    Random,
}

#[derive(Debug, Clone)]
pub struct EnsembleBundle {
    pub reward_policies: Vec<PolicyParams>,
    /// Required when `fallback` is `MaxEnt`.
    pub maxent_policy: Option<PolicyParams>,
    pub consensus_k: usize,
    pub alpha: f64,
    pub fallback: Fallback,
}

impl EnsembleBundle {
    pub fn new(
        reward_policies: Vec<PolicyParams>,
        maxent_policy: Option<PolicyParams>,
        consensus_k: usize,
        alpha: f64,
        fallback: Fallback,
    ) -> Result<Self> {
        let b = EnsembleBundle {
            reward_policies,
            maxent_policy,
            consensus_k,
            alpha,
            fallback,
        };
        b.validate()?;
        Ok(b)
    }

    /// Checks the bundle invariants. `consensus_k` may exceed the ensemble
    /// size by one, which disables consensus entirely.
    pub fn validate(&self) -> Result<()> {
        let m = self.reward_policies.len();
        if m == 0 {
            return Err(Error::Config("ensemble needs at least one reward policy".into()));
        }
        if self.consensus_k == 0 || self.consensus_k > m + 1 {
            return Err(Error::Config(format!(
                "consensus_k = {} outside [1, {}]",
                self.consensus_k,
                m + 1
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha = {} outside (0, 1]", self.alpha)));
        }
        if self.fallback == Fallback::MaxEnt && self.maxent_policy.is_none() {
            return Err(Error::Config("maxent fallback requires a maxent policy".into()));
        }
        let n_actions = self.reward_policies[0].arch.n_actions;
        let all = self.reward_policies.iter().chain(self.maxent_policy.as_ref());
        if all.clone().any(|p| p.arch.n_actions != n_actions) {
            return Err(Error::Config("all policies must share the action space".into()));
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        self.reward_policies[0].arch.n_actions
    }

    pub fn initial_memory(&self) -> MemoryState {
        match &self.maxent_policy {
            Some(p) => MemoryState::zeros(&p.arch),
            None => MemoryState { hidden: Vec::new() },
        }
    }
}

/// Counter of remaining exploration steps; zero at episode start.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SwitchState {
    pub counter: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Consensus,
    Explore,
}

/// Most frequent action if its count reaches `k`; ties go to the lowest id.
pub fn consensus_action(actions: &[usize], k: usize) -> Option<usize> {
    let n = actions.iter().copied().max()? + 1;
    let mut counts = vec![0usize; n];
    for &a in actions {
        counts[a] += 1;
    }
    let (best, &count) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (count >= k).then_some(best)
}

/// Geometric draw on {0, 1, 2, ...} with `P(n) = alpha (1 - alpha)^n`.
pub fn sample_switch_duration(alpha: f64, rng: &mut ChaCha8Rng) -> Result<u64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha = {alpha} outside (0, 1]")));
    }
    let g = Geometric::new(alpha).map_err(|e| Error::Config(format!("alpha = {alpha}: {e}")))?;
    Ok(g.sample(rng))
}

/// Counter update and branch choice given the (optional) consensus action.
pub fn switch_decision(
    consensus: Option<usize>,
    switch: &mut SwitchState,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Branch> {
    switch.counter -= 1;
    if consensus.is_some() && switch.counter < 0 {
        Ok(Branch::Consensus)
    } else {
        switch.counter = sample_switch_duration(alpha, rng)? as i64;
        Ok(Branch::Explore)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub action: usize,
    pub branch: Branch,
}

/// One ExpGen step. The maxEnt memory is advanced on every call, whichever
/// branch ends up acting.
pub fn expgen_act(
    bundle: &EnsembleBundle,
    obs: &Observation,
    switch: &mut SwitchState,
    maxent_memory: &mut MemoryState,
    rng: &mut ChaCha8Rng,
) -> Result<Decision> {
    let mut sampled = Vec::with_capacity(bundle.reward_policies.len());
    for p in &bundle.reward_policies {
        let (dist, _, _) = p.forward(&p.encode(obs), &MemoryState::zeros(&p.arch))?;
        sampled.push(dist.sample(rng));
    }
    let explore_dist = match &bundle.maxent_policy {
        Some(p) => {
            let (dist, _, next) = p.forward(&p.encode(obs), maxent_memory)?;
            *maxent_memory = next;
            Some(dist)
        }
        None => None,
    };
    let consensus = consensus_action(&sampled, bundle.consensus_k);
    let branch = switch_decision(consensus, switch, bundle.alpha, rng)?;
    let action = match branch {
        Branch::Consensus => consensus.expect("consensus branch has an action"),
        Branch::Explore => match (bundle.fallback, explore_dist) {
            (Fallback::MaxEnt, Some(d)) => d.sample(rng),
            _ => rng.random_range(0..bundle.n_actions()),
        },
    };
    Ok(Decision { action, branch })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub branch: Branch,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub stats: EpisodeStats,
    pub trace: Vec<TraceRow>,
}

impl EpisodeResult {
    pub fn explore_fraction(&self) -> f64 {
        if self.trace.is_empty() {
            return 0.0;
        }
        let n = self.trace.iter().filter(|r| r.branch == Branch::Explore).count();
        n as f64 / self.trace.len() as f64
    }
}

/// Plays one full episode under [`expgen_act`].
pub fn run_episode(
    bundle: &EnsembleBundle,
    level: Arc<LevelSpec>,
    mode: ObsMode,
    horizon: usize,
    knn: Option<&KnnConfig>,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeResult> {
    let seed = level.seed;
    let (mut state, mut obs) = new_episode_with_horizon(level, mode, horizon);
    let mut tracker = EpisodeTracker::new(knn.copied());
    tracker.begin(&state, &obs)?;
    let mut switch = SwitchState::default();
    let mut memory = bundle.initial_memory();
    let mut trace = Vec::new();
    loop {
        let d = expgen_act(bundle, &obs, &mut switch, &mut memory, rng)?;
        let action = Action::from_index(d.action)
            .ok_or_else(|| Error::Config(format!("policy produced action {}", d.action)))?;
        let out = state.step_mut(action)?;
        tracker.record(&state, &out.observation, out.extrinsic_reward)?;
        trace.push(TraceRow {
            step: trace.len(),
            branch: d.branch,
            action: d.action,
            reward: out.extrinsic_reward,
        });
        if out.done {
            return Ok(EpisodeResult {
                stats: tracker.finish(seed, out.done_reason == DoneReason::Goal),
                trace,
            });
        }
        obs = out.observation;
    }
}

pub fn write_trace_csv<W: std::io::Write>(w: W, trace: &[TraceRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in trace {
        wr.serialize(row)?;
    }
    wr.flush().map_err(|e| Error::io("trace.csv", e))?;
    Ok(())
}

/// On-disk description of a bundle; checkpoint paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub consensus_k: usize,
    pub alpha: f64,
    pub fallback: Fallback,
    pub members: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maxent: Option<PathBuf>,
}

impl BundleManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_bundle(&self, base: &Path) -> Result<EnsembleBundle> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let members = self
            .members
            .iter()
            .map(|p| load_checkpoint(&resolve(p)).map(|c| c.params))
            .collect::<Result<Vec<_>>>()?;
        let maxent = match &self.maxent {
            Some(p) => Some(load_checkpoint(&resolve(p))?.params),
            None => None,
        };
        EnsembleBundle::new(members, maxent, self.consensus_k, self.alpha, self.fallback)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_level;
    use crate::env::LevelKind;
    use crate::policy::{Architecture, ObsEncoding};
    use rand::SeedableRng;

    /// Feedforward policy that (almost surely) always picks `action`.
    pub(crate) fn fixed_policy(action: usize, recurrent: bool) -> PolicyParams {
        let arch = Architecture::new(ObsEncoding::Flat, 5, 5, vec![], recurrent.then_some(2), 5);
        let mut p = PolicyParams::zeros(arch);
        p.segment_mut("pi.b").unwrap()[action] = 60.0;
        p
    }

    fn uniform_policy() -> PolicyParams {
        PolicyParams::zeros(Architecture::new(ObsEncoding::Flat, 5, 5, vec![], None, 5))
    }

    #[test]
    fn consensus_examples() {
        assert_eq!(consensus_action(&[2, 2, 2, 2, 2, 2, 1, 0, 3, 1], 6), Some(2));
        assert_eq!(consensus_action(&[0, 0, 1, 1, 2, 2, 3, 3, 4, 4], 6), None);
        assert_eq!(consensus_action(&[1, 3, 1, 3, 1, 3, 3, 1], 2), Some(1));
        assert_eq!(consensus_action(&[], 1), None);
    }

    #[test]
    fn switch_duration_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| sample_switch_duration(1.0, &mut rng).unwrap() == 0));
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_switch_duration(0.5, &mut rng).unwrap() as f64)
            .sum::<f64>()
            / n as f64;
        // Variance of the geometric on {0,1,..} is (1-a)/a^2 = 2.
        let sigma = (2.0f64 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
        assert!(sample_switch_duration(0.0, &mut rng).is_err());
    }

    #[test]
    fn switch_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = SwitchState { counter: 0 };
        assert_eq!(switch_decision(Some(2), &mut s, 0.5, &mut rng).unwrap(), Branch::Consensus);
        assert_eq!(s.counter, -1);
        assert_eq!(switch_decision(Some(2), &mut s, 0.5, &mut rng).unwrap(), Branch::Consensus);
        assert_eq!(s.counter, -2);
        let mut s = SwitchState { counter: -5 };
        assert_eq!(switch_decision(None, &mut s, 0.5, &mut rng).unwrap(), Branch::Explore);
        assert!(s.counter >= 0);
        // Consensus available but counter hits exactly 0: strict test fails.
        let mut s = SwitchState { counter: 1 };
        assert_eq!(switch_decision(Some(0), &mut s, 0.5, &mut rng).unwrap(), Branch::Explore);
    }

    #[test]
    fn bundle_validation() {
        let m = || vec![uniform_policy(); 3];
        assert!(EnsembleBundle::new(m(), None, 2, 0.5, Fallback::Random).is_ok());
        assert!(EnsembleBundle::new(m(), None, 4, 0.5, Fallback::Random).is_ok());
        assert!(EnsembleBundle::new(m(), None, 5, 0.5, Fallback::Random).is_err());
        assert!(EnsembleBundle::new(m(), None, 0, 0.5, Fallback::Random).is_err());
        assert!(EnsembleBundle::new(m(), None, 2, 0.0, Fallback::Random).is_err());
        assert!(EnsembleBundle::new(m(), None, 2, 0.5, Fallback::MaxEnt).is_err());
        assert!(EnsembleBundle::new(vec![], None, 1, 0.5, Fallback::Random).is_err());
    }

    #[test]
    fn agreeing_members_act_in_consensus() {
        let level = Arc::new(generate_level(3, LevelKind::Maze, 5, 5).unwrap());
        let members = vec![fixed_policy(0, false); 10];
        let b = EnsembleBundle::new(members, Some(fixed_policy(1, true)), 6, 0.5, Fallback::MaxEnt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = run_episode(&b, level, ObsMode::Full, 40, None, &mut rng).unwrap();
        assert_eq!(r.trace.len(), 40);
        assert!(r.trace.iter().all(|t| t.branch == Branch::Consensus && t.action == 0));
    }

    #[test]
    fn impossible_consensus_always_explores() {
        let level = Arc::new(generate_level(3, LevelKind::Maze, 5, 5).unwrap());
        let members = vec![fixed_policy(0, false); 4];
        let b = EnsembleBundle::new(members, Some(fixed_policy(4, true)), 5, 0.5, Fallback::MaxEnt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = run_episode(&b, level, ObsMode::Full, 30, None, &mut rng).unwrap();
        assert_eq!(r.explore_fraction(), 1.0);
        // NoOp explorer still ends the episode at the horizon.
        assert!(r.trace.iter().all(|t| t.action == 4));
        assert_eq!(r.trace.len(), 30);
        assert!(!r.stats.success);
    }

    #[test]
    fn executed_action_is_never_a_minority_vote() {
        let level = Arc::new(generate_level(9, LevelKind::Maze, 5, 5).unwrap());
        // Members split 6:4 between actions 2 and 3; explorer plays 4.
        let mut members = vec![fixed_policy(2, false); 6];
        members.extend(vec![fixed_policy(3, false); 4]);
        let b = EnsembleBundle::new(members, Some(fixed_policy(4, true)), 6, 0.5, Fallback::MaxEnt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = run_episode(&b, level, ObsMode::Full, 200, None, &mut rng).unwrap();
        assert!(r.trace.iter().all(|t| t.action != 3));
        assert!(r.trace.iter().all(|t| (t.branch == Branch::Consensus) == (t.action == 2)));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p0 = dir.path().join("m0.ckpt");
        crate::policy::save_checkpoint(&p0, &fixed_policy(1, false), None).unwrap();
        let man = BundleManifest {
            consensus_k: 1,
            alpha: 0.5,
            fallback: Fallback::Random,
            members: vec![PathBuf::from("m0.ckpt")],
            maxent: None,
        };
        let mp = dir.path().join("bundle.toml");
        man.save(&mp).unwrap();
        let back = BundleManifest::load(&mp).unwrap();
        assert_eq!(back, man);
        let b = back.load_bundle(dir.path()).unwrap();
        assert_eq!(b.reward_policies[0], fixed_policy(1, false));
    }
}

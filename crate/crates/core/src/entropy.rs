//! Particle-based k-nearest-neighbour entropy estimation and the per-step
//! intrinsic reward derived from it.
//!
//! The reward for a state is `log(max(d_k, epsilon))` where `d_k` is the
//! distance to its k-th nearest neighbour among the earlier states of the same
//! episode. Observations are average-pooled before distances are taken.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::{Observation, N_CHANNELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    /// Number of coordinates that differ.
    L0,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    pub norm: Norm,
    pub epsilon: f64,
    pub pool_kernel: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: 2,
            norm: Norm::L2,
            epsilon: 1e-8,
            pool_kernel: 1,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("knn.k must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("knn.epsilon must be positive".into()));
        }
        if self.pool_kernel < 1 {
            return Err(Error::Config("knn.pool_kernel must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn distance(a: &[f64], b: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::L2 => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Norm::L0 => a.iter().zip(b).filter(|(x, y)| x != y).count() as f64,
    }
}

/// Non-overlapping average pooling of a `channels x height x width` grid with
/// stride equal to the kernel. Remainder rows and columns are dropped.
pub fn pool_grid(
    data: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
) -> Result<Vec<f64>> {
    if kernel == 0 || kernel > height || kernel > width {
        return Err(Error::InvalidKernel {
            kernel,
            height,
            width,
        });
    }
    if data.len() != channels * height * width {
        return Err(Error::Shape {
            expected: channels * height * width,
            actual: data.len(),
        });
    }
    if kernel == 1 {
        return Ok(data.to_vec());
    }
    let (oh, ow) = (height / kernel, width / kernel);
    let scale = 1.0 / (kernel * kernel) as f64;
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane = &data[c * height * width..(c + 1) * height * width];
        for by in 0..oh {
            for bx in 0..ow {
                let mut sum = 0.0;
                for y in by * kernel..(by + 1) * kernel {
                    let row = &plane[y * width + bx * kernel..y * width + (bx + 1) * kernel];
                    sum += row.iter().sum::<f64>();
                }
                out.push(sum * scale);
            }
        }
    }
    Ok(out)
}

pub fn downsample(observation: &Observation, kernel: usize) -> Result<Vec<f64>> {
    pool_grid(
        &observation.channels,
        N_CHANNELS,
        observation.height,
        observation.width,
        kernel,
    )
}

/// Downsampled states seen so far in the current episode, stored as distinct
/// states with visit counts (revisits are the common case in mazes).
#[derive(Debug, Clone, Default)]
pub struct EpisodeBuffer {
    unique: Vec<Vec<f64>>,
    counts: Vec<usize>,
    index: HashMap<Vec<u64>, usize>,
    len: usize,
}

impl EpisodeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, state: Vec<f64>) {
        let key: Vec<u64> = state.iter().map(|v| v.to_bits()).collect();
        match self.index.get(&key) {
            Some(&i) => self.counts[i] += 1,
            None => {
                self.index.insert(key, self.unique.len());
                self.unique.push(state);
                self.counts.push(1);
            }
        }
        self.len += 1;
    }

    pub fn clear(&mut self) {
        self.unique.clear();
        self.counts.clear();
        self.index.clear();
        self.len = 0;
    }

    /// Number of states pushed, counting repeats.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Distinct states with their multiplicities.
    pub fn distinct(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.unique.iter().map(Vec::as_slice).zip(self.counts.iter().copied())
    }
}

/// k-th smallest of `dists` (1-based), or the largest when fewer than `k` exist.
fn kth_smallest(dists: &mut [f64], k: usize) -> Option<f64> {
    if dists.is_empty() {
        return None;
    }
    let idx = k.min(dists.len()) - 1;
    let (_, kth, _) = dists.select_nth_unstable_by(idx, f64::total_cmp);
    Some(*kth)
}

/// Intrinsic reward of `current` against the episode's earlier states. The
/// caller appends `current` to the buffer afterwards.
pub fn knn_intrinsic_reward(buffer: &EpisodeBuffer, current: &[f64], cfg: &KnnConfig) -> Result<f64> {
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(buffer.unique.len());
    for (s, count) in buffer.distinct() {
        if s.len() != current.len() {
            return Err(Error::Shape {
                expected: s.len(),
                actual: current.len(),
            });
        }
        dists.push((distance(s, current, cfg.norm), count));
    }
    dists.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let k = cfg.k.max(1);
    let mut seen = 0;
    let mut d = dists.last().map_or(0.0, |x| x.0);
    for &(dist, count) in &dists {
        seen += count;
        if seen >= k {
            d = dist;
            break;
        }
    }
    Ok(d.max(cfg.epsilon).ln())
}

/// Trajectory entropy estimate: mean over states of the log distance to the
/// k-th nearest other state of the same trajectory.
pub fn episode_entropy_estimate(states: &[Vec<f64>], cfg: &KnnConfig) -> Result<f64> {
    let k = cfg.k.max(1);
    if states.len() < k + 1 {
        return Err(Error::InsufficientSamples {
            needed: k + 1,
            got: states.len(),
        });
    }
    let dim = states[0].len();
    if let Some(bad) = states.iter().find(|s| s.len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: bad.len(),
        });
    }
    let mut dists = Vec::with_capacity(states.len() - 1);
    let mut total = 0.0;
    for (i, s) in states.iter().enumerate() {
        dists.clear();
        dists.extend(
            states
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, o)| distance(s, o, cfg.norm)),
        );
        let d = kth_smallest(&mut dists, k).expect("at least k others");
        total += d.max(cfg.epsilon).ln();
    }
    Ok(total / states.len() as f64)
}

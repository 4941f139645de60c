//! Independent brute-force oracles shared by the integration suites.
#![allow(dead_code)]

use expgen::entropy::Norm;
use expgen::policy::{HeadGrad, PolicyParams, Sequence, StepOutput};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn oracle_distance(a: &[f64], b: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::L2 => {
            let mut s = 0.0;
            for i in 0..a.len() {
                let d = a[i] - b[i];
                s += d * d;
            }
            s.sqrt()
        }
        Norm::L0 => (0..a.len()).filter(|&i| a[i] != b[i]).count() as f64,
    }
}

/// Sorts every buffer distance and reads off the k-th (or the farthest when
/// the buffer is short).
pub fn oracle_reward(buffer: &[Vec<f64>], current: &[f64], k: usize, norm: Norm, eps: f64) -> f64 {
    let mut d: Vec<f64> = buffer.iter().map(|s| oracle_distance(s, current, norm)).collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let dk = if d.is_empty() {
        0.0
    } else if d.len() >= k {
        d[k - 1]
    } else {
        d[d.len() - 1]
    };
    dk.max(eps).ln()
}

pub fn oracle_entropy(states: &[Vec<f64>], k: usize, norm: Norm, eps: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..states.len() {
        let mut d: Vec<f64> = (0..states.len())
            .filter(|&j| j != i)
            .map(|j| oracle_distance(&states[i], &states[j], norm))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        total += d[k - 1].max(eps).ln();
    }
    total / states.len() as f64
}

/// A random estimator case: `(states, current, k, norm, epsilon)`. L0 cases
/// draw from a small alphabet so duplicates and ties are common; L2 cases
/// copy earlier states now and then.
pub fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>, usize, Norm, f64) {
    let norm = if rng.random_bool(0.5) { Norm::L2 } else { Norm::L0 };
    let dim = rng.random_range(1..=32);
    let n = rng.random_range(0..=64);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim)
            .map(|_| match norm {
                Norm::L2 => rng.random_range(-1.0..1.0),
                Norm::L0 => rng.random_range(0..3) as f64,
            })
            .collect()
    };
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        if !states.is_empty() && rng.random_bool(0.2) {
            let j = rng.random_range(0..states.len());
            states.push(states[j].clone());
        } else {
            states.push(draw(rng));
        }
    }
    let current = if !states.is_empty() && rng.random_bool(0.2) {
        states[rng.random_range(0..states.len())].clone()
    } else {
        draw(rng)
    };
    let k = rng.random_range(1..=8);
    let eps = if rng.random_bool(0.5) { 1e-8 } else { 1.0 };
    (states, current, k, norm, eps)
}

/// Smooth synthetic loss per step: `-sum_a c_a log p_a + (v - target)^2`.
pub struct SyntheticLoss {
    /// Indexed by `[sequence][step]`.
    pub coef: Vec<Vec<(Vec<f64>, f64)>>,
}

impl SyntheticLoss {
    pub fn random(lens: &[usize], n_actions: usize, rng: &mut ChaCha8Rng) -> Self {
        SyntheticLoss {
            coef: lens
                .iter()
                .map(|&n| {
                    (0..n)
                        .map(|_| {
                            let c = (0..n_actions).map(|_| rng.random_range(0.0..1.0)).collect();
                            (c, rng.random_range(-1.0..1.0))
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn head(&self, si: usize, t: usize, out: &StepOutput<'_>) -> HeadGrad {
        let (c, target) = &self.coef[si][t];
        let csum: f64 = c.iter().sum();
        let loss = -c.iter().zip(out.probs).map(|(c, p)| c * p.ln()).sum::<f64>() + (out.value - target).powi(2);
        HeadGrad {
            loss,
            dlogits: c.iter().zip(out.probs).map(|(c, p)| p * csum - c).collect(),
            dvalue: 2.0 * (out.value - target),
        }
    }
}

/// Largest per-coordinate relative error between the analytic gradient and
/// central differences with step `h`. Coordinates whose gradients are both
/// below `floor` in magnitude are compared against `floor`.
pub fn gradient_check(
    params: &PolicyParams,
    seqs: &[Sequence<'_>],
    loss: &SyntheticLoss,
    h: f64,
    floor: f64,
) -> (f64, usize) {
    let mut head = |si: usize, t: usize, o: &StepOutput<'_>| loss.head(si, t, o);
    let (_, g) = params.loss_and_gradient(seqs, &mut head, 0.0).unwrap();
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..p.weights.len() {
        let w = p.weights[i];
        p.weights[i] = w + h;
        let up = p.loss_and_gradient(seqs, &mut head, 0.0).unwrap().0;
        p.weights[i] = w - h;
        let down = p.loss_and_gradient(seqs, &mut head, 0.0).unwrap().0;
        p.weights[i] = w;
        let fd = (up - down) / (2.0 * h);
        let a = g.values[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        worst = worst.max(rel);
    }
    (worst, p.weights.len())
}

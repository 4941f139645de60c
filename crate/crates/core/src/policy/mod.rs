//! Small actor-critic networks with hand-written reverse-mode gradients.
//!
//! Layout: encoded observation -> dense tanh trunk -> optional gated recurrent
//! cell -> categorical policy head and scalar value head. All weights live in
//! one flat vector; [`Architecture::segments`] names the slices.

mod adam;
mod checkpoint;

pub use adam::{optimizer_step, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{Observation, CH_AGENT, CH_WALLS, N_CHANNELS};
use crate::error::{Error, Result};

/// How an [`Observation`] is turned into the network input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ObsEncoding {
    /// Every channel flattened in row-major order.
    Flat,
    /// A `(2r+1)^2` window of the non-agent channels centred on the agent.
    /// Off-grid cells read as wall. Optionally followed by the absolute agent
    /// channel.
    Egocentric { radius: usize, include_position: bool },
}

impl ObsEncoding {
    pub fn input_dim(&self, width: usize, height: usize) -> usize {
        match *self {
            ObsEncoding::Flat => N_CHANNELS * width * height,
            ObsEncoding::Egocentric {
                radius,
                include_position,
            } => {
                let side = 2 * radius + 1;
                (N_CHANNELS - 1) * side * side + if include_position { width * height } else { 0 }
            }
        }
    }

    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        match *self {
            ObsEncoding::Flat => obs.channels.clone(),
            ObsEncoding::Egocentric {
                radius,
                include_position,
            } => {
                let (w, h) = (obs.width as isize, obs.height as isize);
                let r = radius as isize;
                let side = 2 * radius + 1;
                let mut out = Vec::with_capacity(self.input_dim(obs.width, obs.height));
                let agent = obs
                    .agent_cell()
                    .map_or((0, 0), |c| (c.x as isize, c.y as isize));
                for c in (0..N_CHANNELS).filter(|&c| c != CH_AGENT) {
                    let plane = obs.channel(c);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (x, y) = (agent.0 + dx, agent.1 + dy);
                            let v = if x < 0 || y < 0 || x >= w || y >= h {
                                if c == CH_WALLS && obs.mode == crate::env::ObsMode::Full {
                                    1.0
                                } else {
                                    0.0
                                }
                            } else {
                                plane[(y * w + x) as usize]
                            };
                            out.push(v);
                        }
                    }
                }
                debug_assert_eq!(out.len(), (N_CHANNELS - 1) * side * side);
                if include_position {
                    out.extend_from_slice(obs.channel(CH_AGENT));
                }
                out
            }
        }
    }
}

/// Network shape descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoding: ObsEncoding,
    pub grid_width: usize,
    pub grid_height: usize,
    pub hidden: Vec<usize>,
    /// Width of the gated recurrent cell, if any.
    pub recurrent: Option<usize>,
    pub n_actions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

#[derive(Debug, Clone, Copy)]
struct Gru {
    wx: usize,
    wh: usize,
    bx: usize,
    bh: usize,
    inp: usize,
    width: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    trunk: Vec<Dense>,
    gru: Option<Gru>,
    pi: Dense,
    v: Dense,
    total: usize,
}

impl Architecture {
    pub fn new(
        encoding: ObsEncoding,
        grid_width: usize,
        grid_height: usize,
        hidden: Vec<usize>,
        recurrent: Option<usize>,
        n_actions: usize,
    ) -> Self {
        Architecture {
            encoding,
            grid_width,
            grid_height,
            hidden,
            recurrent,
            n_actions,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoding.input_dim(self.grid_width, self.grid_height)
    }

    pub fn is_recurrent(&self) -> bool {
        self.recurrent.is_some()
    }

    pub fn memory_dim(&self) -> usize {
        self.recurrent.unwrap_or(0)
    }

    fn feature_dim(&self) -> usize {
        self.recurrent
            .or_else(|| self.hidden.last().copied())
            .unwrap_or_else(|| self.input_dim())
    }

    fn layout(&self) -> Layout {
        let mut off = 0;
        let mut dense = |inp: usize, out: usize| {
            let d = Dense {
                w: off,
                b: off + inp * out,
                inp,
                out,
            };
            off += inp * out + out;
            d
        };
        let mut prev = self.input_dim();
        let mut trunk = Vec::new();
        for &h in &self.hidden {
            trunk.push(dense(prev, h));
            prev = h;
        }
        let gru = self.recurrent.map(|width| {
            let g = Gru {
                wx: off,
                wh: off + prev * 3 * width,
                bx: off + prev * 3 * width + width * 3 * width,
                bh: off + prev * 3 * width + width * 3 * width + 3 * width,
                inp: prev,
                width,
            };
            off = g.bh + 3 * width;
            g
        });
        let feat = self.feature_dim();
        let mut dense = |inp: usize, out: usize| {
            let d = Dense {
                w: off,
                b: off + inp * out,
                inp,
                out,
            };
            off += inp * out + out;
            d
        };
        let pi = dense(feat, self.n_actions);
        let v = dense(feat, 1);
        Layout {
            trunk,
            gru,
            pi,
            v,
            total: off,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub fn segments(&self) -> Vec<Segment> {
        let l = self.layout();
        let mut out = Vec::new();
        let mut push = |name: String, offset: usize, len: usize| out.push(Segment { name, offset, len });
        for (i, d) in l.trunk.iter().enumerate() {
            push(format!("dense{i}.w"), d.w, d.inp * d.out);
            push(format!("dense{i}.b"), d.b, d.out);
        }
        if let Some(g) = l.gru {
            push("gru.wx".into(), g.wx, g.inp * 3 * g.width);
            push("gru.wh".into(), g.wh, g.width * 3 * g.width);
            push("gru.bx".into(), g.bx, 3 * g.width);
            push("gru.bh".into(), g.bh, 3 * g.width);
        }
        push("pi.w".into(), l.pi.w, l.pi.inp * l.pi.out);
        push("pi.b".into(), l.pi.b, l.pi.out);
        push("v.w".into(), l.v.w, l.v.inp);
        push("v.b".into(), l.v.b, 1);
        out
    }
}

/// Architecture plus its flat weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: Architecture,
    pub weights: Vec<f64>,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.total == other.total
    }
}

/// Recurrent hidden activations; empty for feedforward policies.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub hidden: Vec<f64>,
}

impl MemoryState {
    pub fn zeros(arch: &Architecture) -> Self {
        MemoryState {
            hidden: vec![0.0; arch.memory_dim()],
        }
    }

    pub fn reset(&mut self) {
        self.hidden.iter_mut().for_each(|h| *h = 0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        ActionDistribution {
            probs: softmax(logits),
        }
    }

    pub fn uniform(n: usize) -> Self {
        ActionDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // Rounding left u above the cumulative sum; take the last non-zero entry.
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.probs[action].max(f64::MIN_POSITIVE).ln()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    pub fn total_variation(&self, other: &ActionDistribution) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y = b + x W` with `W` stored input-major; zero inputs are skipped.
fn dense_forward(weights: &[f64], d: Dense, x: &[f64], y: &mut Vec<f64>) {
    y.clear();
    y.extend_from_slice(&weights[d.b..d.b + d.out]);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &weights[d.w + i * d.out..d.w + (i + 1) * d.out];
        for (yo, &wo) in y.iter_mut().zip(row) {
            *yo += xi * wo;
        }
    }
}

/// Accumulates weight/bias gradients; writes `dx` when requested.
fn dense_backward(
    weights: &[f64],
    grads: &mut [f64],
    d: Dense,
    x: &[f64],
    dy: &[f64],
    dx: Option<&mut Vec<f64>>,
) {
    for (g, &v) in grads[d.b..d.b + d.out].iter_mut().zip(dy) {
        *g += v;
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut grads[d.w + i * d.out..d.w + (i + 1) * d.out];
        for (g, &v) in row.iter_mut().zip(dy) {
            *g += xi * v;
        }
    }
    if let Some(dx) = dx {
        dx.clear();
        dx.extend((0..d.inp).map(|i| {
            let row = &weights[d.w + i * d.out..d.w + (i + 1) * d.out];
            row.iter().zip(dy).map(|(w, g)| w * g).sum::<f64>()
        }));
    }
}

#[derive(Debug, Clone, Default)]
struct GruCache {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    /// Recurrent pre-activation of the candidate, `Wh_n h + bh_n`.
    gh_n: Vec<f64>,
}

/// Everything needed to backpropagate one forward step.
#[derive(Debug, Clone, Default)]
struct StepCache {
    /// Post-activation outputs of the trunk layers.
    acts: Vec<Vec<f64>>,
    gru: Option<GruCache>,
    logits: Vec<f64>,
    value: f64,
}

impl StepCache {
    fn feature<'a>(&'a self, input: &'a [f64], h_next: Option<&'a [f64]>) -> &'a [f64] {
        match h_next {
            Some(h) => h,
            None => self.acts.last().map_or(input, |a| a.as_slice()),
        }
    }
}

/// Head outputs for one step as seen by a loss.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput<'a> {
    pub logits: &'a [f64],
    pub probs: &'a [f64],
    pub value: f64,
}

/// Per-step loss value and its gradient with respect to the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub loss: f64,
    pub dlogits: Vec<f64>,
    pub dvalue: f64,
}

/// One contiguous stretch of steps for backpropagation through time.
#[derive(Debug, Clone)]
pub struct Sequence<'a> {
    pub initial_memory: &'a [f64],
    pub inputs: Vec<&'a [f64]>,
    /// `resets[t]` zeroes the memory before step `t` (an episode starts there).
    pub resets: Vec<bool>,
}

/// Gradient vector shaped like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub values: Vec<f64>,
}

impl GradientSet {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|g| *g *= s);
    }

    /// Rescales to at most `max_norm`; returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }
}

fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Orthonormalise the shorter dimension's vectors with modified Gram-Schmidt.
    let (n_vec, dim) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
    while vecs.len() < n_vec {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for u in &vecs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain
                * if rows >= cols {
                    vecs[c][r]
                } else {
                    vecs[r][c]
                };
        }
    }
    out
}

impl PolicyParams {
    pub fn zeros(arch: Architecture) -> Self {
        let layout = arch.layout();
        PolicyParams {
            weights: vec![0.0; layout.total],
            arch,
            layout,
        }
    }

    pub fn from_weights(arch: Architecture, weights: Vec<f64>) -> Result<Self> {
        let layout = arch.layout();
        if weights.len() != layout.total {
            return Err(Error::Shape {
                expected: layout.total,
                actual: weights.len(),
            });
        }
        Ok(PolicyParams {
            arch,
            weights,
            layout,
        })
    }

    /// Orthogonal initialisation: gain sqrt(2) in the trunk, 1 in the
    /// recurrent cell and value head, 0.01 in the policy head; zero biases.
    pub fn init(arch: Architecture, rng: &mut ChaCha8Rng) -> Self {
        let mut p = PolicyParams::zeros(arch);
        let l = p.layout.clone();
        let fill = |w: &mut [f64], off: usize, rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng| {
            w[off..off + rows * cols].copy_from_slice(&orthogonal(rows, cols, gain, rng));
        };
        for d in &l.trunk {
            fill(&mut p.weights, d.w, d.inp, d.out, std::f64::consts::SQRT_2, rng);
        }
        if let Some(g) = l.gru {
            fill(&mut p.weights, g.wx, g.inp, 3 * g.width, 1.0, rng);
            // One orthogonal block per gate for the recurrent matrix.
            for gate in 0..3 {
                let block = orthogonal(g.width, g.width, 1.0, rng);
                for i in 0..g.width {
                    let dst = g.wh + i * 3 * g.width + gate * g.width;
                    p.weights[dst..dst + g.width].copy_from_slice(&block[i * g.width..(i + 1) * g.width]);
                }
            }
        }
        fill(&mut p.weights, l.pi.w, l.pi.inp, l.pi.out, 0.01, rng);
        fill(&mut p.weights, l.v.w, l.v.inp, 1, 1.0, rng);
        p
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.arch
            .segments()
            .into_iter()
            .find(|s| s.name == name)
            .map(|s| &self.weights[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let seg = self.arch.segments().into_iter().find(|s| s.name == name)?;
        Some(&mut self.weights[seg.offset..seg.offset + seg.len])
    }

    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        self.arch.encoding.encode(obs)
    }

    fn step_forward(&self, x: &[f64], h_prev: &[f64], cache: &mut StepCache) -> Vec<f64> {
        let w = &self.weights;
        let l = &self.layout;
        cache.acts.resize(l.trunk.len(), Vec::new());
        for (i, d) in l.trunk.iter().enumerate() {
            let (before, after) = cache.acts.split_at_mut(i);
            let inp: &[f64] = if i == 0 { x } else { &before[i - 1] };
            let out = &mut after[0];
            dense_forward(w, *d, inp, out);
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        let trunk_out: &[f64] = cache.acts.last().map_or(x, |a| a.as_slice());
        let h_next = match l.gru {
            None => {
                cache.gru = None;
                Vec::new()
            }
            Some(g) => {
                let hw = g.width;
                let mut gx = Vec::with_capacity(3 * hw);
                dense_forward(
                    w,
                    Dense {
                        w: g.wx,
                        b: g.bx,
                        inp: g.inp,
                        out: 3 * hw,
                    },
                    trunk_out,
                    &mut gx,
                );
                let mut gh = Vec::with_capacity(3 * hw);
                dense_forward(
                    w,
                    Dense {
                        w: g.wh,
                        b: g.bh,
                        inp: hw,
                        out: 3 * hw,
                    },
                    h_prev,
                    &mut gh,
                );
                let mut c = GruCache {
                    h_prev: h_prev.to_vec(),
                    z: Vec::with_capacity(hw),
                    r: Vec::with_capacity(hw),
                    n: Vec::with_capacity(hw),
                    gh_n: gh[2 * hw..].to_vec(),
                };
                let mut h = Vec::with_capacity(hw);
                for j in 0..hw {
                    let z = sigmoid(gx[j] + gh[j]);
                    let r = sigmoid(gx[hw + j] + gh[hw + j]);
                    let n = (gx[2 * hw + j] + r * gh[2 * hw + j]).tanh();
                    h.push((1.0 - z) * n + z * h_prev[j]);
                    c.z.push(z);
                    c.r.push(r);
                    c.n.push(n);
                }
                cache.gru = Some(c);
                h
            }
        };
        let feat: &[f64] = if l.gru.is_some() { &h_next } else { trunk_out };
        dense_forward(w, l.pi, feat, &mut cache.logits);
        let mut v = Vec::with_capacity(1);
        dense_forward(w, l.v, feat, &mut v);
        cache.value = v[0];
        h_next
    }

    /// Single-step forward: action distribution, value and next memory.
    pub fn forward(
        &self,
        obs: &[f64],
        mem: &MemoryState,
    ) -> Result<(ActionDistribution, f64, MemoryState)> {
        if obs.len() != self.arch.input_dim() {
            return Err(Error::Shape {
                expected: self.arch.input_dim(),
                actual: obs.len(),
            });
        }
        if mem.hidden.len() != self.arch.memory_dim() {
            return Err(Error::Shape {
                expected: self.arch.memory_dim(),
                actual: mem.hidden.len(),
            });
        }
        let mut cache = StepCache::default();
        let h_next = self.step_forward(obs, &mem.hidden, &mut cache);
        Ok((
            ActionDistribution::from_logits(&cache.logits),
            cache.value,
            MemoryState { hidden: h_next },
        ))
    }

    /// Loss and exact gradient for a batch of sequences. `head_loss` receives
    /// `(sequence index, step index, outputs)` and returns the step's loss and
    /// its head gradients. `l2` adds `l2 * sum(w^2)` to the loss.
    pub fn loss_and_gradient(
        &self,
        sequences: &[Sequence<'_>],
        head_loss: &mut dyn FnMut(usize, usize, &StepOutput<'_>) -> HeadGrad,
        l2: f64,
    ) -> Result<(f64, GradientSet)> {
        let l = &self.layout;
        let w = &self.weights;
        let mut grads = vec![0.0; w.len()];
        let mut total = 0.0;
        let mdim = self.arch.memory_dim();
        let zeros = vec![0.0; mdim];
        for (si, seq) in sequences.iter().enumerate() {
            let n = seq.inputs.len();
            if seq.resets.len() != n {
                return Err(Error::Shape {
                    expected: n,
                    actual: seq.resets.len(),
                });
            }
            if seq.initial_memory.len() != mdim {
                return Err(Error::Shape {
                    expected: mdim,
                    actual: seq.initial_memory.len(),
                });
            }
            let mut caches: Vec<StepCache> = Vec::with_capacity(n);
            let mut hiddens: Vec<Vec<f64>> = Vec::with_capacity(n);
            let mut head_grads: Vec<HeadGrad> = Vec::with_capacity(n);
            let mut h = seq.initial_memory.to_vec();
            for t in 0..n {
                let x = seq.inputs[t];
                if x.len() != self.arch.input_dim() {
                    return Err(Error::Shape {
                        expected: self.arch.input_dim(),
                        actual: x.len(),
                    });
                }
                if seq.resets[t] {
                    h.copy_from_slice(&zeros);
                }
                let mut cache = StepCache::default();
                let h_next = self.step_forward(x, &h, &mut cache);
                let probs = softmax(&cache.logits);
                let hg = head_loss(
                    si,
                    t,
                    &StepOutput {
                        logits: &cache.logits,
                        probs: &probs,
                        value: cache.value,
                    },
                );
                total += hg.loss;
                head_grads.push(hg);
                caches.push(cache);
                if l.gru.is_some() {
                    h = h_next.clone();
                }
                hiddens.push(h_next);
            }
            // Backward through time.
            let mut dh_carry = vec![0.0; mdim];
            let mut dfeat = Vec::new();
            let mut dtmp = Vec::new();
            for t in (0..n).rev() {
                let cache = &caches[t];
                let x = seq.inputs[t];
                let hg = &head_grads[t];
                let h_next = if l.gru.is_some() { Some(hiddens[t].as_slice()) } else { None };
                let feat = cache.feature(x, h_next);
                let fdim = feat.len();
                dfeat.clear();
                dfeat.resize(fdim, 0.0);
                if hg.dlogits.iter().any(|&g| g != 0.0) {
                    dense_backward(w, &mut grads, l.pi, feat, &hg.dlogits, Some(&mut dtmp));
                    dfeat.iter_mut().zip(&dtmp).for_each(|(a, b)| *a += b);
                }
                if hg.dvalue != 0.0 {
                    dense_backward(w, &mut grads, l.v, feat, &[hg.dvalue], Some(&mut dtmp));
                    dfeat.iter_mut().zip(&dtmp).for_each(|(a, b)| *a += b);
                }
                let trunk_out: &[f64] = cache.acts.last().map_or(x, |a| a.as_slice());
                let mut dtrunk: Vec<f64> = match (l.gru, &cache.gru) {
                    (Some(g), Some(gc)) => {
                        let hw = g.width;
                        // dh_next = head contribution + gradient from step t+1.
                        let dh: Vec<f64> = dfeat.iter().zip(&dh_carry).map(|(a, b)| a + b).collect();
                        let mut dgx = vec![0.0; 3 * hw];
                        let mut dgh = vec![0.0; 3 * hw];
                        let mut dh_prev = vec![0.0; hw];
                        for j in 0..hw {
                            let (z, r, nn) = (gc.z[j], gc.r[j], gc.n[j]);
                            let dz = dh[j] * (gc.h_prev[j] - nn);
                            let dn = dh[j] * (1.0 - z);
                            dh_prev[j] = dh[j] * z;
                            let dn_pre = dn * (1.0 - nn * nn);
                            let dr = dn_pre * gc.gh_n[j];
                            let dz_pre = dz * z * (1.0 - z);
                            let dr_pre = dr * r * (1.0 - r);
                            dgx[j] = dz_pre;
                            dgx[hw + j] = dr_pre;
                            dgx[2 * hw + j] = dn_pre;
                            dgh[j] = dz_pre;
                            dgh[hw + j] = dr_pre;
                            dgh[2 * hw + j] = dn_pre * r;
                        }
                        let wx = Dense {
                            w: g.wx,
                            b: g.bx,
                            inp: g.inp,
                            out: 3 * hw,
                        };
                        let wh = Dense {
                            w: g.wh,
                            b: g.bh,
                            inp: hw,
                            out: 3 * hw,
                        };
                        let mut dx = Vec::new();
                        dense_backward(w, &mut grads, wx, trunk_out, &dgx, Some(&mut dx));
                        dense_backward(w, &mut grads, wh, &gc.h_prev, &dgh, Some(&mut dtmp));
                        for (a, b) in dh_prev.iter_mut().zip(&dtmp) {
                            *a += b;
                        }
                        // Memory was zeroed before this step: no gradient flows further back.
                        if seq.resets[t] {
                            dh_prev.iter_mut().for_each(|v| *v = 0.0);
                        }
                        dh_carry = dh_prev;
                        dx
                    }
                    _ => dfeat.clone(),
                };
                for i in (0..l.trunk.len()).rev() {
                    let act = &cache.acts[i];
                    for (d, a) in dtrunk.iter_mut().zip(act) {
                        *d *= 1.0 - a * a;
                    }
                    let inp: &[f64] = if i == 0 { x } else { &cache.acts[i - 1] };
                    if i == 0 {
                        dense_backward(w, &mut grads, l.trunk[i], inp, &dtrunk, None);
                    } else {
                        let mut dx = Vec::new();
                        dense_backward(w, &mut grads, l.trunk[i], inp, &dtrunk, Some(&mut dx));
                        dtrunk = dx;
                    }
                }
            }
        }
        if l2 != 0.0 {
            for (g, &wi) in grads.iter_mut().zip(w) {
                *g += 2.0 * l2 * wi;
            }
            total += l2 * w.iter().map(|v| v * v).sum::<f64>();
        }
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total}")));
        }
        let grads = GradientSet { values: grads };
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok((total, grads))
    }

    /// Runs a sequence forward, returning the per-step distributions.
    pub fn forward_sequence(
        &self,
        inputs: &[Vec<f64>],
        mem: &MemoryState,
    ) -> Result<(Vec<ActionDistribution>, MemoryState)> {
        let mut m = mem.clone();
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (d, _, next) = self.forward(x, &m)?;
            out.push(d);
            m = next;
            if !self.arch.is_recurrent() {
                m = mem.clone();
            }
        }
        Ok((out, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn arch(recurrent: Option<usize>) -> Architecture {
        Architecture::new(ObsEncoding::Flat, 3, 1, vec![6, 5], recurrent, 5)
    }

    #[test]
    fn zero_weights_uniform() {
        let p = PolicyParams::zeros(arch(Some(4)));
        let (d, v, m) = p.forward(&[1.0; 15], &MemoryState::zeros(&p.arch)).unwrap();
        assert!(d.probs.iter().all(|&q| (q - 0.2).abs() < 1e-15));
        assert_eq!(v, 0.0);
        assert_eq!(m.hidden.len(), 4);
    }

    #[test]
    fn feedforward_memory_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PolicyParams::init(arch(None), &mut rng);
        let mem = MemoryState::zeros(&p.arch);
        let (d1, v1, m1) = p.forward(&[0.3; 15], &mem).unwrap();
        let (d2, v2, m2) = p.forward(&[0.3; 15], &mem).unwrap();
        assert_eq!((d1, v1), (d2, v2));
        assert!(m1.hidden.is_empty() && m2.hidden.is_empty());
    }

    #[test]
    fn shape_errors() {
        let p = PolicyParams::zeros(arch(None));
        assert!(matches!(
            p.forward(&[0.0; 3], &MemoryState::zeros(&p.arch)),
            Err(Error::Shape { .. })
        ));
        assert!(PolicyParams::from_weights(arch(None), vec![0.0; 3]).is_err());
    }

    #[test]
    fn segments_tile_weights() {
        let a = arch(Some(4));
        let segs = a.segments();
        let mut off = 0;
        for s in &segs {
            assert_eq!(s.offset, off, "{}", s.name);
            off += s.len;
        }
        assert_eq!(off, a.param_count());
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = orthogonal(8, 4, 1.0, &mut rng);
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..8).map(|r| m[r * 4 + a] * m[r * 4 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_loss_gradient_is_twice_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PolicyParams::init(arch(Some(3)), &mut rng);
        let (loss, g) = p
            .loss_and_gradient(&[], &mut |_, _, _| unreachable!(), 1.0)
            .unwrap();
        let expected: f64 = p.weights.iter().map(|w| w * w).sum();
        assert!((loss - expected).abs() < 1e-12);
        for (gi, wi) in g.values.iter().zip(&p.weights) {
            assert_eq!(*gi, 2.0 * wi);
        }
    }

    #[test]
    fn constant_loss_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PolicyParams::init(arch(Some(3)), &mut rng);
        let x = [0.5; 15];
        let mem = vec![0.0; 3];
        let seq = Sequence {
            initial_memory: &mem,
            inputs: vec![&x, &x],
            resets: vec![true, false],
        };
        let (loss, g) = p
            .loss_and_gradient(
                &[seq],
                &mut |_, _, _| HeadGrad {
                    loss: 3.0,
                    dlogits: vec![0.0; 5],
                    dvalue: 0.0,
                },
                0.0,
            )
            .unwrap();
        assert_eq!(loss, 6.0);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let p = PolicyParams::zeros(arch(None));
        let x = [0.5; 15];
        let seq = Sequence {
            initial_memory: &[],
            inputs: vec![&x],
            resets: vec![true],
        };
        let r = p.loss_and_gradient(
            &[seq],
            &mut |_, _, _| HeadGrad {
                loss: f64::NAN,
                dlogits: vec![0.0; 5],
                dvalue: 0.0,
            },
            0.0,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn sampling_follows_probabilities() {
        let d = ActionDistribution {
            probs: vec![0.1, 0.0, 0.6, 0.3, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 5];
        for _ in 0..20_000 {
            counts[d.sample(&mut rng)] += 1;
        }
        assert_eq!(counts[1] + counts[4], 0);
        assert!((counts[2] as f64 / 20_000.0 - 0.6).abs() < 0.02);
        assert_eq!(d.argmax(), 2);
    }

    #[test]
    fn egocentric_window() {
        use crate::env::{new_episode, LevelKind, LevelSpec, ObsMode};
        use std::sync::Arc;
        let level = LevelSpec::from_ascii(LevelKind::Maze, "#####\n#S.G#\n#####\n#####\n#####").unwrap();
        let (_, obs) = new_episode(Arc::new(level), ObsMode::Full);
        let enc = ObsEncoding::Egocentric {
            radius: 1,
            include_position: true,
        };
        let x = enc.encode(&obs);
        assert_eq!(x.len(), enc.input_dim(5, 5));
        // Walls window around (1,1): only the right neighbour is open.
        assert_eq!(&x[..9], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        // Goal window: goal is two cells right, outside radius 1.
        assert!(x[9..18].iter().all(|&v| v == 0.0));
        assert_eq!(x[36 + 6], 1.0);
    }
}

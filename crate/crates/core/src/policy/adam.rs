use super::{GradientSet, PolicyParams};
use crate::error::{Error, Result};

/// Adaptive-moment optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One optimizer step in place. A zero gradient leaves the parameters
/// unchanged while the moments still decay.
pub fn optimizer_step(
    params: &mut PolicyParams,
    grads: &GradientSet,
    lr: f64,
    state: &mut AdamState,
) -> Result<()> {
    let n = params.weights.len();
    if grads.values.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape {
            expected: n,
            actual: grads.values.len(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..n {
        let g = grads.values[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        if g == 0.0 && state.m[i] == 0.0 {
            continue;
        }
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.weights[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Architecture, ObsEncoding};

    fn params() -> PolicyParams {
        let arch = Architecture::new(ObsEncoding::Flat, 1, 1, vec![2], None, 5);
        let n = arch.param_count();
        PolicyParams::from_weights(arch, (0..n).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = params();
        let before = p.weights.clone();
        let mut st = AdamState::new(p.len());
        st.m.iter_mut().for_each(|m| *m = 0.0);
        let zero = GradientSet {
            values: vec![0.0; p.len()],
        };
        optimizer_step(&mut p, &zero, 5e-4, &mut st).unwrap();
        assert_eq!(p.weights, before);

        let mut st = AdamState::new(p.len());
        st.m.iter_mut().for_each(|m| *m = 1.0);
        st.v.iter_mut().for_each(|v| *v = 1.0);
        let mut q = params();
        optimizer_step(&mut q, &zero, 0.0, &mut st).unwrap();
        assert!(st.m.iter().all(|&m| (m - 0.9).abs() < 1e-15));
        assert!(st.v.iter().all(|&v| (v - 0.999).abs() < 1e-15));
    }

    #[test]
    fn constant_gradient_gives_normalized_steps() {
        // With a constant gradient the bias-corrected moments equal g and g^2
        // exactly, so every step is -lr * g / (|g| + eps).
        let mut p = params();
        let g: Vec<f64> = (0..p.len()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect();
        let grads = GradientSet { values: g.clone() };
        let mut st = AdamState::new(p.len());
        let lr = 5e-4;
        for _ in 0..500 {
            let before = p.weights.clone();
            optimizer_step(&mut p, &grads, lr, &mut st).unwrap();
            for i in 0..p.len() {
                let expected = -lr * g[i] / (g[i].abs() + st.eps);
                assert!(((p.weights[i] - before[i]) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = params();
            let mut st = AdamState::new(p.len());
            for k in 0..20 {
                let g = GradientSet {
                    values: (0..p.len()).map(|i| ((i * 7 + k) % 5) as f64 - 2.0).collect(),
                };
                optimizer_step(&mut p, &g, 1e-2, &mut st).unwrap();
            }
            p.weights
        };
        assert_eq!(run(), run());
    }
}

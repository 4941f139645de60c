mod common;

use common::{gradient_check, SyntheticLoss};
use expgen::policy::{
    load_checkpoint, optimizer_step, save_checkpoint, AdamState, Architecture, HeadGrad, MemoryState, ObsEncoding,
    PolicyParams, Sequence, StepOutput,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch(recurrent: bool) -> Architecture {
    let hidden = if recurrent { vec![6] } else { vec![8, 6] };
    Architecture::new(ObsEncoding::Flat, 5, 5, hidden, recurrent.then_some(5), 5)
}

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn finite_difference_gradients() {
    for recurrent in [false, true] {
        let a = arch(recurrent);
        let mut rng = ChaCha8Rng::seed_from_u64(if recurrent { 11 } else { 7 });
        for batch in 0..5 {
            let params = PolicyParams::init(a.clone(), &mut rng);
            assert!(params.len() >= 200);
            let lens = [4usize, 3];
            let inputs: Vec<Vec<Vec<f64>>> = lens.iter().map(|&n| random_inputs(&mut rng, n, a.input_dim())).collect();
            let mems: Vec<Vec<f64>> = lens
                .iter()
                .map(|_| (0..a.memory_dim()).map(|_| rng.random_range(-0.5..0.5)).collect())
                .collect();
            let seqs: Vec<Sequence<'_>> = inputs
                .iter()
                .zip(&mems)
                .map(|(xs, m)| Sequence {
                    initial_memory: m,
                    inputs: xs.iter().map(|x| x.as_slice()).collect(),
                    resets: (0..xs.len()).map(|t| t == 2).collect(),
                })
                .collect();
            let loss = SyntheticLoss::random(&lens, 5, &mut rng);
            let (err, _) = gradient_check(&params, &seqs, &loss, 1e-5, 1e-6);
            assert!(err < 1e-4, "recurrent={recurrent} batch {batch}: {err}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distributions_are_normalized(seed in any::<u64>(), recurrent in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = arch(recurrent);
        let p = PolicyParams::init(a.clone(), &mut rng);
        let mut mem = MemoryState::zeros(&a);
        for x in random_inputs(&mut rng, 5, a.input_dim()) {
            let (d, v, next) = p.forward(&x, &mem).unwrap();
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(d.probs.iter().all(|&q| q > 0.0));
            prop_assert!(v.is_finite());
            mem = next;
        }
    }

    #[test]
    fn sequence_forward_equals_chained_steps(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = arch(true);
        let p = PolicyParams::init(a.clone(), &mut rng);
        let xs = random_inputs(&mut rng, n, a.input_dim());
        let start = MemoryState { hidden: (0..a.memory_dim()).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (dists, end) = p.forward_sequence(&xs, &start).unwrap();
        let mut mem = start;
        for (x, d) in xs.iter().zip(&dists) {
            let (step, _, next) = p.forward(x, &mem).unwrap();
            prop_assert_eq!(&step.probs, &d.probs);
            mem = next;
        }
        prop_assert_eq!(mem, end);
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs(seed in any::<u64>(), recurrent in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = arch(recurrent);
        let p = PolicyParams::init(a.clone(), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&path, &p, None).unwrap();
        let q = load_checkpoint(&path).unwrap().params;
        let x = random_inputs(&mut rng, 1, a.input_dim()).remove(0);
        let mem = MemoryState::zeros(&a);
        let (d1, v1, m1) = p.forward(&x, &mem).unwrap();
        let (d2, v2, m2) = q.forward(&x, &mem).unwrap();
        prop_assert_eq!(d1.probs, d2.probs);
        prop_assert_eq!(v1, v2);
        prop_assert_eq!(m1, m2);
    }
}

/// A tiny recurrent policy learns to act on a cue seen two steps earlier;
/// afterwards identical observations with different histories give clearly
/// different action distributions.
#[test]
fn memory_changes_the_distribution() {
    let a = Architecture::new(ObsEncoding::Flat, 5, 5, vec![8], Some(8), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = PolicyParams::init(a.clone(), &mut rng);
    let dim = a.input_dim();
    let cue = |v: f64| {
        let mut x = vec![0.0; dim];
        x[0] = v;
        x
    };
    let blank = vec![0.0; dim];
    let histories = [vec![cue(1.0), blank.clone(), blank.clone()], vec![cue(-1.0), blank.clone(), blank.clone()]];
    let zeros = vec![0.0; a.memory_dim()];
    let mut opt = AdamState::new(p.len());
    for _ in 0..300 {
        let seqs: Vec<Sequence<'_>> = histories
            .iter()
            .map(|h| Sequence {
                initial_memory: &zeros,
                inputs: h.iter().map(|x| x.as_slice()).collect(),
                resets: vec![false; 3],
            })
            .collect();
        // Cross-entropy toward action 0 or 1 on the final step only.
        let mut head = |si: usize, t: usize, o: &StepOutput<'_>| {
            if t < 2 {
                return HeadGrad { loss: 0.0, dlogits: vec![0.0; 5], dvalue: 0.0 };
            }
            let mut d: Vec<f64> = o.probs.to_vec();
            d[si] -= 1.0;
            HeadGrad { loss: -o.probs[si].ln(), dlogits: d, dvalue: 0.0 }
        };
        let (_, g) = p.loss_and_gradient(&seqs, &mut head, 0.0).unwrap();
        optimizer_step(&mut p, &g, 0.01, &mut opt).unwrap();
    }
    let last = |h: &Vec<Vec<f64>>| p.forward_sequence(h, &MemoryState::zeros(&a)).unwrap().0.pop().unwrap();
    let (d0, d1) = (last(&histories[0]), last(&histories[1]));
    let tv: f64 = 0.5 * d0.probs.iter().zip(&d1.probs).map(|(x, y)| (x - y).abs()).sum::<f64>();
    assert!(tv > 0.1, "total variation {tv}");
}

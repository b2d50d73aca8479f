//! Property tests for the optimizer family on scalar and low-dimensional
//! quadratics, where every rule has a checkable closed form or monotone
//! invariant.

use clmr_core::optim::{
    adagrad_step, adam_step, lookahead_point, momentum_step, nesterov_step, sgd_step,
    HyperParams, Optimizer, OptimizerKind, OptimizerState,
};
use clmr_core::schedule::CycleConfig;
use proptest::prelude::*;

/// Drives the stateful optimizer on f(x) = sum(lambda x^2) / 2.
fn run_quadratic(kind: OptimizerKind, hp: HyperParams, lambda: &[f64], x0: &[f64], steps: usize) -> Vec<Vec<f64>> {
    let cycle = kind
        .uses_cycle()
        .then(|| CycleConfig::with_defaults(2, 2, 5).unwrap());
    let mut opt = Optimizer::new(kind, hp, cycle, x0.len()).unwrap();
    let mut x = x0.to_vec();
    let mut trajectory = vec![x.clone()];
    for _ in 0..steps {
        let at = opt.lookahead(&x).unwrap().unwrap_or_else(|| x.clone());
        let grad: Vec<f64> = at.iter().zip(lambda).map(|(x, l)| l * x).collect();
        opt.step(&mut x, &grad).unwrap();
        trajectory.push(x.clone());
    }
    trajectory
}

proptest! {
    #[test]
    fn sgd_follows_the_geometric_closed_form(
        alpha in 0.001f64..0.6,
        lambda in 0.1f64..2.0,
        x0 in -3.0f64..3.0,
    ) {
        let hp = HyperParams { alpha, ..Default::default() };
        let traj = run_quadratic(OptimizerKind::Sgd, hp, &[lambda], &[x0], 50);
        let ratio = 1.0 - alpha * lambda;
        for (i, x) in traj.iter().enumerate() {
            let expect = x0 * ratio.powi(i as i32);
            prop_assert!(
                (x[0] - expect).abs() <= 1e-12 * expect.abs().max(1.0),
                "step {i}: {} vs {expect}",
                x[0]
            );
        }
    }

    #[test]
    fn adagrad_accumulator_grows_and_steps_shrink(
        alpha in 0.01f64..0.5,
        grad in 0.1f64..2.0,
    ) {
        let hp = HyperParams { alpha, ..Default::default() };
        let mut opt = Optimizer::new(OptimizerKind::AdaGrad, hp, None, 1).unwrap();
        let mut x = vec![10.0];
        let mut prev_accum = 0.0;
        let mut prev_step = f64::INFINITY;
        for _ in 0..40 {
            let before = x[0];
            opt.step(&mut x, &[grad]).unwrap();
            let OptimizerState::AdaGrad { accum } = opt.state() else {
                panic!("adagrad state expected");
            };
            prop_assert!(accum[0] > prev_accum);
            let step = (before - x[0]).abs();
            prop_assert!(step <= prev_step * (1.0 + 1e-12));
            prev_accum = accum[0];
            prev_step = step;
        }
    }

    #[test]
    fn adam_constant_gradient_step_is_bounded_by_alpha(
        alpha in 0.0005f64..0.1,
        grad in prop::sample::select(vec![-50.0, -1.0, -1e-4, 1e-4, 0.3, 7.0]),
    ) {
        let hp = HyperParams { alpha, ..Default::default() };
        let mut opt = Optimizer::new(OptimizerKind::Adam, hp, None, 1).unwrap();
        let mut x = vec![0.0];
        for _ in 0..30 {
            let before = x[0];
            opt.step(&mut x, &[grad]).unwrap();
            let delta = x[0] - before;
            prop_assert!(delta.abs() <= alpha * (1.0 + 1e-9), "step {delta} exceeds {alpha}");
            prop_assert!(delta * grad <= 0.0, "step moves along the gradient");
        }
    }

    #[test]
    fn trajectories_are_deterministic(
        seed_x in -2.0f64..2.0,
        kind in prop::sample::select(OptimizerKind::ALL.to_vec()),
    ) {
        let hp = HyperParams::default();
        let lambda = [0.7, 1.3];
        let x0 = [seed_x, -seed_x + 0.5];
        let a = run_quadratic(kind, hp, &lambda, &x0, 20);
        let b = run_quadratic(kind, hp, &lambda, &x0, 20);
        for (xa, xb) in a.iter().zip(&b) {
            for (va, vb) in xa.iter().zip(xb) {
                prop_assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }
}

/// The driver must be sugar over the free step functions: identical bits
/// when the rates are replayed by hand.
#[test]
fn driver_matches_free_functions_bitwise() {
    let hp = HyperParams::default();
    let lambda = [0.4, 1.1, 2.3];
    let x0 = [1.0, -2.0, 0.5];
    let steps = 25;
    let grad_at = |x: &[f64]| -> Vec<f64> { x.iter().zip(&lambda).map(|(x, l)| l * x).collect() };

    for kind in OptimizerKind::ALL {
        let driven = run_quadratic(kind, hp, &lambda, &x0, steps);

        let cycle = CycleConfig::with_defaults(2, 2, 5).unwrap();
        let mut x = x0.to_vec();
        let mut manual = vec![x.clone()];
        let mut prev_delta = vec![0.0; x.len()];
        let mut accum = vec![0.0; x.len()];
        let mut m = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        let mut t = 0u64;
        for i in 0..steps {
            let here = grad_at(&x);
            match kind {
                OptimizerKind::Sgd => sgd_step(&mut x, &here, hp.alpha).unwrap(),
                OptimizerKind::Momentum => {
                    momentum_step(&mut x, &here, &mut prev_delta, hp.alpha, hp.beta).unwrap()
                }
                OptimizerKind::Nesterov | OptimizerKind::Clr | OptimizerKind::Clmr => {
                    let (alpha, beta) = match kind {
                        OptimizerKind::Nesterov => (hp.alpha, hp.beta),
                        OptimizerKind::Clr => (cycle.lr_at(i), hp.beta),
                        _ => (cycle.lr_at(i), cycle.mr_at(i)),
                    };
                    let look = lookahead_point(&x, &prev_delta, beta).unwrap();
                    nesterov_step(&mut x, &grad_at(&look), &mut prev_delta, alpha, beta)
                        .unwrap();
                }
                OptimizerKind::AdaGrad => {
                    adagrad_step(&mut x, &here, &mut accum, hp.alpha, hp.epsilon).unwrap()
                }
                OptimizerKind::Adam => {
                    adam_step(&mut x, &here, &mut m, &mut v, &mut t, &hp).unwrap()
                }
            }
            manual.push(x.clone());
        }

        for (step, (a, b)) in driven.iter().zip(&manual).enumerate() {
            for (va, vb) in a.iter().zip(b) {
                assert_eq!(
                    va.to_bits(),
                    vb.to_bits(),
                    "{kind} diverges from the free functions at step {step}"
                );
            }
        }
    }
}

/// After k steps the driver reports exactly the schedule's rates for step k.
#[test]
fn cyclic_rates_track_the_schedule() {
    let cycle = CycleConfig::with_defaults(2, 4, 3).unwrap();
    for kind in [OptimizerKind::Clr, OptimizerKind::Clmr] {
        let hp = HyperParams::default();
        let mut opt = Optimizer::new(kind, hp, Some(cycle), 1).unwrap();
        let mut x = vec![1.0];
        for i in 0..40 {
            let (lr, mr) = opt.rates();
            assert_eq!(lr.to_bits(), cycle.lr_at(i).to_bits());
            match kind {
                OptimizerKind::Clmr => assert_eq!(mr.to_bits(), cycle.mr_at(i).to_bits()),
                _ => assert_eq!(mr, hp.beta),
            }
            let at = opt.lookahead(&x).unwrap().unwrap();
            let grad = [at[0] * 0.5];
            opt.step(&mut x, &grad).unwrap();
        }
    }
}

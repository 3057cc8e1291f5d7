//! Weak-duality oracles for the relaxation dual: every dual value must
//! lower-bound the exhaustive-grid minimum of the true logit gap, the inner
//! minimization must beat any feasible assignment, and the zero-dual value
//! must match an independent single-block computation.

use advgnn_core::attacks::{AttackProperty, PerturbationBall};
use advgnn_core::bounds::merged_bounds;
use advgnn_core::netcore::Network;
use advgnn_core::relaxation::{
    build_relaxation, dual_inner_min, supergradient_ascent, AscentConfig, PlanetNeuron,
};
use advgnn_core::synth::random_network;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid_min_gap(net: &Network, prop: &AttackProperty, steps: usize) -> f64 {
    let feasible = prop.ball.feasible_box();
    let mut best = f64::INFINITY;
    for a in 0..steps {
        for b in 0..steps {
            let x = [
                feasible[0].0 + (feasible[0].1 - feasible[0].0) * a as f64 / (steps - 1) as f64,
                feasible[1].0 + (feasible[1].1 - feasible[1].0) * b as f64 / (steps - 1) as f64,
            ];
            let logits = net.logits(&x).unwrap();
            best = best.min(logits[prop.y] - logits[prop.y_tar]);
        }
    }
    best
}

fn two_input_instance(rng: &mut ChaCha8Rng) -> (Network, AttackProperty) {
    let hidden = rng.random_range(3..=8);
    let classes = rng.random_range(2..=3);
    let net = random_network(rng, &[2, hidden, classes]);
    let center = vec![rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let ball = PerturbationBall::around(&net, center, rng.random_range(0.05..0.3)).unwrap();
    let m = net.output_dim();
    let y = rng.random_range(0..m);
    let y_tar = (y + rng.random_range(1..m)) % m;
    (net, AttackProperty::new(ball, y, y_tar).unwrap())
}

/// Every iterate of supergradient ascent yields a valid lower bound on the
/// 401² grid minimum of the exact objective (margin ≥ −1e−9).
#[test]
fn every_ascent_iterate_lower_bounds_grid_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD0A1);
    for instance in 0..20 {
        let (net, prop) = two_input_instance(&mut rng);
        let bounds = merged_bounds(&net, &prop.ball).unwrap();
        let relax = build_relaxation(&net, &prop, &bounds).unwrap();
        let grid = grid_min_gap(&net, &prop, 401);

        // Replay the ascent trajectory and check every visited q.
        let cfg = AscentConfig {
            steps: 40,
            ..AscentConfig::default()
        };
        let mut rho = relax.zero_duals();
        let mut m = relax.zero_duals();
        let mut v = relax.zero_duals();
        for step in 1..=cfg.steps {
            let (q, assign) = dual_inner_min(&rho, &relax).unwrap();
            assert!(
                q <= grid + 1e-9,
                "instance {instance}, step {step}: q = {q} exceeds grid min {grid}"
            );
            let bc1 = 1.0 - cfg.beta1.powi(step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(step as i32);
            for k in 0..rho.len() {
                for j in 0..rho[k].len() {
                    let g = assign.zhat_b[k][j] - assign.zhat_a[k][j];
                    m[k][j] = cfg.beta1 * m[k][j] + (1.0 - cfg.beta1) * g;
                    v[k][j] = cfg.beta2 * v[k][j] + (1.0 - cfg.beta2) * g * g;
                    rho[k][j] += cfg.lr * (m[k][j] / bc1) / ((v[k][j] / bc2).sqrt() + cfg.eps);
                }
            }
        }
        // And the returned best state agrees.
        let dual = supergradient_ascent(&net, &prop, &bounds, &cfg).unwrap();
        assert!(dual.dual_value <= grid + 1e-9);
        assert!(prop.ball.contains(&dual.x_lp), "x_lp must be feasible");
    }
}

/// The inner minimizer beats 1000 random feasible assignments of the
/// decomposed objective for random duals.
#[test]
fn inner_minimum_beats_random_feasible_assignments() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1BB);
    for _ in 0..10 {
        let net = random_network(&mut rng, &[3, 6, 5, 2]);
        let center: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..0.8)).collect();
        let ball = PerturbationBall::around(&net, center, 0.2).unwrap();
        let prop = AttackProperty::new(ball, 0, 1).unwrap();
        let bounds = merged_bounds(&net, &prop.ball).unwrap();
        let relax = build_relaxation(&net, &prop, &bounds).unwrap();
        let mut rho = relax.zero_duals();
        for layer in rho.iter_mut() {
            for r in layer.iter_mut() {
                *r = rng.random_range(-0.5..0.5);
            }
        }
        let (q, _) = dual_inner_min(&rho, &relax).unwrap();

        let n_coupled = relax.coupled_layers();
        for _ in 0..1000 {
            // Sample a feasible assignment block by block.
            let z0: Vec<f64> = relax
                .feasible_box()
                .iter()
                .map(|&(lo, hi)| rng.random_range(lo..=hi))
                .collect();
            let mut value = 0.0;
            // ẑ_{A,1} from block 0.
            let (w1, b1) = relax.affine(0);
            let mut zhat_a = w1.matvec(&z0);
            for (za, b) in zhat_a.iter_mut().zip(b1) {
                *za += b;
            }
            for k in 0..n_coupled {
                // Random ẑ_B and hull-feasible z per neuron.
                let neurons = relax.hull_layer(k);
                let mut zb = vec![0.0; neurons.len()];
                let mut zp = vec![0.0; neurons.len()];
                for (j, neuron) in neurons.iter().enumerate() {
                    match *neuron {
                        PlanetNeuron::Blocked { lo, hi } => {
                            zb[j] = rng.random_range(lo..=hi);
                            zp[j] = 0.0;
                        }
                        PlanetNeuron::Passing { lo, hi } => {
                            zb[j] = rng.random_range(lo..=hi);
                            zp[j] = zb[j];
                        }
                        PlanetNeuron::Ambiguous {
                            lo,
                            hi,
                            slope,
                            intercept,
                        } => {
                            zb[j] = rng.random_range(lo..=hi);
                            let z_lo = zb[j].max(0.0);
                            let z_hi = slope * zb[j] + intercept;
                            zp[j] = if z_hi > z_lo {
                                rng.random_range(z_lo..=z_hi)
                            } else {
                                z_lo
                            };
                        }
                    }
                }
                // Coupling term ρₖᵀ(ẑ_B − ẑ_A).
                for j in 0..zb.len() {
                    value += rho[k][j] * (zb[j] - zhat_a[j]);
                }
                // Next pre-activation from this block's z.
                let (w_next, b_next) = relax.affine(k + 1);
                zhat_a = w_next.matvec(&zp);
                for (za, b) in zhat_a.iter_mut().zip(b_next) {
                    *za += b;
                }
            }
            // Objective term ẑ_{A,n} (scalar).
            value += zhat_a[0];
            assert!(
                q <= value + 1e-9,
                "inner min {q} exceeds a feasible assignment value {value}"
            );
        }
    }
}

/// q(0) equals a direct single-block backward computation: only the last
/// block contributes when all couplings are zero.
#[test]
fn zero_dual_value_matches_direct_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0DD);
    for _ in 0..20 {
        let net = random_network(&mut rng, &[3, 7, 6, 3]);
        let center: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..0.9)).collect();
        let ball = PerturbationBall::around(&net, center, rng.random_range(0.05..0.25)).unwrap();
        let m = net.output_dim();
        let y = rng.random_range(0..m);
        let y_tar = (y + rng.random_range(1..m)) % m;
        let prop = AttackProperty::new(ball, y, y_tar).unwrap();
        let bounds = merged_bounds(&net, &prop.ball).unwrap();
        let relax = build_relaxation(&net, &prop, &bounds).unwrap();
        let (q0, _) = dual_inner_min(&relax.zero_duals(), &relax).unwrap();

        let last = relax.coupled_layers();
        let (w, b) = relax.affine(last);
        let row = w.row(0);
        let mut direct = b[0];
        for (j, neuron) in relax.hull_layer(last - 1).iter().enumerate() {
            let wj = row[j];
            direct += match *neuron {
                PlanetNeuron::Blocked { .. } => 0.0,
                PlanetNeuron::Passing { lo, hi } => {
                    if wj > 0.0 {
                        wj * lo
                    } else {
                        wj * hi
                    }
                }
                PlanetNeuron::Ambiguous { hi, .. } => {
                    if wj >= 0.0 {
                        0.0
                    } else {
                        wj * hi
                    }
                }
            };
        }
        assert!((q0 - direct).abs() <= 1e-9, "q0 {q0} vs direct {direct}");
    }
}

/// Collapsed instance: zero radius and zero duals reproduce the exact logit
/// gap at the point.
#[test]
fn zero_epsilon_zero_dual_is_exact_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xEE);
    for _ in 0..10 {
        let net = random_network(&mut rng, &[4, 6, 4, 3]);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..0.9)).collect();
        let ball = PerturbationBall::around(&net, x.clone(), 0.0).unwrap();
        let prop = AttackProperty::new(ball, 0, 2).unwrap();
        let bounds = merged_bounds(&net, &prop.ball).unwrap();
        let relax = build_relaxation(&net, &prop, &bounds).unwrap();
        let (q, assign) = dual_inner_min(&relax.zero_duals(), &relax).unwrap();
        let logits = net.logits(&x).unwrap();
        let gap = logits[0] - logits[2];
        assert!((q - gap).abs() <= 1e-9, "q {q} vs gap {gap}");
        assert_eq!(assign.z0, x);
    }
}

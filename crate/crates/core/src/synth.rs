//! Seeded generators for synthetic networks and attack instances.
//!
//! Used by the test suites, the CLI's `gen-net` subcommand, and anywhere a
//! small reproducible ReLU network is needed. Weights are uniform in
//! `±1/√fan_in`, which keeps logits of box-bounded inputs in a moderate
//! range.

use rand::Rng;

use crate::attacks::{AttackProperty, PerturbationBall};
use crate::linalg::Matrix;
use crate::netcore::{Layer, Network};

/// Random dense network with the given widths, e.g. `[2, 8, 8, 3]` for a
/// 2-input, 3-class network with two hidden layers.
pub fn random_network<R: Rng>(rng: &mut R, widths: &[usize]) -> Network {
    assert!(widths.len() >= 2, "need at least input and output widths");
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for w in widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        // 2/√fan_in keeps activations O(1) while leaving enough logit
        // variation across the box for decision boundaries to cross it.
        let scale = 2.0 / (fan_in as f64).sqrt();
        let mut weight = Matrix::zeros(fan_out, fan_in);
        for v in weight.as_mut_slice() {
            *v = rng.random_range(-scale..scale);
        }
        let bias: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-0.1..0.1)).collect();
        layers.push(Layer::dense(weight, bias).expect("generated shapes are consistent"));
    }
    Network::new(layers).expect("generated layers are shape-compatible")
}

/// Random property whose ball stays strictly inside the `[0,1]` input box,
/// so an unprojected FGSM step from the center remains feasible.
pub fn random_interior_property<R: Rng>(
    rng: &mut R,
    net: &Network,
    max_epsilon: f64,
) -> AttackProperty {
    let d = net.input_dim();
    let m = net.output_dim();
    assert!(m >= 2, "need at least two classes");
    let epsilon = rng.random_range(0.01..max_epsilon.min(0.25));
    let center: Vec<f64> = (0..d)
        .map(|_| rng.random_range(0.3_f64.max(epsilon)..0.7_f64.min(1.0 - epsilon)))
        .collect();
    let y = rng.random_range(0..m);
    let offset = rng.random_range(1..m);
    let y_tar = (y + offset) % m;
    let ball = PerturbationBall::around(net, center, epsilon).expect("interior ball is feasible");
    AttackProperty::new(ball, y, y_tar).expect("y differs from y_tar")
}

/// Interior property whose true class is the network's prediction at the
/// center, so the adversarial loss starts strictly negative. Resamples until
/// the runner-up logit is strictly below the winner.
pub fn classified_interior_property<R: Rng>(
    rng: &mut R,
    net: &Network,
    max_epsilon: f64,
) -> AttackProperty {
    let m = net.output_dim();
    assert!(m >= 2, "need at least two classes");
    loop {
        let d = net.input_dim();
        let epsilon = rng.random_range(0.01..max_epsilon.min(0.25));
        let center: Vec<f64> = (0..d)
            .map(|_| rng.random_range(0.3_f64.max(epsilon)..0.7_f64.min(1.0 - epsilon)))
            .collect();
        let logits = net.logits(&center).expect("interior point evaluates");
        let y = net.classify(&center).expect("interior point evaluates");
        let offset = rng.random_range(1..m);
        let y_tar = (y + offset) % m;
        if logits[y_tar] >= logits[y] {
            continue; // tie; try another center
        }
        let ball =
            PerturbationBall::around(net, center, epsilon).expect("interior ball is feasible");
        return AttackProperty::new(ball, y, y_tar).expect("y differs from y_tar");
    }
}

/// Random property anywhere in the box (the ball may be clipped by it).
pub fn random_property<R: Rng>(rng: &mut R, net: &Network, max_epsilon: f64) -> AttackProperty {
    let d = net.input_dim();
    let m = net.output_dim();
    assert!(m >= 2, "need at least two classes");
    let center: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
    let epsilon = rng.random_range(0.005..max_epsilon);
    let y = rng.random_range(0..m);
    let offset = rng.random_range(1..m);
    let y_tar = (y + offset) % m;
    let ball = PerturbationBall::around(net, center, epsilon).expect("center lies in the box");
    AttackProperty::new(ball, y, y_tar).expect("y differs from y_tar")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_network_has_requested_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = random_network(&mut rng, &[3, 7, 2]);
        assert_eq!(net.input_dim(), 3);
        assert_eq!(net.output_dim(), 2);
        assert_eq!(net.layer_count(), 2);
    }

    #[test]
    fn interior_property_ball_fits_in_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = random_network(&mut rng, &[4, 6, 3]);
        for _ in 0..50 {
            let prop = random_interior_property(&mut rng, &net, 0.2);
            for i in 0..4 {
                let c = prop.ball.center[i];
                let e = prop.ball.epsilon;
                assert!(c - e >= 0.0 && c + e <= 1.0);
            }
            assert_ne!(prop.y, prop.y_tar);
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = random_network(&mut ChaCha8Rng::seed_from_u64(9), &[2, 5, 2]);
        let b = random_network(&mut ChaCha8Rng::seed_from_u64(9), &[2, 5, 2]);
        assert_eq!(a.logits(&[0.3, 0.8]).unwrap(), b.logits(&[0.3, 0.8]).unwrap());
    }
}

//! Dense feed-forward networks with exact reverse-mode gradients and Adam.

mod adam;
mod matrix;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use matrix::Matrix;
pub(crate) use mlp::{read_f64, read_u64};
pub use mlp::{sigmoid, ForwardTape, Gradients, HiddenActivation, Mlp, OutputActivation};

#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::testutil::{central_difference, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Scalar objective Σ c ⊙ f(x) with fixed random weights c.
    fn objective(net: &Mlp, x: &Matrix, c: &Matrix) -> f64 {
        let y = net.predict(x).unwrap();
        y.as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    }

    fn check_network(dims: &[usize], output: OutputActivation, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(dims, HiddenActivation::Relu, output, &mut rng).unwrap();
        // Nonzero biases so every parameter matters.
        for p in net.params_mut() {
            *p += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
        let batch = 7;
        let x = Matrix::from_fn(batch, dims[0], |_, _| rng.sample(StandardNormal));
        let c = Matrix::from_fn(batch, *dims.last().unwrap(), |_, _| {
            rng.sample(StandardNormal)
        });
        let (_, tape) = net.forward(&x).unwrap();
        let (g, dx) = net.backward(&tape, &c).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        while checked < 100 {
            let i = rng.random_range(0..net.num_params());
            let f = |d: f64| {
                let mut moved = net.clone();
                moved.params_mut()[i] += d;
                objective(&moved, &x, &c)
            };
            let Some(fd) = central_difference(f, h) else {
                continue;
            };
            let e = rel_err(fd, g.as_slice()[i]);
            assert!(
                e < 1e-4,
                "param {i} of {dims:?}: fd {fd} vs analytic {} ({e})",
                g.as_slice()[i]
            );
            checked += 1;
        }
        for r in 0..batch {
            for k in 0..dims[0] {
                let f = |d: f64| {
                    let mut xm = x.clone();
                    xm.set(r, k, x.get(r, k) + d);
                    objective(&net, &xm, &c)
                };
                if let Some(fd) = central_difference(f, h) {
                    assert!(rel_err(fd, dx.get(r, k)) < 1e-4, "input ({r},{k})");
                }
            }
        }
    }

    #[test]
    fn finite_differences_critic_shapes() {
        check_network(&[3, 64, 64, 64, 1], OutputActivation::Identity, 1);
        check_network(&[2, 64, 64, 64, 1], OutputActivation::Identity, 2);
        check_network(&[1, 64, 64, 64, 1], OutputActivation::Identity, 3);
    }

    #[test]
    fn finite_differences_generator_shapes() {
        check_network(&[1, 64, 64, 64, 64, 1], OutputActivation::Identity, 4);
        check_network(
            &[2, 16, 16, 2],
            OutputActivation::ScaledSigmoid { lo: -3.0, hi: 2.0 },
            5,
        );
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(
            &[2, 8, 8, 1],
            HiddenActivation::Relu,
            OutputActivation::Identity,
            &mut rng,
        )
        .unwrap();
        let x = Matrix::from_fn(5, 2, |i, j| i as f64 - j as f64);
        let (_, tape) = net.forward(&x).unwrap();
        let (g, dx) = net.backward(&tape, &Matrix::zeros(5, 1)).unwrap();
        assert!(g.is_zero());
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(net.input_grad(&tape, &Matrix::zeros(5, 1)).unwrap(), dx);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut net = Mlp::new(
                &[1, 16, 1],
                HiddenActivation::Relu,
                OutputActivation::Identity,
                &mut rng,
            )
            .unwrap();
            let mut opt = AdamState::for_mlp(&net, 1e-2).unwrap();
            let x = Matrix::from_fn(32, 1, |i, _| i as f64 / 32.0);
            for _ in 0..50 {
                let (y, tape) = net.forward(&x).unwrap();
                let up =
                    Matrix::from_fn(32, 1, |i, _| 2.0 * (y.get(i, 0) - x.get(i, 0).sin()) / 32.0);
                let (g, _) = net.backward(&tape, &up).unwrap();
                adam_step(&mut opt, &mut net, &g).unwrap();
            }
            net.params().to_vec()
        };
        assert_eq!(run(), run());
    }
}

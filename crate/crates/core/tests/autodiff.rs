//! Reverse-mode gradients against central finite differences.

use invbench::cfm::{CfmConfig, VectorFieldNet, FIELD_INPUT};
use invbench::cwgan::{critic_loss_grads, gradient_penalty, gradient_penalty_grads};
use invbench::nn::{Activation, Mlp, Tape};
use invbench::seed::rng_from_seed;
use invbench::solver::{normal_matrix, LabelScaler};
use ndarray::Array2;
use rand::Rng;

const ACTIVATIONS: [Activation; 7] = [
    Activation::Linear,
    Activation::Relu,
    Activation::LeakyRelu(0.2),
    Activation::Selu,
    Activation::Sigmoid,
    Activation::Tanh,
    Activation::Softmax,
];

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Largest relative error between `grads` and central differences of `f`
/// over every parameter entry of `mlp`.
fn check_params(mlp: &Mlp<f64>, grads: &[Array2<f64>], h: f64, f: impl Fn(&Mlp<f64>) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for (p, g) in grads.iter().enumerate() {
        for ((i, j), &analytic) in g.indexed_iter() {
            let mut plus = mlp.clone();
            plus.params_mut()[p][[i, j]] += h;
            let mut minus = mlp.clone();
            minus.params_mut()[p][[i, j]] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

fn weighted_output(mlp: &Mlp<f64>, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (mlp.predict(x.view()).unwrap() * w).sum()
}

/// Glorot biases start at zero, which puts a ReLU unit fed by a dead layer
/// exactly on its kink.
fn randomize_biases<R: Rng>(mlp: &mut Mlp<f64>, rng: &mut R) {
    for (k, p) in mlp.params_mut().into_iter().enumerate() {
        if k % 2 == 1 {
            p.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
}

#[test]
fn random_mlp_gradients_match_finite_differences() {
    let mut rng = rng_from_seed(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(1..=5)];
        for _ in 0..depth {
            dims.push(rng.random_range(1..=7));
        }
        dims.push(rng.random_range(1..=4));
        let hidden = ACTIVATIONS[rng.random_range(0..6)];
        let output = ACTIVATIONS[rng.random_range(0..ACTIVATIONS.len())];
        let mut mlp = Mlp::<f64>::new(&dims, hidden, output, &mut rng);
        randomize_biases(&mut mlp, &mut rng);
        let n = rng.random_range(1..=6);
        let x = normal_matrix::<f64, _>(n, dims[0], &mut rng);
        let w = normal_matrix::<f64, _>(n, *dims.last().unwrap(), &mut rng);

        let tape = Tape::new();
        let bound = mlp.bind(&tape, true);
        let out = bound.forward(tape.constant(x.clone())).unwrap();
        let loss = out.mul(tape.constant(w.clone())).sum();
        assert!((loss.item() - weighted_output(&mlp, &x, &w)).abs() < 1e-12);
        let grads = bound.grads(&tape.backward(loss).unwrap());

        let err = check_params(&mlp, &grads, 1e-6, |m| weighted_output(m, &x, &w));
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = rng_from_seed(12);
    for _ in 0..20 {
        let mlp = Mlp::<f64>::new(&[4, 6, 5, 2], Activation::LeakyRelu(0.2), Activation::Linear, &mut rng);
        let x = normal_matrix::<f64, _>(3, 4, &mut rng);
        let tape = Tape::new();
        let bound = mlp.bind(&tape, false);
        let g = bound.input_gradient(tape.constant(x.clone()), 1).unwrap().value();
        for r in 0..3 {
            for c in 0..4 {
                let h = 1e-6;
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fp = mlp.predict(xp.view()).unwrap()[[r, 1]];
                let fm = mlp.predict(xm.view()).unwrap()[[r, 1]];
                assert!(rel_err(g[[r, c]], (fp - fm) / (2.0 * h)) < 1e-6);
            }
        }
    }
}

type CriticBatch = (Mlp<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Vec<f64>);

fn critic_batch(seed: u64) -> CriticBatch {
    let mut rng = rng_from_seed(seed);
    let critic = Mlp::<f64>::new(&[17, 12, 12, 12, 1], Activation::LeakyRelu(0.2), Activation::Linear, &mut rng);
    let real = normal_matrix::<f64, _>(5, 14, &mut rng);
    let fake = normal_matrix::<f64, _>(5, 14, &mut rng);
    let y = normal_matrix::<f64, _>(5, 3, &mut rng);
    let eps: Vec<f64> = (0..5).map(|_| rng.random()).collect();
    (critic, real, fake, y, eps)
}

#[test]
fn gradient_penalty_parameter_gradients_match_finite_differences() {
    for seed in 0..10 {
        let (critic, real, fake, y, eps) = critic_batch(100 + seed);
        let (value, grads) = gradient_penalty_grads(&critic, &real, &fake, &y, &eps, 10.0).unwrap();
        let direct = gradient_penalty(&critic, &real, &fake, &y, &eps, 10.0).unwrap();
        assert!((value - direct).abs() < 1e-12);
        let err = check_params(&critic, &grads, 1e-6, |m| {
            gradient_penalty(m, &real, &fake, &y, &eps, 10.0).unwrap()
        });
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn critic_loss_gradients_match_finite_differences() {
    let (critic, real, fake, y, eps) = critic_batch(7);
    let (_, grads) = critic_loss_grads(&critic, &real, &fake, &y, &eps, 10.0).unwrap();
    let err = check_params(&critic, &grads, 1e-6, |m| {
        critic_loss_grads(m, &real, &fake, &y, &eps, 10.0).unwrap().0
    });
    assert!(err < 1e-3, "relative error {err:e}");
}

#[test]
fn flow_matching_loss_gradients_match_finite_differences() {
    let mut rng = rng_from_seed(21);
    let config = CfmConfig {
        hidden_width: 8,
        hidden_layers: 2,
        ..CfmConfig::default()
    };
    let mlp = Mlp::<f64>::new(&[FIELD_INPUT, 8, 8, 6], Activation::Selu, Activation::Linear, &mut rng);
    let net = VectorFieldNet::from_mlp(mlp, LabelScaler::identity(), config.clone()).unwrap();
    let x1 = normal_matrix::<f64, _>(4, 6, &mut rng);
    let x0 = normal_matrix::<f64, _>(4, 6, &mut rng);
    let y = normal_matrix::<f64, _>(4, 3, &mut rng);
    let t: Vec<f64> = (0..4).map(|_| rng.random()).collect();
    let (value, grads) = net.loss_and_grads(x1.view(), y.view(), x0.view(), &t).unwrap();
    assert!((value - net.loss_with(x1.view(), y.view(), x0.view(), &t).unwrap()).abs() < 1e-12);
    let err = check_params(&net.mlp, &grads, 1e-6, |m| {
        let n = VectorFieldNet::from_mlp(m.clone(), LabelScaler::identity(), config.clone()).unwrap();
        n.loss_with(x1.view(), y.view(), x0.view(), &t).unwrap()
    });
    assert!(err < 1e-4, "relative error {err:e}");
}

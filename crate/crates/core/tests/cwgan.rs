use invbench::cwgan::{
    critic_loss, encode_designs, generator_loss, gradient_penalty, new_critic, train_cwgan, Generator, GpConfig,
    ENCODING_DIM,
};
use invbench::problem::{make_dataset, AnalyticModel};
use invbench::seed::rng_from_seed;
use invbench::solver::{normal_matrix, LabelScaler};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn small_config() -> GpConfig {
    GpConfig {
        generator_layers: 2,
        generator_width: 32,
        critic_layers: 2,
        critic_width: 32,
        generator_updates: 60,
        val_every: 20,
        batch_size: Some(32),
        ..GpConfig::default()
    }
}

fn inputs(seed: u64, n: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    let real = encode_designs(&make_dataset(n, 0.0, seed).unwrap().designs);
    let fake = normal_matrix::<f64, _>(n, ENCODING_DIM, &mut rng);
    let y = normal_matrix::<f64, _>(n, 3, &mut rng);
    let eps = (0..n).map(|_| rng.random()).collect();
    (real, fake, y, eps)
}

#[test]
fn constant_critic_gives_minus_its_value_to_the_generator() {
    let config = small_config();
    let mut rng = rng_from_seed(1);
    let mut critic = new_critic::<f64, _>(&config, &mut rng);
    critic.zero_output_layer();
    critic.params_mut().last_mut().unwrap().fill(0.75);
    let generator = Generator::<f64>::new(config.clone(), LabelScaler::identity(), &mut rng);
    let z = normal_matrix::<f64, _>(10, config.latent_dim, &mut rng);
    let y = normal_matrix::<f64, _>(10, 3, &mut rng);
    assert_eq!(generator_loss(&critic, &generator, &z, &y).unwrap(), -0.75);
}

#[test]
fn generator_loss_depends_on_generator_weights() {
    let config = small_config();
    let mut rng = rng_from_seed(2);
    let critic = new_critic::<f64, _>(&config, &mut rng);
    let generator = Generator::<f64>::new(config.clone(), LabelScaler::identity(), &mut rng);
    let z = normal_matrix::<f64, _>(16, config.latent_dim, &mut rng);
    let y = normal_matrix::<f64, _>(16, 3, &mut rng);
    let base = generator_loss(&critic, &generator, &z, &y).unwrap();
    let mut moved = generator.clone();
    for p in moved.mlp.params_mut() {
        p.mapv_inplace(|v| v + 1e-3);
    }
    assert_ne!(generator_loss(&critic, &moved, &z, &y).unwrap(), base);
}

#[test]
fn training_schedule_and_retained_generator() {
    let data = make_dataset(200, 0.0, 3).unwrap();
    let validation = make_dataset(40, 0.0, 4).unwrap();
    let config = small_config();
    let run = train_cwgan::<f64, _>(&data, &validation, &AnalyticModel, &config, 5).unwrap();
    assert_eq!(run.generator_updates, 60);
    assert_eq!(run.critic_updates, 5 * run.generator_updates);
    assert_eq!(run.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![20, 40, 60]);
    assert!(run.log.iter().all(|r| r.penalty >= 0.0));
    let logged_min = run.log.iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
    assert!(run.best_val_mse <= logged_min);
    if run.best_step > 0 {
        let row = run.log.iter().find(|r| r.step == run.best_step).unwrap();
        assert_eq!(row.val_mse, run.best_val_mse);
    }

    let again = train_cwgan::<f64, _>(&data, &validation, &AnalyticModel, &config, 5).unwrap();
    assert_eq!(again.log, run.log);
    let probe = normal_matrix::<f64, _>(5, config.latent_dim, &mut rng_from_seed(9));
    let y = normal_matrix::<f64, _>(5, 3, &mut rng_from_seed(10));
    assert_eq!(
        again.generator.sample(probe.view(), y.view()).unwrap(),
        run.generator.sample(probe.view(), y.view()).unwrap()
    );
    let other = train_cwgan::<f64, _>(&data, &validation, &AnalyticModel, &config, 6).unwrap();
    assert_ne!(other.log, run.log);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn penalty_is_non_negative(seed in 0u64..1000, lambda in 0.0f64..50.0) {
        let config = small_config();
        let critic = new_critic::<f64, _>(&config, &mut rng_from_seed(seed));
        let (real, fake, y, eps) = inputs(seed, 8);
        prop_assert!(gradient_penalty(&critic, &real, &fake, &y, &eps, lambda).unwrap() >= 0.0);
    }

    #[test]
    fn wasserstein_term_is_antisymmetric(seed in 0u64..1000) {
        let config = small_config();
        let critic = new_critic::<f64, _>(&config, &mut rng_from_seed(seed));
        let (real, fake, y, eps) = inputs(seed, 8);
        let ab = critic_loss(&critic, &real, &fake, &y, &eps, 10.0).unwrap().wasserstein;
        let ba = critic_loss(&critic, &fake, &real, &y, &eps, 10.0).unwrap().wasserstein;
        prop_assert!((ab + ba).abs() < 1e-12);
    }
}

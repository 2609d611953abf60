//! Federation identities: degenerate single-client equivalence, the
//! FedAvg/gradient-linearity identity, poisoning contracts and determinism.

use psr_core::attack::{AttackConfig, AttackMethod};
use psr_core::data::{generate_synthetic, DataSet};
use psr_core::dp::PrivacySpec;
use psr_core::fed::{
    fedavg, local_train, poison_client_data, run_federation, run_federation_with_shards,
    FederationConfig, LocalTrainSpec, TrainSettings, TrainingMode,
};
use psr_core::nn::{micro_resnet_9, Classifier, Model, SgdOptimizer};

fn toy_data(n_per_class: usize, seed: u64) -> DataSet {
    generate_synthetic(4, n_per_class, 10, 0.25, seed).unwrap()
}

fn toy_model(seed: u64) -> Model {
    micro_resnet_9((1, 10, 10), 4, (4, 8), seed).unwrap()
}

fn settings() -> TrainSettings {
    TrainSettings { lr: 0.05, momentum: 0.9, batch_size: 16 }
}

#[test]
fn single_client_federation_matches_centralized_training() {
    let data = toy_data(10, 1);
    let model0 = toy_model(2);
    let cfg = FederationConfig {
        n_clients: 1,
        rounds: 3,
        local_epochs: 1,
        seed: 77,
        ..Default::default()
    };
    let fed = run_federation(&cfg, &settings(), None, None, &model0, &data, None).unwrap();

    // centralized reference: the same per-round local training loop
    let spec = LocalTrainSpec {
        mode: TrainingMode::Standard,
        epochs: 1,
        settings: &settings(),
        dp: None,
        attack: None,
        adv_fraction: 0.0,
    };
    let mut central = model0.clone();
    for round in 0..3u64 {
        central = local_train(&central, &data, &spec, 77, 0, round).unwrap().model;
    }
    assert_eq!(fed.model.flat_params(), central.flat_params(), "trajectories must be bit-identical");
}

#[test]
fn two_identical_clients_full_batch_equals_centralized_step() {
    let data = toy_data(8, 3);
    let model0 = toy_model(4);
    let s = TrainSettings { lr: 0.1, momentum: 0.0, batch_size: data.len() };
    let cfg = FederationConfig {
        n_clients: 2,
        rounds: 1,
        local_epochs: 1,
        seed: 5,
        ..Default::default()
    };
    let fed = run_federation_with_shards(
        &cfg,
        &s,
        None,
        None,
        &model0,
        vec![data.clone(), data.clone()],
        None,
    )
    .unwrap();

    // centralized full-batch sgd step on the same data
    let (_, grad) = model0.loss_and_grads(&data.images, &data.labels).unwrap();
    let mut central = model0.clone();
    let mut opt = SgdOptimizer::new(0.1, 0.0, central.n_params()).unwrap();
    opt.step(&mut central, &grad).unwrap();

    let fed_params = fed.model.flat_params();
    let central_params = central.flat_params();
    let max_diff = fed_params
        .iter()
        .zip(&central_params)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff <= 1e-6, "aggregate differs from the centralized step by {max_diff}");
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let data = toy_data(4, 5);
    let model = toy_model(6);
    let spec = LocalTrainSpec {
        mode: TrainingMode::Standard,
        epochs: 0,
        settings: &settings(),
        dp: None,
        attack: None,
        adv_fraction: 0.0,
    };
    let out = local_train(&model, &data, &spec, 1, 0, 0).unwrap();
    assert_eq!(out.model.flat_params(), model.flat_params());
    assert_eq!(out.noisy_steps, 0);
}

#[test]
fn adversarial_mode_with_zero_fraction_equals_standard() {
    let data = toy_data(6, 7);
    let model = toy_model(8);
    let atk = AttackConfig::new(AttackMethod::Pgd).with_seed(3);
    let std_spec = LocalTrainSpec {
        mode: TrainingMode::Standard,
        epochs: 2,
        settings: &settings(),
        dp: None,
        attack: None,
        adv_fraction: 0.0,
    };
    let adv_spec = LocalTrainSpec {
        mode: TrainingMode::Adversarial,
        epochs: 2,
        settings: &settings(),
        dp: None,
        attack: Some(&atk),
        adv_fraction: 0.0,
    };
    let a = local_train(&model, &data, &std_spec, 9, 0, 0).unwrap();
    let b = local_train(&model, &data, &adv_spec, 9, 0, 0).unwrap();
    assert_eq!(a.model.flat_params(), b.model.flat_params());
}

#[test]
fn adversarial_training_changes_the_trajectory() {
    let data = toy_data(6, 7);
    let model = toy_model(8);
    let atk = AttackConfig::new(AttackMethod::Fgsm).with_seed(3);
    let adv_spec = LocalTrainSpec {
        mode: TrainingMode::Adversarial,
        epochs: 1,
        settings: &settings(),
        dp: None,
        attack: Some(&atk),
        adv_fraction: 0.5,
    };
    let std_spec = LocalTrainSpec { mode: TrainingMode::Standard, attack: None, ..adv_spec.clone() };
    let a = local_train(&model, &data, &adv_spec, 9, 0, 0).unwrap();
    let b = local_train(&model, &data, &std_spec, 9, 0, 0).unwrap();
    assert_ne!(a.model.flat_params(), b.model.flat_params());
}

#[test]
fn dp_training_accounts_every_noisy_step() {
    let data = toy_data(10, 9);
    let model0 = toy_model(10);
    let dp = PrivacySpec {
        clip_norm: 1.0,
        noise_multiplier: 1.2,
        delta: 1e-4,
        sampling_rate: 0.25,
        target_epsilon: None,
    };
    let cfg = FederationConfig {
        n_clients: 2,
        rounds: 2,
        local_epochs: 1,
        mode: TrainingMode::Dp,
        seed: 11,
        ..Default::default()
    };
    let out =
        run_federation(&cfg, &settings(), Some(&dp), None, &model0, &data, Some(&data)).unwrap();
    let acc = out.accountant.expect("dp run has an accountant");
    // steps_per_epoch = round(1/q) = 4; 2 rounds x 2 clients x 4 steps
    assert_eq!(acc.steps, 16);
    // epsilon grows monotonically over rounds
    let eps: Vec<f64> = out.rounds.iter().map(|r| r.epsilon.unwrap()).collect();
    assert!(eps.windows(2).all(|w| w[1] >= w[0]), "epsilon must not decrease: {eps:?}");
    assert!(eps[0] > 0.0);
}

#[test]
fn poisoning_counts_and_labels_follow_the_contract() {
    let data = toy_data(125, 13); // 500 samples
    let generator = toy_model(14);
    let atk = AttackConfig { eps: 0.1, step_size: 0.05, ..AttackConfig::new(AttackMethod::Pgd).with_seed(21) };
    let poisoned = poison_client_data(&data, &generator, &atk, 0.4).unwrap();
    let mut changed = 0;
    for i in 0..data.len() {
        if poisoned.images.sample(i) != data.images.sample(i) {
            changed += 1;
            assert_eq!(
                poisoned.labels[i],
                generator.predict(poisoned.images.sample(i)).unwrap(),
                "poisoned label must be the generator's prediction on the perturbed input"
            );
        }
    }
    assert_eq!(changed, 200, "0.4 of 500 samples");

    let untouched = poison_client_data(&data, &generator, &atk, 0.0).unwrap();
    assert_eq!(untouched.images.data(), data.images.data());
}

#[test]
fn adversary_with_zero_poison_matches_the_benign_run_bit_exactly() {
    let data = toy_data(10, 15);
    let model0 = toy_model(16);
    let atk = AttackConfig::new(AttackMethod::Pgd).with_seed(7);
    let benign = FederationConfig { n_clients: 2, rounds: 2, seed: 3, ..Default::default() };
    let with_adv = FederationConfig {
        adversary_id: Some(1),
        poison_fraction: 0.0,
        ..benign.clone()
    };
    let a = run_federation(&benign, &settings(), None, Some(&atk), &model0, &data, Some(&data))
        .unwrap();
    let b = run_federation(&with_adv, &settings(), None, Some(&atk), &model0, &data, Some(&data))
        .unwrap();
    assert_eq!(a.model.flat_params(), b.model.flat_params());
    for (ra, rb) in a.rounds.iter().zip(&b.rounds) {
        assert_eq!(ra.client_losses, rb.client_losses);
        assert_eq!(ra.clean_acc, rb.clean_acc);
    }
}

#[test]
fn federation_is_deterministic_under_a_seed() {
    let data = toy_data(10, 17);
    let model0 = toy_model(18);
    let atk = AttackConfig::new(AttackMethod::Pgd).with_seed(7);
    let cfg = FederationConfig {
        n_clients: 2,
        rounds: 2,
        adversary_id: Some(0),
        poison_fraction: 0.2,
        seed: 9,
        ..Default::default()
    };
    let a = run_federation(&cfg, &settings(), None, Some(&atk), &model0, &data, None).unwrap();
    let b = run_federation(&cfg, &settings(), None, Some(&atk), &model0, &data, None).unwrap();
    assert_eq!(a.model.flat_params(), b.model.flat_params());
}

#[test]
fn fedavg_weighted_mean_identity_on_flat_vectors() {
    // sanity on top of the unit tests: three clients, mixed sizes
    let got = fedavg(
        &[vec![1.0, 0.0], vec![2.0, 2.0], vec![4.0, -2.0]],
        &[100, 200, 100],
    )
    .unwrap();
    assert_eq!(got, vec![2.25, 0.5]);
}

#[test]
fn round_log_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rounds.csv");
    let data = toy_data(6, 19);
    let model0 = toy_model(20);
    let cfg = FederationConfig { n_clients: 2, rounds: 2, seed: 1, ..Default::default() };
    let out = run_federation(&cfg, &settings(), None, None, &model0, &data, Some(&data)).unwrap();
    psr_core::fed::write_round_log_csv(&path, &out.rounds).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "round,client_0_loss,client_1_loss,clean_acc,epsilon");
    assert_eq!(lines.count(), 2);
}

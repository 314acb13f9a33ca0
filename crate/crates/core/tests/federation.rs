use fedflat::autodiff::ModelObjective;
use fedflat::data::{dirichlet_partition, synth_train_test, PartitionSpec, SynthSpec, DEFAULT_SPREAD};
use fedflat::federation::{
    evaluate, keyed_rng, run_round, sample_clients, Augmentation, ClientConfig, FedConfig, FedEnv, ServerState,
    STREAM_CLIENT,
};
use fedflat::models::{init_params, mlp};
use fedflat::optim::{sgd_objective_step, SgdConfig, SgdState};
use rand::seq::SliceRandom;

fn spec(seed: u64) -> SynthSpec {
    SynthSpec {
        num_classes: 4,
        per_class: 15,
        input_dim: 5,
        spread: DEFAULT_SPREAD,
        seed,
    }
}

#[test]
fn single_client_federation_is_centralized_sgd() {
    let (train, _) = synth_train_test(&spec(2), 5).unwrap();
    let model = mlp(&[5, 6, 4]).unwrap();
    let shards = dirichlet_partition(
        &train,
        &PartitionSpec {
            num_clients: 1,
            alpha: 1.0,
            seed: 2,
        },
    )
    .unwrap();
    let sgd = SgdConfig {
        lr: 0.1,
        momentum: 0.0,
        weight_decay: 1e-3,
    };
    let cfg = FedConfig {
        num_clients: 1,
        clients_per_round: 1,
        client: ClientConfig {
            sgd,
            sam: None,
            batch_size: 7,
            epochs: 2,
            augment: Augmentation::None,
        },
        server_momentum: 0.0,
        server_lr: 1.0,
        swa: None,
        seed: 11,
        parallel: false,
    };
    let env = FedEnv {
        model: &model,
        train: &train,
        shards: &shards,
        test: None,
    };
    let theta0 = init_params(&model, 3);
    let mut server = ServerState::new(theta0.clone());

    let mut central = theta0;
    let mut order = shards[0].indices.clone();
    for round in 0..6 {
        run_round(&mut server, &env, &cfg).unwrap();
        let mut rng = keyed_rng(11, round, 0, STREAM_CLIENT);
        let mut state = SgdState::new();
        for _ in 0..2 {
            order.shuffle(&mut rng);
            for chunk in order.chunks(7) {
                let batch = train.batch(chunk).unwrap();
                sgd_objective_step(&mut central, &ModelObjective::new(&model, &batch), &mut state, &sgd).unwrap();
            }
        }
        order = shards[0].indices.clone();
        assert_eq!(server.theta, central, "diverged at round {round}");
    }
}

#[test]
fn client_sampling_frequencies_are_binomial() {
    let (k, m, rounds) = (20usize, 5usize, 4000usize);
    let mut counts = vec![0usize; k];
    for r in 0..rounds {
        let ids = sample_clients(k, m, r, 9).unwrap();
        assert_eq!(ids.len(), m);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        for id in ids {
            counts[id] += 1;
        }
    }
    let p = m as f64 / k as f64;
    let mean = rounds as f64 * p;
    let sd = (rounds as f64 * p * (1.0 - p)).sqrt();
    for (id, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64 - mean).abs() < 5.0 * sd,
            "client {id} drawn {c} times, expected {mean}±{sd}"
        );
    }
}

#[test]
fn zero_model_scores_chance() {
    let (_, test) = synth_train_test(&spec(5), 25).unwrap();
    let model = mlp(&[5, 6, 4]).unwrap();
    let zero = init_params(&model, 0).zeros_like();
    let r = evaluate(&zero, &model, &test).unwrap();
    assert!((r.accuracy - 0.25).abs() < 1e-12);
    assert!((r.loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn centralized_mlp_fits_default_synthetic_data() {
    let s = SynthSpec {
        num_classes: 10,
        per_class: 100,
        input_dim: 16,
        spread: DEFAULT_SPREAD,
        seed: 0,
    };
    let (train, _) = synth_train_test(&s, 10).unwrap();
    let model = mlp(&[16, 32, 10]).unwrap();
    let mut p = init_params(&model, 0);
    let sgd = SgdConfig {
        lr: 0.05,
        momentum: 0.0,
        weight_decay: 0.0,
    };
    let mut state = SgdState::new();
    let all: Vec<usize> = (0..train.len()).collect();
    let mut best: f64 = 0.0;
    for _ in 0..200 {
        for chunk in all.chunks(32) {
            let b = train.batch(chunk).unwrap();
            sgd_objective_step(&mut p, &ModelObjective::new(&model, &b), &mut state, &sgd).unwrap();
        }
        best = best.max(evaluate(&p, &model, &train).unwrap().accuracy);
        if best >= 0.95 {
            break;
        }
    }
    assert!(best >= 0.95, "train accuracy {best}");
}

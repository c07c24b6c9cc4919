mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tierfl::cost::{Category, Tier};
use tierfl::fedsim::{
    classifier_fedavg, full_fedavg, run, run_in, sample_clients, Environment, StrategyKind,
};
use tierfl::nn::{Activation, Network};
use tierfl::partition::ModelPartition;

fn net(seed: u64, input: usize, widths: &[usize]) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::init(input, widths, Activation::Relu, Activation::Identity, &mut rng)
}

#[test]
fn mean_of_identical_models_is_exact() {
    for k in 1..12 {
        let m = net(k as u64, 9, &[7, 5, 3]);
        let avg = classifier_fedavg(&vec![m.clone(); k]).unwrap();
        assert_eq!(avg.flatten(), m.flatten());
        let p = ModelPartition::new(net(1, 4, &[9]), m.clone()).unwrap();
        let full = full_fedavg(&vec![p.clone(); k]).unwrap();
        assert_eq!(full, p);
    }
}

#[test]
fn joint_average_equals_independent_parts() {
    let parts: Vec<ModelPartition> = (0..5)
        .map(|s| ModelPartition::new(net(s, 6, &[8, 4]), net(100 + s, 4, &[5, 3])).unwrap())
        .collect();
    let joint = full_fedavg(&parts).unwrap();
    let enc: Vec<Network> = parts.iter().map(|p| p.encoder.clone()).collect();
    let cls: Vec<Network> = parts.iter().map(|p| p.classifier.clone()).collect();
    assert_eq!(joint.encoder, classifier_fedavg(&enc).unwrap());
    assert_eq!(joint.classifier, classifier_fedavg(&cls).unwrap());
}

#[test]
fn mismatched_shapes_refuse_to_average() {
    assert!(classifier_fedavg(&[net(0, 3, &[2]), net(1, 4, &[2])]).is_err());
    assert!(classifier_fedavg(&[]).is_err());
}

#[test]
fn client_sampling_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a, fraction) = (20, 0.25);
    let mut counts = [0usize; 20];
    for _ in 0..10_000 {
        let s = sample_clients(a, fraction, &mut rng).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        for c in s {
            counts[c] += 1;
        }
    }
    for c in counts {
        assert!((c as f64 / 1e4 - 0.25).abs() < 0.02, "{c}");
    }
    assert!(sample_clients(a, 0.0, &mut rng).is_err());
}

#[test]
fn always_offline_clients_change_nothing() {
    let mut cfg = common::small_config();
    cfg.devices.ucd.disconnect_prob = 1.0;
    for s in [StrategyKind::Centaur, StrategyKind::UcdOnly, StrategyKind::ApOnly] {
        let env = Environment::build(&cfg, 1).unwrap();
        let r = run_in(s, &cfg, &env, 1).unwrap();
        assert!(r.metrics.iter().all(|m| m.participants == 0 && m.online == 0));
        assert!(r.ledger.is_empty(), "{s}");
        assert_eq!(r.final_model, env.initial, "{s}");
    }
}

#[test]
fn cold_queues_never_transmit_or_touch_the_encoder() {
    let mut cfg = common::small_config();
    cfg.selection.warmup_min = 1_000_000;
    let env = Environment::build(&cfg, 2).unwrap();
    let r = run_in(StrategyKind::Centaur, &cfg, &env, 2).unwrap();
    assert!(r.metrics.iter().all(|m| m.uploaded_samples == 0));
    assert_eq!(r.final_model.encoder, env.initial.encoder);
    assert_eq!(r.encoder_train_macs, 0);
    assert_eq!(r.ledger.tier_total(Tier::Ap).macs, 0);
}

#[test]
fn runs_are_reproducible_and_worker_invariant() {
    let mut cfg = common::small_config();
    cfg.workers = 1;
    for s in [StrategyKind::Centaur, StrategyKind::UcdOnly, StrategyKind::ApOnly] {
        let a = run(s, &cfg, 5).unwrap();
        let mut par = cfg.clone();
        par.workers = 4;
        let b = run(s, &par, 5).unwrap();
        assert_eq!(a.metrics, b.metrics, "{s}");
        assert_eq!(a.ledger, b.ledger, "{s}");
        assert_eq!(a.final_model, b.final_model, "{s}");
    }
}

#[test]
fn strategy_cost_signatures() {
    let cfg = common::small_config();
    let centaur = run(StrategyKind::Centaur, &cfg, 3).unwrap();
    let ucd_only = run(StrategyKind::UcdOnly, &cfg, 3).unwrap();
    let ap_only = run(StrategyKind::ApOnly, &cfg, 3).unwrap();

    assert_eq!(ucd_only.ledger.tier_total(Tier::Ap).macs, 0);
    assert_eq!(ucd_only.encoder_train_macs, 0);
    assert_eq!(ucd_only.final_model.encoder, centaur_env_encoder(&cfg, 3));
    assert!(ucd_only.metrics.iter().all(|m| m.uploaded_samples == 0));

    let ap_ucd = ap_only.ledger.tier_total(Tier::Ucd);
    assert_eq!(ap_ucd.macs, 0);
    assert!(ap_ucd.bytes > 0);
    assert!(ap_only.ledger.total(None, Some(Tier::Ucd), Some(Category::CommDown)).is_zero());

    assert!(centaur.ledger.total(None, Some(Tier::Ucd), Some(Category::SelectionCompute)).macs > 0);
    assert!(ucd_only.ledger.total(None, Some(Tier::Ucd), Some(Category::SelectionCompute)).is_zero());
    for r in [&centaur, &ucd_only, &ap_only] {
        assert!(r.ledger.tier_total(Tier::Server).is_zero());
    }
}

fn centaur_env_encoder(cfg: &tierfl::config::ExperimentConfig, seed: u64) -> Network {
    Environment::build(cfg, seed).unwrap().initial.encoder
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_matches_flatten_average(k in 1usize..8, seed in any::<u64>(), w in 1usize..10) {
        let models: Vec<Network> = (0..k).map(|i| net(seed.wrapping_add(i as u64), 5, &[w, 3])).collect();
        let got = classifier_fedavg(&models).unwrap().flatten();
        let want = common::flatten_average(&models);
        for (g, e) in got.iter().zip(&want) {
            prop_assert!((g - e).abs() <= 1e-12 * e.abs().max(1e-12), "{} vs {}", g, e);
        }
    }
}

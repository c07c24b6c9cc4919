mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tierfl::datagen::{dirichlet_partition, make_blobs, max_class_share, split_online_extra};
use tierfl::nn::{loss_and_grad, sgd_step, Activation, Network};

fn assert_exact(parts: &[Vec<usize>], n: usize) {
    let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..n).collect::<Vec<_>>());
}

#[test]
fn partition_is_exact_over_seeds_and_alphas() {
    let data = make_blobs(10, 60, 4, 1.0, 0).unwrap();
    for seed in 0..10 {
        for alpha in [0.001, 0.1, 1.0, 1000.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts = dirichlet_partition(&data.labels, 10, 20, alpha, &mut rng).unwrap();
            assert_eq!(parts.len(), 20);
            assert_exact(&parts, data.len());
        }
    }
}

#[test]
fn median_max_class_share_falls_as_alpha_grows() {
    let data = make_blobs(10, 200, 4, 1.0, 1).unwrap();
    let mut medians = Vec::new();
    for alpha in [0.001, 0.1, 1.0, 1000.0] {
        let mut shares = Vec::new();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts = dirichlet_partition(&data.labels, 10, 20, alpha, &mut rng).unwrap();
            shares.extend(parts.iter().filter_map(|p| max_class_share(&data.labels, 10, p)));
        }
        medians.push(common::median(shares));
    }
    for w in medians.windows(2) {
        assert!(w[1] <= w[0], "{medians:?}");
    }
    assert!(medians[0] > 0.9 && medians[3] < 0.3, "{medians:?}");
}

#[test]
fn split_shards_keep_parent_class_entropy_at_high_alpha() {
    let data = make_blobs(10, 200, 4, 1.0, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let parts = dirichlet_partition(&data.labels, 10, 20, 1000.0, &mut rng).unwrap();
    for p in &parts {
        let parent = common::entropy(&data.class_histogram(p));
        let s = split_online_extra(p, 0.5, &mut rng).unwrap();
        assert!(s.online.len().abs_diff(s.extra.len()) <= 1);
        for shard in [&s.online, &s.extra] {
            let h = common::entropy(&data.class_histogram(shard));
            assert!((h - parent).abs() <= 0.1 * parent, "{h} vs {parent}");
        }
    }
}

#[test]
fn linear_probe_separates_two_far_blobs() {
    let data = make_blobs(2, 100, 8, 0.1, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = Network::init(8, &[2], Activation::Identity, Activation::Identity, &mut rng);
    for _ in 0..300 {
        let g = loss_and_grad(&net, &data.features, &data.labels).unwrap();
        net = sgd_step(&net, &g.grads, 0.5).unwrap();
    }
    assert_eq!(net.accuracy(&data.features, &data.labels).unwrap(), 1.0);
}

#[test]
fn generation_and_partition_are_seeded() {
    let a = make_blobs(5, 20, 3, 1.0, 9).unwrap();
    let b = make_blobs(5, 20, 3, 1.0, 9).unwrap();
    assert_eq!(a.features, b.features);
    assert_eq!(a.labels, b.labels);
    assert_ne!(a.features, make_blobs(5, 20, 3, 1.0, 10).unwrap().features);
    let p = |s| dirichlet_partition(&a.labels, 5, 4, 0.5, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
    assert_eq!(p(3), p(3));
}

proptest! {
    #[test]
    fn partition_never_loses_or_duplicates(
        labels in prop::collection::vec(0usize..6, 0..300),
        clients in 1usize..30,
        alpha in prop::sample::select(vec![0.001, 0.01, 0.1, 0.5, 1.0, 10.0, 1000.0]),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = dirichlet_partition(&labels, 6, clients, alpha, &mut rng).unwrap();
        prop_assert_eq!(parts.len(), clients);
        let mut all: Vec<usize> = parts.into_iter().flatten().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_disjoint_cover(n in 0usize..200, fraction in 0.01f64..0.99, seed in any::<u64>()) {
        let idx: Vec<usize> = (0..n).map(|i| i * 3).collect();
        let s = split_online_extra(&idx, fraction, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(s.online.len(), (n as f64 * fraction).round() as usize);
        let mut all: Vec<usize> = s.online.iter().chain(&s.extra).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, idx);
    }
}

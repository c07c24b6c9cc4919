mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tierfl::nn::{forward, Tensor2D};
use tierfl::partition::{
    build_partition, count_params, select_classifier, standard_candidates, ClassifierCandidate,
    EncoderSpec, MemoryBudget, PartitionError, SelectionPolicy,
};

fn random_candidates(rng: &mut ChaCha8Rng) -> Vec<ClassifierCandidate> {
    let classes = rng.random_range(2..20);
    (0..rng.random_range(1..6))
        .map(|_| {
            let depth = rng.random_range(0..=2);
            let hidden = (0..depth).map(|_| rng.random_range(1..200)).collect();
            ClassifierCandidate::new(hidden, classes).unwrap()
        })
        .collect()
}

#[test]
fn classifier_family_sizes_at_width_64() {
    let sizes: Vec<usize> = standard_candidates(10)
        .iter()
        .map(|c| c.param_count(64))
        .collect();
    assert_eq!(sizes, vec![650, 4810, 9610]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for c in standard_candidates(10) {
        let net = c.build(64, &mut rng);
        let brute: usize = net
            .layers()
            .iter()
            .map(|l| l.weights().data().len() + l.bias().len())
            .sum();
        assert_eq!(count_params(&net), brute);
        assert_eq!(common::brute_param_count(&c, 64), brute);
    }
}

#[test]
fn selection_agrees_with_exhaustive_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let cands = random_candidates(&mut rng);
        let input = rng.random_range(1..128);
        let budget = MemoryBudget::new(rng.random_range(1..400_000), rng.random_range(1..9)).unwrap();
        for policy in [SelectionPolicy::SmallestFeasible, SelectionPolicy::LargestFeasible] {
            let got = select_classifier(&cands, input, &budget, policy);
            match common::brute_select(&cands, input, &budget, policy) {
                Some(i) => assert_eq!(got.unwrap(), cands[i]),
                None => assert!(matches!(got, Err(PartitionError::BudgetInfeasible { .. }))),
            }
        }
    }
}

#[test]
fn budgets_below_the_smallest_candidate_always_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let cands = random_candidates(&mut rng);
        let input = rng.random_range(1..64);
        let bpp = rng.random_range(1..9u64);
        let smallest = cands.iter().map(|c| common::brute_param_count(c, input)).min().unwrap() as u64;
        let available = rng.random_range(1..=smallest * bpp);
        let budget = MemoryBudget::new(available, bpp).unwrap();
        assert!(select_classifier(&cands, input, &budget, SelectionPolicy::LargestFeasible).is_err());
    }
    let one_byte = MemoryBudget::new(1, 4).unwrap();
    assert!(select_classifier(&standard_candidates(10), 64, &one_byte, SelectionPolicy::SmallestFeasible).is_err());
}

#[test]
fn built_classifier_is_rechecked_against_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = EncoderSpec { input_dim: 32, widths: vec![64] };
    let budget = MemoryBudget::new(4810 * 4 + 1, 4).unwrap();
    let chosen = select_classifier(&standard_candidates(10), 64, &budget, SelectionPolicy::LargestFeasible).unwrap();
    let p = build_partition(&enc, &chosen, &budget, &mut rng).unwrap();
    assert!((count_params(&p.classifier) as u64) * 4 < budget.available_bytes);
    assert_eq!(count_params(&p.classifier), 4810);
}

proptest! {
    #[test]
    fn composed_forward_equals_two_stage(seed in any::<u64>(), rows in 1usize..6, width in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderSpec { input_dim: 7, widths: vec![width, width] };
        let budget = MemoryBudget::new(u64::MAX, 4).unwrap();
        let p = build_partition(&enc, &ClassifierCandidate::new(vec![5], 3).unwrap(), &budget, &mut rng).unwrap();
        let x = Tensor2D::from_vec(rows, 7, (0..rows * 7).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let staged = forward(&p.classifier, &forward(&p.encoder, &x).unwrap().logits).unwrap().logits;
        prop_assert_eq!(forward(&p.compose(), &x).unwrap().logits, staged.clone());
        prop_assert_eq!(p.logits(&x).unwrap(), staged);
    }

    #[test]
    fn selection_never_violates_strict_budget(seed in any::<u64>(), avail in 1u64..100_000, bpp in 1u64..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands = random_candidates(&mut rng);
        let budget = MemoryBudget::new(avail, bpp).unwrap();
        if let Ok(c) = select_classifier(&cands, 16, &budget, SelectionPolicy::LargestFeasible) {
            prop_assert!((c.param_count(16) as u64) * bpp < avail);
        }
    }
}

use moe_rebasin::checks::{brute_force_lap, relative_deviation};
use moe_rebasin::io::{checkpoint_from_json, checkpoint_to_json, Checkpoint, Provenance};
use moe_rebasin::matching::{align_moe, solve_lap, MatchMethod};
use moe_rebasin::model::{MoEConfig, MoEParams};
use moe_rebasin::numerics::{stable_softmax, Matrix, RngStream};
use moe_rebasin::symmetry::{apply_group, plant_equivalent, random_group_element, Permutation};
use proptest::prelude::*;

fn config(variant: u8, experts: usize, dim: usize, hidden: usize) -> MoEConfig {
    match variant {
        0 => MoEConfig::dense(experts, dim, hidden),
        1 => MoEConfig::sparse(experts, 1 + experts / 2, dim, hidden),
        _ => MoEConfig::shared(1, experts, 1 + experts / 2, dim, hidden),
    }
}

fn model(seed: u64, variant: u8, experts: usize, dim: usize, hidden: usize) -> MoEParams {
    MoEParams::random(config(variant, experts, dim, hidden), &mut RngStream::new(seed), 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_ignores_shifts(z in prop::collection::vec(-50.0f64..50.0, 1..12), c in -1e3f64..1e3) {
        let p = stable_softmax(&z).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let q = stable_softmax(&shifted).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(relative_deviation(&p, &q) < 1e-9);
    }

    #[test]
    fn lap_matches_exhaustive_search(n in 1usize..7, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let cost = Matrix::from_fn(n, n, |_, _| rng.next_normal());
        let fast = solve_lap(&cost).unwrap();
        let slow = brute_force_lap(&cost);
        prop_assert!((fast.cost - slow.cost).abs() <= 1e-9 * slow.cost.abs().max(1.0));
    }

    #[test]
    fn group_law_holds(seed in any::<u64>(), experts in 2usize..6, dim in 1usize..5) {
        let mut rng = RngStream::new(seed);
        let p = model(rng.next_u64(), 0, experts, dim, 3);
        let g = random_group_element(experts, dim, &mut rng, 1.0);
        let h = random_group_element(experts, dim, &mut rng, 1.0);
        let twice = apply_group(&apply_group(&p, &g).unwrap(), &h).unwrap();
        let once = apply_group(&p, &g.then(&h)).unwrap();
        prop_assert!(relative_deviation(&twice.to_flat(), &once.to_flat()) < 1e-12);
        let back = apply_group(&apply_group(&p, &g).unwrap(), &g.inverse()).unwrap();
        prop_assert!(relative_deviation(&back.to_flat(), &p.to_flat()) < 1e-12);
    }

    #[test]
    fn dense_output_is_group_invariant(seed in any::<u64>(), experts in 1usize..6, dim in 1usize..6) {
        let mut rng = RngStream::new(seed);
        let p = model(rng.next_u64(), 0, experts, dim, 4);
        let g = random_group_element(experts, dim, &mut rng, 2.0);
        let q = apply_group(&p, &g).unwrap();
        let x = rng.normals(dim, 1.0);
        prop_assert!(relative_deviation(&p.forward(&x).unwrap(), &q.forward(&x).unwrap()) < 1e-9);
    }

    #[test]
    fn planted_copies_are_recovered(seed in any::<u64>(), variant in 0u8..3, experts in 2usize..6) {
        let mut rng = RngStream::new(seed);
        let p = model(rng.next_u64(), variant, experts, 3, 5);
        let planted = plant_equivalent(&p, &mut rng, 1.0).unwrap();
        for method in MatchMethod::ALL {
            let result = align_moe(&p, &planted.params, method).unwrap();
            prop_assert_eq!(&result.tau, &planted.group.tau.inverse());
            let aligned = result.apply(&planted.params).unwrap();
            // only the translation remains, and it is the same for every gate
            let x = rng.normals(3, 1.0);
            prop_assert!(relative_deviation(&p.forward(&x).unwrap(), &aligned.forward(&x).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), variant in 0u8..3, experts in 1usize..5, backbone in any::<u64>()) {
        let experts = if variant == 0 { experts } else { experts + 1 };
        let p = model(seed, variant, experts, 2, 3);
        let ckpt = Checkpoint::new(p, backbone, Provenance::default());
        let back = checkpoint_from_json(&checkpoint_to_json(&ckpt)).unwrap();
        prop_assert_eq!(back, ckpt);
    }

    #[test]
    fn permutation_inverse_composes_to_identity(n in 1usize..10, seed in any::<u64>()) {
        let p = Permutation::random(n, &mut RngStream::new(seed));
        prop_assert!(p.compose(&p.inverse()).is_identity());
        prop_assert!(p.inverse().compose(&p).is_identity());
    }
}

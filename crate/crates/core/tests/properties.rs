mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::oracles::{brute_matrix, contrastive_oracle, random_batch, random_tensor, top_k_dates};
use omnifuse_core::encoders::{day_encoding, select_reconstruction_dates, AttentionTrace};
use omnifuse_core::fusion::{mask_tokens, MaskStrategy};
use omnifuse_core::objectives::{build_match_matrix, contrastive_loss, reconstruction_loss, Match, ReconTerm};
use omnifuse_core::tensor::Tensor;
use omnifuse_core::training::{derive_seed, f1_scores};

fn layout() -> impl Strategy<Value = (usize, Vec<usize>, u64)> {
    (2usize..=4, prop::collection::vec(1usize..=4, 1..=4), any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn match_matrix_is_symmetric_with_one_positive_per_other_modality((m, patches, seed) in layout()) {
        let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), m, &patches);
        let mm = build_match_matrix(&batch).unwrap();
        prop_assert_eq!(&mm.entries, &brute_matrix(&batch, false));
        let t = batch.len();
        for i in 0..t {
            prop_assert_eq!(mm.get(i, i), Match::Ignored);
            let positives = (0..t).filter(|&j| mm.get(i, j) == Match::Positive).count();
            prop_assert_eq!(positives, m - 1);
            for j in 0..t {
                prop_assert_eq!(mm.get(i, j), mm.get(j, i));
            }
        }
    }

    #[test]
    fn contrastive_loss_is_nonnegative_and_permutation_invariant(
        (m, patches, seed) in layout(),
        gamma in 0.05f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, m, &patches);
        let emb = random_tensor(&mut rng, &[batch.len(), 4], 1.0);
        let (loss, grad) = contrastive_loss(&emb, &build_match_matrix(&batch).unwrap(), gamma).unwrap();
        prop_assert!(loss >= 0.0 && grad.is_finite());
        assert_abs_diff_eq!(loss, contrastive_oracle(&emb, &batch, gamma, false), epsilon = 1e-9);

        let t = batch.len();
        let perm: Vec<usize> = (0..t).rev().collect();
        let mut shuffled = batch.clone();
        shuffled.indices = perm.iter().map(|&i| batch.indices[i].clone()).collect();
        shuffled.tile_partition = batch.tile_partition.iter().map(|r| t - r.end..t - r.start).collect();
        let rows: Vec<f64> = perm.iter().flat_map(|&i| emb.row(i).to_vec()).collect();
        let permuted = Tensor::from_vec(&[t, 4], rows);
        let again = contrastive_loss(&permuted, &build_match_matrix(&shuffled).unwrap(), gamma).unwrap().0;
        assert_abs_diff_eq!(loss, again, epsilon = 1e-9);
    }

    #[test]
    fn reconstruction_loss_vanishes_only_on_exact_match(values in prop::collection::vec(-3.0f64..3.0, 1..40), shift in 0.01f64..1.0) {
        let same = reconstruction_loss(&[ReconTerm { decoded: &values, target: &values, include: None }]).unwrap().0;
        prop_assert_eq!(same, 0.0);
        let moved: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let off = reconstruction_loss(&[ReconTerm { decoded: &moved, target: &values, include: None }]).unwrap().0;
        assert_abs_diff_eq!(off, shift * shift, epsilon = 1e-9);
    }

    #[test]
    fn date_selection_takes_the_top_valid_quarter(
        trace in prop::collection::vec(0u8..6, 1..64),
        invalid in prop::collection::vec(any::<bool>(), 64),
    ) {
        let l = trace.len();
        let mut valid: Vec<bool> = invalid[..l].iter().map(|b| !b).collect();
        valid[l - 1] = true;
        let values: Vec<f64> = trace.iter().map(|&v| f64::from(v)).collect();
        let got = select_reconstruction_dates(&AttentionTrace(values.clone()), &valid, 0.25).unwrap();
        let cand: Vec<usize> = (0..l).filter(|&i| valid[i]).collect();
        let k = (cand.len() as f64 * 0.25).ceil() as usize;
        let sub: Vec<f64> = cand.iter().map(|&i| values[i]).collect();
        let want: Vec<usize> = top_k_dates(&sub, k).into_iter().map(|j| cand[j]).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn day_encoding_is_bounded(day in 1u16..=365, half in 1usize..32) {
        let e = day_encoding(day, 2 * half).unwrap();
        prop_assert_eq!(e.len(), 2 * half);
        prop_assert!(e.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn random_mask_hides_the_requested_share((m, patches, seed) in layout(), ratio in 0.0f64..0.95) {
        let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), m, &patches);
        let mask = mask_tokens(&batch, ratio, MaskStrategy::Random, seed).unwrap();
        prop_assert!(mask.0.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(mask.0.iter().all(|&i| i < batch.len()));
        prop_assert_eq!(&mask, &mask_tokens(&batch, ratio, MaskStrategy::Random, seed).unwrap());
    }

    #[test]
    fn f1_scores_are_bounded(rows in prop::collection::vec((prop::collection::vec(any::<bool>(), 5), prop::collection::vec(any::<bool>(), 5)), 1..20)) {
        let pred: Vec<Vec<u8>> = rows.iter().map(|r| r.0.iter().map(|&b| u8::from(b)).collect()).collect();
        let truth: Vec<Vec<u8>> = rows.iter().map(|r| r.1.iter().map(|&b| u8::from(b)).collect()).collect();
        let r = f1_scores(&pred, &truth).unwrap();
        for v in r.per_class.iter().chain([&r.macro_f1, &r.weighted_f1, &r.micro_f1]) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        let perfect = f1_scores(&truth, &truth).unwrap();
        if truth.iter().flatten().any(|&v| v == 1) {
            assert_abs_diff_eq!(perfect.micro_f1, 1.0);
        }
    }

    #[test]
    fn derived_seeds_differ_across_parts(base in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        prop_assume!(a != b);
        prop_assert_ne!(derive_seed(base, &[1, a]), derive_seed(base, &[1, b]));
        prop_assert_ne!(derive_seed(base, &[a]), derive_seed(base, &[a, 0]));
    }
}

use commonfeat::mhscore::{check_mh_identity, mh_score, mh_maximum};
use commonfeat::preprocess::{quantize_alphabet, BitPattern};
use commonfeat::{
    build_b, check_lemma1, eigendecompose, estimate_distributions, features_from_spectrum, instances, Alphabet,
    DiscreteDataset, EstimateOptions, FeatureSet,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset_strategy() -> impl Strategy<Value = DiscreteDataset> {
    prop::collection::vec(2usize..5, 2..5).prop_flat_map(|dims| {
        let d = dims.len();
        let row = dims.iter().map(|&s| 0..s).collect::<Vec<_>>();
        prop::collection::vec(row, 1..60).prop_map(move |rows| {
            let names = (0..d).map(|i| format!("X{i}")).collect();
            let alphabets = dims.iter().map(|&s| Alphabet::indexed(s).unwrap()).collect();
            DiscreteDataset::new(names, alphabets, rows).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimates_are_consistent(ds in dataset_strategy(), alpha in prop_oneof![Just(0.0), 0.1f64..2.0]) {
        let opts = EstimateOptions { with_full_joint: true, smoothing_alpha: alpha, ..Default::default() };
        let dist = estimate_distributions(&ds, &opts).unwrap();
        dist.validate(1e-9).unwrap();
        let joint = dist.full_joint().unwrap();
        prop_assert!((joint.sum() - 1.0).abs() < 1e-12);
        for i in 0..dist.d() {
            let m = joint.marginalize(&[i]);
            for (a, b) in m.probs().iter().zip(dist.marginal(i)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_structure_on_dirichlet_joints(seed in any::<u64>(), dims in prop::collection::vec(2usize..5, 2..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = instances::dirichlet_joint(&mut rng, &dims, 0.7).unwrap();
        let b = build_b(&dist).unwrap();
        let spec = eigendecompose(&b).unwrap();
        let report = check_lemma1(&b, &spec, &dist);
        prop_assert!(report.passed(), "{:?}", report);
        prop_assert!(spec.reconstruction_error(&b) < 1e-10);
        let k = spec.m() - spec.d();
        let fs = features_from_spectrum(&spec, &dist, k).unwrap();
        prop_assert!(fs.check(&dist).passed());
    }

    #[test]
    fn mh_identity_and_bound(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = instances::dirichlet_joint(&mut rng, &[3, 2, 3], 1.0).unwrap();
        let tables: Vec<DMatrix<f64>> = dist
            .dims()
            .iter()
            .map(|&s| DMatrix::from_fn(s, k, |r, c| (seed as f64 + (r * 7 + c * 13) as f64).sin()))
            .collect();
        let fs = FeatureSet::for_dist(&dist, tables).unwrap();
        prop_assert!(check_mh_identity(&fs, &dist).unwrap() < 1e-9);
        prop_assert!(mh_score(&fs, &dist).unwrap() <= mh_maximum(&dist, k).unwrap() + 1e-9);
    }

    #[test]
    fn relabeling_preserves_spectrum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = instances::dirichlet_joint(&mut rng, &[3, 2, 4], 1.0).unwrap();
        let perm = dist.permute_symbols(&[vec![2, 0, 1], vec![1, 0], vec![3, 1, 0, 2]]).unwrap();
        let a = eigendecompose(&build_b(&dist).unwrap()).unwrap();
        let b = eigendecompose(&build_b(&perm).unwrap()).unwrap();
        prop_assert!((a.eigenvalues() - b.eigenvalues()).amax() < 1e-10);
    }

    #[test]
    fn quantization_invariants(
        bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 12), 1..200),
        radius in 0usize..6,
    ) {
        let vectors: Vec<BitPattern> = bits.iter().map(|b| BitPattern::from_bits(b)).collect();
        let q = quantize_alphabet(&vectors, radius).unwrap();
        prop_assert_eq!(&q, &quantize_alphabet(&vectors, radius).unwrap());
        for (v, &c) in vectors.iter().zip(&q.codes) {
            prop_assert!(q.representatives[c].hamming(v) <= radius);
        }
        // representatives are pairwise farther apart than the radius
        for (a, ra) in q.representatives.iter().enumerate() {
            for rb in &q.representatives[a + 1..] {
                prop_assert!(ra.hamming(rb) > radius);
            }
        }
        let distinct: std::collections::HashSet<_> = vectors.iter().collect();
        prop_assert!(q.representatives.len() <= distinct.len());
        if radius == 0 {
            prop_assert_eq!(q.representatives.len(), distinct.len());
        }
    }
}

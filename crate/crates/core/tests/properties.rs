//! Property tests for the invariants that must hold on arbitrary inputs.

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use mdunet::backbone::softmax_forward;
use mdunet::datapipe::{
    average_annotations, one_hot_from_mask, pad_to_grid, relabel_consensus, unpad_map, CaseRecord,
    Modality,
};
use mdunet::losses::{
    branch_cross_loss, cross_entropy_loss, dice_loss, total_training_loss, LossWeights,
};
use mdunet::metrics::{staple_score, Provenance, SoftMap, ThresholdLadder};
use mdunet::trainer::{adapt_betas, warmup_lr, TrainSchedule};

fn arb_logits(k: usize, max: usize) -> impl Strategy<Value = Array3<f64>> {
    (1..=max, 1..=max).prop_flat_map(move |(h, w)| {
        proptest::collection::vec(-4.0..4.0f64, k * h * w)
            .prop_map(move |v| Array3::from_shape_vec((k, h, w), v).unwrap())
    })
}

fn arb_logits_fixed(k: usize, h: usize, w: usize) -> impl Strategy<Value = Array3<f64>> {
    proptest::collection::vec(-4.0..4.0f64, k * h * w)
        .prop_map(move |v| Array3::from_shape_vec((k, h, w), v).unwrap())
}

fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = Array2<u8>> {
    proptest::collection::vec(0..=1u8, h * w)
        .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn arb_soft(h: usize, w: usize) -> impl Strategy<Value = SoftMap> {
    proptest::collection::vec(0.0..=1.0f32, h * w).prop_map(move |v| {
        SoftMap::new(
            Array2::from_shape_vec((h, w), v).unwrap(),
            Provenance::BranchAverage,
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_pixels_sum_to_one(logits in arb_logits(3, 8)) {
        let u = softmax_forward(&logits);
        let (k, h, w) = u.dim();
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (0..k).map(|c| u[[c, y, x]]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                for c in 0..k {
                    prop_assert!((0.0..=1.0).contains(&u[[c, y, x]]));
                }
            }
        }
    }

    #[test]
    fn loss_ranges(logits in arb_logits_fixed(2, 6, 6), mask in arb_mask(6, 6)) {
        let pred = softmax_forward(&logits);
        let target = one_hot_from_mask(&mask, 2);
        let d = dice_loss(&pred, &target, &[1]).unwrap();
        prop_assert!((0.0..=1.0).contains(&d), "dice {d}");
        let ce = cross_entropy_loss(&pred, &target).unwrap();
        prop_assert!(ce >= 0.0);
    }

    #[test]
    fn staple_symmetry_and_identity(a in arb_soft(7, 5), b in arb_soft(7, 5)) {
        let ladder = ThresholdLadder::default();
        let ab = staple_score(&a, &b, &ladder).unwrap();
        let ba = staple_score(&b, &a, &ladder).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(staple_score(&a, &a, &ladder).unwrap(), 1.0);
    }

    #[test]
    fn staple_invariant_under_pixel_permutation(
        a in arb_soft(4, 6),
        b in arb_soft(4, 6),
        seed in 0..1000u64,
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let ladder = ThresholdLadder::default();
        let before = staple_score(&a, &b, &ladder).unwrap();
        let mut order: Vec<usize> = (0..24).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let permute = |m: &SoftMap| {
            let flat: Vec<f32> = m.values.iter().copied().collect();
            let vals: Vec<f32> = order.iter().map(|&i| flat[i]).collect();
            SoftMap::new(
                Array2::from_shape_vec((4, 6), vals).unwrap(),
                m.provenance,
            )
            .unwrap()
        };
        let after = staple_score(&permute(&a), &permute(&b), &ladder).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn consensus_nesting_and_average_consistency(
        masks in proptest::collection::vec(arb_mask(5, 7), 1..7)
    ) {
        let labels = relabel_consensus(&masks).unwrap();
        let n = masks.len();
        for k in 2..=n {
            let hi = labels.level(k);
            let lo = labels.level(k - 1);
            for (a, b) in hi.iter().zip(lo.iter()) {
                prop_assert!(a <= b);
            }
        }
        // sum of level indicators equals the agreement count
        let avg = average_annotations(&masks).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                let s: u32 = (1..=n).map(|k| labels.level(k)[[y, x]] as u32).sum();
                prop_assert_eq!(s as f32 / n as f32, avg.values[[y, x]]);
            }
        }
    }

    #[test]
    fn pad_then_unpad_is_identity(
        h in 1..40usize,
        w in 1..40usize,
        steps in 1..4usize,
    ) {
        let image = Array3::from_shape_fn((1, h, w), |(_, y, x)| (y * 31 + x) as f32 * 0.01);
        let mask = Array2::from_shape_fn((h, w), |(y, x)| ((y + x) % 2) as u8);
        let case = CaseRecord {
            case_id: "p".into(),
            modality: Modality::Mr,
            image: image.clone(),
            raters: vec![mask.clone()],
            crop: None,
        };
        let multiple = 1usize << steps;
        let (padded, crop) = pad_to_grid(&case, multiple);
        prop_assert_eq!(padded.image.dim().1 % multiple, 0);
        prop_assert_eq!(padded.image.dim().2 % multiple, 0);
        let plane = padded.image.index_axis(ndarray::Axis(0), 0).to_owned();
        let restored = unpad_map(&plane, &crop);
        let orig = image.index_axis(ndarray::Axis(0), 0).to_owned();
        prop_assert_eq!(restored, orig);
        prop_assert_eq!(unpad_map(&padded.raters[0], &crop), mask);
    }

    #[test]
    fn warmup_is_nondecreasing(base_lr in 1e-6..1e-1f64, warmup in 1..30usize) {
        let s = TrainSchedule { base_lr, warmup_epochs: warmup, ..Default::default() };
        let mut prev = 0.0;
        for epoch in 0..(warmup + 10) {
            let lr = warmup_lr(epoch, &s);
            prop_assert!(lr >= prev);
            prop_assert!(lr <= base_lr);
            prev = lr;
        }
        prop_assert_eq!(warmup_lr(warmup - 1, &s), base_lr);
    }

    #[test]
    fn adapted_betas_average_one_and_preserve_order(
        losses in proptest::collection::vec(0.01..10.0f64, 2..8)
    ) {
        let betas = adapt_betas(&losses).unwrap();
        let n = betas.len() as f64;
        prop_assert_eq!(betas.iter().sum::<f64>() / n, 1.0);
        for i in 0..losses.len() {
            for j in 0..losses.len() {
                if losses[i] < losses[j] {
                    prop_assert!(betas[i] <= betas[j]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn total_loss_is_permutation_invariant(
        masks in proptest::collection::vec(arb_mask(5, 5), 3),
        perm_seed in 0..100u64,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
        let preds: Vec<Array3<f64>> = (0..3)
            .map(|_| {
                let z = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(-2.0..2.0));
                softmax_forward(&z)
            })
            .collect();
        let targets: Vec<Array3<f64>> = masks.iter().map(|m| one_hot_from_mask(m, 2)).collect();
        let w = LossWeights {
            alpha: 0.8,
            betas: vec![0.5, 1.0, 1.5],
            cross_enabled: true,
        };
        let (total, report) = total_training_loss(&preds, &targets, &w).unwrap();

        // rotate branches, labels and betas together
        let rot = |v: &[Array3<f64>]| vec![v[1].clone(), v[2].clone(), v[0].clone()];
        let w_rot = LossWeights {
            alpha: w.alpha,
            betas: vec![w.betas[1], w.betas[2], w.betas[0]],
            cross_enabled: true,
        };
        let (total_rot, report_rot) = total_training_loss(
            &rot(&preds),
            &rot(&targets),
            &w_rot,
        ).unwrap();
        prop_assert!((total - total_rot).abs() < 1e-12);
        for i in 0..3 {
            let a = &report.per_branch[(i + 1) % 3];
            let b = &report_rot.per_branch[i];
            prop_assert!((a.loss - b.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn opening_the_cross_gate_never_decreases_branch_loss(
        seed in 0..500u64,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<Array3<f64>> = (0..3)
            .map(|_| {
                let z = Array3::from_shape_fn((2, 6, 6), |_| rng.gen_range(-3.0..3.0));
                softmax_forward(&z)
            })
            .collect();
        let targets: Vec<Array3<f64>> = (0..3)
            .map(|_| {
                let m = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0..=1u8));
                one_hot_from_mask(&m, 2)
            })
            .collect();
        let betas: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0)).collect();
        for i in 0..3 {
            let off = LossWeights { alpha: 1.0, betas: betas.clone(), cross_enabled: false };
            let on = LossWeights { cross_enabled: true, ..off.clone() };
            let l_off = branch_cross_loss(i, &preds, &targets, &off).unwrap().loss;
            let l_on = branch_cross_loss(i, &preds, &targets, &on).unwrap().loss;
            prop_assert!(l_on >= l_off);
        }
    }
}

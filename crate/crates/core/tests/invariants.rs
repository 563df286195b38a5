//! Property tests for cross-module invariants.

use ndarray::{Array3, Array4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxseg_core::augment::{sample_tta_transform, AugmentConfig};
use voxseg_core::inference::postprocess_components;
use voxseg_core::metrics::{dice, hd95};
use voxseg_core::volume::io::{load_labelmap, save_labelmap};
use voxseg_core::volume::regions_from_labels;
use voxseg_core::LabelMap;

fn label_volume(side: usize) -> impl Strategy<Value = Array3<u8>> {
    proptest::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(2u8), Just(4u8)], side * side * side)
        .prop_map(move |v| Array3::from_shape_vec((side, side, side), v).unwrap())
}

fn bool_volume(side: usize) -> impl Strategy<Value = Array3<bool>> {
    proptest::collection::vec(any::<bool>(), side * side * side)
        .prop_map(move |v| Array3::from_shape_vec((side, side, side), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// inverse(forward(labels)) is the identity for every sampled TTA
    /// transform and every label volume.
    #[test]
    fn tta_spatial_inverse_is_identity(labels in label_volume(6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tta = sample_tta_transform(&AugmentConfig::default(), &mut rng);
        let forwarded = tta.forward.apply_to_labels(&labels).unwrap();
        let back = tta.inverse.apply_to_labels(&forwarded).unwrap();
        prop_assert_eq!(back, labels);
    }

    /// Spatial TTA ops commute with region decomposition: regions of the
    /// transformed labels equal transformed regions of the originals.
    #[test]
    fn regions_commute_with_spatial_transforms(labels in label_volume(6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tta = sample_tta_transform(&AugmentConfig::default(), &mut rng);
        let lm = LabelMap::new(labels).unwrap();
        let transformed = LabelMap::new(tta.forward.apply_to_labels(lm.voxels()).unwrap()).unwrap();
        let regions_after = regions_from_labels(&transformed);
        let before = regions_from_labels(&lm);
        let wt_then_transform = tta
            .forward
            .apply_to_labels(&before.wt.mapv(|b| b as u8))
            .unwrap()
            .mapv(|v| v != 0);
        prop_assert_eq!(regions_after.wt, wt_then_transform);
    }

    /// Post-processing only removes foreground and keeps labels intact.
    #[test]
    fn postprocess_shrinks_foreground(labels in label_volume(8), threshold in 0.01f64..1.0) {
        let lm = LabelMap::new(labels).unwrap();
        let out = postprocess_components(&lm, threshold).unwrap();
        for (&o, &i) in out.voxels().iter().zip(lm.voxels().iter()) {
            prop_assert!(o == 0 || o == i);
        }
    }

    /// Dice is symmetric, bounded, and 1 exactly on equal sets.
    #[test]
    fn dice_symmetry_and_bounds(x in bool_volume(5), y in bool_volume(5)) {
        let d_xy = dice(&x, &y).unwrap();
        let d_yx = dice(&y, &x).unwrap();
        prop_assert_eq!(d_xy, d_yx);
        prop_assert!((0.0..=1.0).contains(&d_xy));
        prop_assert_eq!(dice(&x, &x).unwrap(), 1.0);
        if d_xy == 1.0 {
            prop_assert_eq!(x, y);
        }
    }

    /// hd95 is symmetric and zero iff applied to identical nonempty masks.
    #[test]
    fn hd95_symmetry(x in bool_volume(5), y in bool_volume(5)) {
        let d_xy = hd95(&x, &y, [1.0; 3]).unwrap();
        let d_yx = hd95(&y, &x, [1.0; 3]).unwrap();
        prop_assert_eq!(d_xy, d_yx);
        prop_assert!(d_xy >= 0.0);
        prop_assert_eq!(hd95(&x, &x, [1.0; 3]).unwrap(), 0.0);
    }

    /// Label files round-trip exactly.
    #[test]
    fn labelmap_file_round_trip(labels in label_volume(5)) {
        let dir = tempfile::tempdir().unwrap();
        let lm = LabelMap::new(labels).unwrap();
        let stem = dir.path().join("roundtrip");
        save_labelmap(&lm, &stem, [1.0, 2.0, 0.5]).unwrap();
        let loaded = load_labelmap(&stem).unwrap();
        prop_assert_eq!(loaded.voxels(), lm.voxels());
    }
}

/// Library-level pipeline smoke: phantom to evaluation without touching
/// the CLI.
#[test]
fn pipeline_end_to_end_library_level() {
    use voxseg_core::inference::{labels_from_softmax, predict_volume, TileConfig};
    use voxseg_core::losses::WeightMode;
    use voxseg_core::metrics::evaluate_case;
    use voxseg_core::nets::{NetConfig, Network, Variant};
    use voxseg_core::preprocess::normalize_case;
    use voxseg_core::trainer::{train, ScheduleEntry, TrainConfig, TrainData};
    use voxseg_core::uncertainty::{collect_ttd, entropy_map, mean_prediction, NetworkPredictor};
    use voxseg_core::volume::phantom::{make_phantom, PhantomSpec};

    let case = normalize_case(
        make_phantom(&PhantomSpec {
            shape: [24, 24, 24],
            n_tumors: 1,
            radii: [4.0, 2.5, 1.5],
            seed: 21,
            ..PhantomSpec::default()
        })
        .unwrap(),
    )
    .unwrap();
    let cfg = NetConfig {
        base_channels: 4,
        levels: 2,
        dropout_p: 0.3,
        ..NetConfig::toy(Variant::Vnet)
    };
    let mut net = Network::build(&cfg, 31).unwrap();
    let train_cfg = TrainConfig {
        max_epochs: 2,
        steps_per_epoch: 6,
        patch_schedule: vec![ScheduleEntry {
            fraction: 0.0,
            patch_size: 16,
            batch_size: 1,
        }],
        weight_mode: WeightMode::InverseVolume,
        val_patches_per_case: 2,
        augment: true,
        seed: 13,
        ..TrainConfig::default()
    };
    let data = TrainData {
        train: vec![case.clone()],
        val: vec![case.clone()],
    };
    train(&mut net, &data, &train_cfg).unwrap();

    let tile = TileConfig {
        patch_size: 16,
        overlap: 0.5,
    };
    let softmax = predict_volume(&net, &case, &tile).unwrap();
    let predicted = labels_from_softmax(&softmax);

    let predictor = NetworkPredictor { net: &net, tile };
    let stack = collect_ttd(&predictor, &case, 3, 0.5, 77).unwrap();
    let vote = mean_prediction(&stack);
    assert_eq!(vote.shape(), case.shape());
    let entropy = entropy_map(&stack).unwrap();

    let report = evaluate_case(
        &case.id,
        &regions_from_labels(&predicted),
        &regions_from_labels(case.labels.as_ref().unwrap()),
        &case.brain_mask,
        case.spacing,
        |_| Some(&entropy),
        5,
    )
    .unwrap();
    assert_eq!(report.regions.len(), 3);
    assert_eq!(report.uncertainty.len(), 3);
    for (_, s) in &report.regions {
        assert!((0.0..=1.0).contains(&s.dice));
        assert!(s.hd95 >= 0.0);
    }
    for (_, u) in &report.uncertainty {
        assert!((0.0..=3.0).contains(&u.integrated));
    }
}

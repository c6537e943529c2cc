//! Invariants of the data and metric layers over random inputs.

use proptest::prelude::*;
use rfhit::config::ThresholdGrid;
use rfhit::data::{argmax, hflip, one_hot, rot90, vflip, LabelMap, SliceSample};
use rfhit::metrics::{calibrate_thresholds, dice, hd95, BinVolume, Hd95, SegVolume};

fn label_map(max_side: usize, classes: u8) -> impl Strategy<Value = LabelMap> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
        prop::collection::vec(0..classes, h * w).prop_map(move |d| LabelMap::new(h, w, d).unwrap())
    })
}

fn bin_volume() -> impl Strategy<Value = (BinVolume, BinVolume)> {
    (1..5usize, 1..6usize, 1..6usize).prop_flat_map(|(d, h, w)| {
        let n = d * h * w;
        let v = move || prop::collection::vec(0..2u8, n).prop_map(move |x| BinVolume::new([d, h, w], x).unwrap());
        (v(), v())
    })
}

fn seg_volume(id: String, classes: usize, values: Vec<f32>) -> SegVolume {
    let n = values.len() / classes;
    SegVolume { volume_id: id, classes, shape: [1, 1, n], values, spacing: [1.0; 3] }
}

proptest! {
    #[test]
    fn one_hot_is_a_partition_of_unity_and_inverts_by_argmax(m in label_map(9, 5)) {
        let x = one_hot::<f32>(&m, 5).unwrap();
        let n = m.h * m.w;
        for i in 0..n {
            let col: Vec<f32> = (0..5).map(|c| x.data()[c * n + i]).collect();
            prop_assert!(col.iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(col.iter().sum::<f32>(), 1.0);
        }
        prop_assert_eq!(argmax(&x).unwrap(), m);
    }

    #[test]
    fn geometric_transforms_commute_with_one_hot(m in label_map(8, 4)) {
        // the image carries the one-hot channels, so image and label move together
        let s = SliceSample {
            image: one_hot(&m, 4).unwrap(),
            label: m,
            volume_id: "v".into(),
            slice_index: 0,
        };
        for t in [hflip(&s), vflip(&s), rot90(&s)] {
            prop_assert_eq!(one_hot::<f32>(&t.label, 4).unwrap(), t.image);
        }
    }

    #[test]
    fn dice_is_symmetric_and_hd95_of_a_mask_with_itself_is_zero((a, b) in bin_volume()) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        let own = hd95(&a, &a, [1.0, 0.7, 1.3]).unwrap();
        prop_assert_eq!(own, Hd95::Value(0.0));
        prop_assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), hd95(&b, &a, [1.0; 3]).unwrap());
    }

    #[test]
    fn raising_a_threshold_never_adds_voxels(
        values in prop::collection::vec(0.0f32..1.0, 2..40),
        lo in 0.0f64..1.0,
        step in 0.0f64..0.5,
    ) {
        let v = seg_volume("v".into(), 1, values);
        let low = v.decode(&[lo]).unwrap();
        let high = v.decode(&[lo + step]).unwrap();
        prop_assert!(low[0].data.iter().zip(&high[0].data).all(|(&l, &h)| h <= l));
    }

    #[test]
    fn calibration_ignores_volume_order(
        vols in prop::collection::vec(prop::collection::vec((0.0f32..1.0, any::<bool>()), 4..12), 1..5),
        rotate in 0usize..5,
    ) {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for (i, vol) in vols.iter().enumerate() {
            // two classes: the random values and their complement
            let p: Vec<f32> = vol.iter().map(|&(v, _)| 1.0 - v).chain(vol.iter().map(|&(v, _)| v)).collect();
            let g: Vec<f32> = vol.iter().map(|&(_, t)| f32::from(u8::from(!t))).chain(vol.iter().map(|&(_, t)| f32::from(u8::from(t)))).collect();
            preds.push(seg_volume(format!("v{i}"), 2, p));
            gts.push(seg_volume(format!("v{i}"), 2, g));
        }
        let grid = ThresholdGrid::default();
        let base = calibrate_thresholds(&preds, &gts, &grid).unwrap();
        let r = rotate % preds.len();
        preds.rotate_left(r);
        gts.reverse();
        prop_assert_eq!(calibrate_thresholds(&preds, &gts, &grid).unwrap(), base);
    }
}

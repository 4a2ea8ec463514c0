mod common;

use camlab::metrics::{self, BBox};
use camlab::Tensor;
use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(seed in any::<u64>()) {
        let mut g = rng(seed);
        let (a, b) = (random_box(&mut g), random_box(&mut g));
        let v = metrics::iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, metrics::iou(&b, &a));
        prop_assert_eq!(metrics::iou(&a, &a), 1.0);
        prop_assert!((v - iou_oracle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn boxes_cover_every_foreground_pixel(seed in any::<u64>(), tau in 0.0f64..1.0) {
        let mut g = rng(seed);
        let map = random_heatmap(&mut g);
        let boxes = metrics::heatmap_to_boxes(&map, tau).unwrap();
        let mut sorted = boxes.clone();
        sorted.sort_by_key(|b| (b.x0, b.y0, b.x1, b.y1));
        prop_assert_eq!(&sorted, &boxes_oracle(&map, tau));
        for w in boxes.windows(2) {
            prop_assert!(w[0].area() >= w[1].area());
        }
        for (p, &v) in map.data().iter().enumerate() {
            if v > 0.0 && v as f64 >= tau {
                let (x, y) = (p % SIDE, p / SIDE);
                prop_assert!(boxes.iter().any(|b| x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1));
            }
        }
    }

    #[test]
    fn localization_metrics_match_oracles(seed in any::<u64>(), n in 1usize..8) {
        let inst = random_instance(seed, n);
        prop_assert_eq!(
            metrics::gt_known_loc(&inst.boxes, &inst.maps).unwrap(),
            gt_known_oracle(&inst.boxes, &inst.maps)
        );
        let top1 = metrics::top1_loc(&inst.boxes, &inst.labels, &inst.predictions, &inst.maps).unwrap();
        prop_assert_eq!(top1, top1_loc_oracle(&inst.boxes, &inst.labels, &inst.predictions, &inst.maps));
        prop_assert!(top1 <= metrics::gt_known_loc(&inst.boxes, &inst.maps).unwrap());
        let px = metrics::pxap(&inst.masks, &inst.maps).unwrap();
        prop_assert!((px - pxap_oracle(&inst.masks, &inst.maps)).abs() < 1e-6);
        prop_assert!((0.0..=100.0).contains(&px));
    }

    #[test]
    fn fidelity_metrics_match_oracles(seed in any::<u64>(), n in 1usize..30) {
        let mut g = rng(seed);
        let records = random_records(&mut g, n);
        let drop = metrics::average_drop(&records);
        prop_assert!((drop.percent - average_drop_oracle(&records)).abs() < 1e-9);
        prop_assert_eq!(drop.included + drop.excluded, n);
        prop_assert!((0.0..=100.0).contains(&drop.percent));
        prop_assert_eq!(metrics::increase_in_confidence(&records), increase_oracle(&records));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn max_box_acc_matches_full_sweep(seed in any::<u64>(), n in 1usize..5) {
        let inst = random_instance(seed, n);
        let got = metrics::max_box_acc_v2(&inst.boxes, &inst.maps).unwrap();
        prop_assert!((got - max_box_acc_v2_oracle(&inst.boxes, &inst.maps)).abs() < 1e-9);
    }
}

#[test]
fn perfect_map_scores_full_marks() {
    let gt = BBox::new(2, 1, 6, 5).unwrap();
    let map = Tensor::from_fn([SIDE, SIDE], |p| {
        let (x, y) = (p % SIDE, p / SIDE);
        if (2..6).contains(&x) && (1..5).contains(&y) {
            1.0
        } else {
            0.0
        }
    });
    let mask: Vec<bool> = map.data().iter().map(|&v| v > 0.0).collect();
    assert_eq!(
        metrics::gt_known_loc(&[gt], std::slice::from_ref(&map)).unwrap(),
        100.0
    );
    assert_eq!(
        metrics::max_box_acc_v2(&[gt], std::slice::from_ref(&map)).unwrap(),
        100.0
    );
    assert_eq!(metrics::pxap(&[mask], &[map]).unwrap(), 100.0);
}

#[test]
fn empty_map_never_localizes() {
    let gt = BBox::new(0, 0, SIDE, SIDE).unwrap();
    let map = Tensor::zeros([SIDE, SIDE]);
    assert!(metrics::heatmap_to_boxes(&map, 0.0).unwrap().is_empty());
    assert_eq!(
        metrics::gt_known_loc(&[gt], std::slice::from_ref(&map)).unwrap(),
        0.0
    );
    assert_eq!(metrics::max_box_acc_v2(&[gt], &[map]).unwrap(), 0.0);
}

use proptest::prelude::*;

use graphground::geometry::{decode_offset, edge_soft_labels, encode_offset, iou, node_soft_labels, union_box, BBox, Offset, LOG_SIZE_CLAMP};

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 0.01..150.0f64, 0.01..150.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn union_contains_both(a in arb_box(), b in arb_box()) {
        let u = union_box(&a, &b);
        prop_assert!(u.contains(&a) && u.contains(&b));
        prop_assert_eq!(u, union_box(&b, &a));
        prop_assert!(u.area() >= a.area().max(b.area()));
    }

    #[test]
    fn offsets_round_trip(a in arb_box(), b in arb_box()) {
        let limit = LOG_SIZE_CLAMP.exp();
        prop_assume!(b.width() / a.width() < limit && a.width() / b.width() < limit);
        prop_assume!(b.height() / a.height() < limit && a.height() / b.height() < limit);
        let back = decode_offset(&encode_offset(&a, &b), &a);
        for (p, q) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((p - q).abs() <= 1e-9, "{:?} vs {:?}", back, b);
        }
    }

    #[test]
    fn decoded_size_is_capped(a in arb_box(), dw in -20.0..20.0f64, dh in -20.0..20.0f64) {
        // corners of tiny boxes far from the origin lose a few digits
        let offset = Offset { dx: 0.0, dy: 0.0, dw, dh };
        let out = decode_offset(&offset, &a);
        prop_assert!((out.width() / a.width()).ln().abs() <= LOG_SIZE_CLAMP + 1e-6);
        prop_assert!((out.height() / a.height()).ln().abs() <= LOG_SIZE_CLAMP + 1e-6);
    }

    #[test]
    fn contained_box_iou_is_area_ratio(a in arb_box(), fx in 0.0..1.0f64, fy in 0.0..1.0f64) {
        let inner = BBox::new(a.x1, a.y1, a.x1 + a.width() * fx.max(0.01), a.y1 + a.height() * fy.max(0.01)).unwrap();
        let expected = inner.area() / a.area();
        prop_assert!((iou(&inner, &a) - expected).abs() < 1e-12);
    }

    #[test]
    fn soft_labels_are_distributions(
        cands in prop::collection::vec(arb_box(), 1..25),
        gt in arb_box(),
        other in arb_box(),
        tau in 0.0..1.0f64,
    ) {
        let node = node_soft_labels(&cands, &gt, tau);
        prop_assert!(node.weights().iter().all(|w| *w >= 0.0));
        prop_assert!((node.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let pairs: Vec<(BBox, BBox)> = cands.iter().map(|c| (*c, other)).collect();
        let edge = edge_soft_labels(&pairs, &(gt, other), tau);
        prop_assert!(edge.weights().iter().all(|w| *w >= 0.0));
        prop_assert!((edge.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn spec_style_examples() {
    let b = |x1, y1, x2, y2| BBox::new(x1, y1, x2, y2).unwrap();
    assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
    assert_eq!(iou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)), 0.0);
    assert!((iou(&b(0., 0., 2., 2.), &b(1., 0., 3., 2.)) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(union_box(&b(0., 1., 2., 3.), &b(1., 0., 3., 2.)), b(0., 0., 3., 3.));
    let p = b(3., 4., 9., 7.);
    assert_eq!(encode_offset(&p, &p).to_array(), [0.0; 4]);
    assert!(BBox::new(2., 0., 1., 1.).is_err());
    assert!(BBox::new(0., 0., 0., 1.).is_err());
}

#[test]
fn thresholded_labels_keep_only_good_candidates() {
    let b = |x1: f64| BBox::new(x1, 0., x1 + 10., 10.).unwrap();
    let gt = b(0.0);
    let dist = node_soft_labels(&[b(0.0), b(2.0), b(8.0), b(50.0)], &gt, 0.5);
    // IoU 1, 8/12, 2/18, 0: only the first two survive
    let w = dist.weights();
    assert_eq!(dist.support(), 2);
    let total = 1.0 + 8.0 / 12.0;
    assert!((w[0] - 1.0 / total).abs() < 1e-12);
    assert!((w[1] - (8.0 / 12.0) / total).abs() < 1e-12);
}

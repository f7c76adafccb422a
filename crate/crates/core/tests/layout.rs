use compdiff::{boundary_band, build_masks, SegmentLayout, SegmentMaskSet};
use proptest::prelude::*;

fn layouts() -> impl Strategy<Value = SegmentLayout> {
    (1usize..10, 1usize..10, 1u8..6).prop_flat_map(|(h, w, k)| {
        proptest::collection::vec(0..k, h * w).prop_map(move |labels| SegmentLayout::from_labels(h, w, &labels).unwrap())
    })
}

proptest! {
    #[test]
    fn masks_sum_to_one(layout in layouts()) {
        let masks = build_masks(&layout).unwrap();
        for p in 0..layout.height() * layout.width() {
            let total: u32 = masks.masks().iter().map(|m| m.data()[p] as u32).sum();
            prop_assert_eq!(total, 1);
        }
    }

    #[test]
    fn image_round_trip_is_idempotent(layout in layouts()) {
        let again = SegmentLayout::from_rgb(layout.height(), layout.width(), &layout.to_rgb()).unwrap();
        prop_assert_eq!(&again, &layout);
        let text = SegmentLayout::parse_text(&layout.to_text()).unwrap();
        prop_assert_eq!(text, layout);
    }

    #[test]
    fn band_ignores_segment_order(layout in layouts(), radius in 1usize..3, rot in 0usize..5) {
        let masks = build_masks(&layout).unwrap();
        let mut order: Vec<usize> = (0..masks.len()).collect();
        order.rotate_left(rot % masks.len());
        let shuffled = SegmentMaskSet::new(order.iter().map(|&i| masks.mask(i).clone()).collect()).unwrap();
        prop_assert_eq!(boundary_band(&masks, radius), boundary_band(&shuffled, radius));
    }
}

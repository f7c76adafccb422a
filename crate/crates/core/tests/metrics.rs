use compdiff::metrics::{blending_score, evaluate, noise_estimate, MetricsReport, PatternClassifier, ReportMetadata};
use compdiff::{build_masks, ImageGrid, Mask, RngStream, SegmentLayout, SegmentMaskSet, SegmentSpec};
use proptest::prelude::*;

fn tiles(h: usize, w: usize) -> SegmentMaskSet {
    let labels: Vec<u8> = (0..h * w).map(|p| ((p / w) * 3 / h + (p % w) * 2 / w) as u8 % 3).collect();
    build_masks(&SegmentLayout::from_labels(h, w, &labels).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn blending_ignores_relabeling_and_sign(seed in any::<u64>(), radius in 1usize..3) {
        let masks = tiles(12, 12);
        let image = RngStream::new(seed, "image", 0, 0).normal_grid(12, 12, 3);
        let base = blending_score(&image, &masks, radius).unwrap();
        let reversed = SegmentMaskSet::new(masks.masks().iter().rev().cloned().collect()).unwrap();
        prop_assert_eq!(blending_score(&image, &reversed, radius).unwrap(), base);
        let flipped = ImageGrid::from_vec(12, 12, 3, image.data().iter().map(|v| -v).collect()).unwrap();
        prop_assert_eq!(blending_score(&flipped, &masks, radius).unwrap(), base);
    }

    #[test]
    fn full_mask_scoring_equals_unmasked(seed in any::<u64>()) {
        let classifier = PatternClassifier::init(6, 4, &RngStream::new(seed, "classifier", 0, 0)).unwrap();
        let image = RngStream::new(seed, "image", 0, 0).normal_grid(10, 10, 3);
        prop_assert_eq!(classifier.scores_masked(&image, &Mask::full(10, 10)).unwrap(), classifier.scores(&image).unwrap());
    }
}

#[test]
fn noise_estimate_scales_linearly() {
    let noise = RngStream::new(4, "noise", 0, 0).normal_grid(64, 64, 3);
    let base = noise_estimate(&noise).unwrap();
    for c in [1.0, 2.0, 4.0] {
        let scaled = ImageGrid::from_vec(64, 64, 3, noise.data().iter().map(|v| c * v).collect()).unwrap();
        assert!((noise_estimate(&scaled).unwrap() / (c * base) - 1.0).abs() < 0.05);
    }
    assert!(noise_estimate(&ImageGrid::zeros(2, 8, 3)).is_err());
}

#[test]
fn report_round_trips_through_json() {
    let masks = tiles(16, 16);
    let specs = vec![SegmentSpec::text(1, vec![0]), SegmentSpec::text(2, vec![1, 2]), SegmentSpec::text(3, vec![3])];
    let classifier = PatternClassifier::init(6, 4, &RngStream::new(1, "classifier", 0, 0)).unwrap();
    let image = RngStream::new(2, "image", 0, 0).normal_grid(16, 16, 3);
    let names: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
    let meta = ReportMetadata { method: "composite".into(), seed: 2, kappa: Some(40.0), harmonization: None, band_radius: 1 };
    let report = evaluate(&image, &masks, &specs, &classifier, &names, meta).unwrap();
    assert_eq!(report.segments[1].tokens, vec!["b".to_string(), "c".to_string()]);
    assert!(report.aesthetic.is_none() && report.preference.is_none());
    assert_eq!(MetricsReport::from_json(&report.to_json()).unwrap(), report);
}

use compdiff::denoiser::{Condition, ToyArchitecture, ToyDenoiser};
use compdiff::par::Execution;
use compdiff::pipeline::{
    merge_segments, run_composite, run_text_to_image_baseline, scaffold_stage, CompositeRequest, HarmonizationMode, Sampler,
};
use compdiff::{build_masks, ImageGrid, Mask, NoiseSchedule, RngStream, SegmentLayout, SegmentMaskSet, SegmentSpec, SigmaMode, StepPlan};
use proptest::prelude::*;

const H: usize = 12;
const W: usize = 12;

fn model() -> ToyDenoiser {
    let arch = ToyArchitecture { hidden: 8, embed: 8, time_embed: 8, vocab: 4, dilations: vec![1, 2], accepts_control: true };
    ToyDenoiser::init(arch, &RngStream::new(5, "pipeline-test", 0, 0)).unwrap()
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn thirds() -> SegmentMaskSet {
    let labels: Vec<u8> = (0..H * W).map(|p| ((p % W) * 3 / W) as u8).collect();
    build_masks(&SegmentLayout::from_labels(H, W, &labels).unwrap()).unwrap()
}

fn base_specs() -> Vec<SegmentSpec> {
    let reference = RngStream::new(1, "reference-image", 0, 0).normal_grid(H, W, 3);
    vec![
        SegmentSpec::text(1, vec![0]).with_reference(reference),
        SegmentSpec::text(2, vec![1]).with_control(Mask::from_fn(H, W, |y, x| (4..8).contains(&x) && y > 3)),
        SegmentSpec::text(3, vec![2]),
    ]
}

fn altered(j: usize, token: usize) -> SegmentSpec {
    match j {
        0 => SegmentSpec::text(1, vec![token]).with_reference(RngStream::new(2, "reference-image", 0, 0).normal_grid(H, W, 3)),
        1 => SegmentSpec::text(2, vec![token]).with_control(Mask::from_fn(H, W, |y, _| y < 6)),
        _ => SegmentSpec::text(3, vec![token]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn merge_takes_each_pixel_from_its_segment(seed in any::<u64>()) {
        let masks = thirds();
        let latents: Vec<ImageGrid> = (0..3).map(|i| RngStream::new(seed, "latent", 0, i).normal_grid(H, W, 3)).collect();
        let merged = merge_segments(&latents, &masks).unwrap();
        for p in 0..H * W {
            let owners: Vec<usize> = (0..3).filter(|&i| masks.mask(i).data()[p] == 1).collect();
            prop_assert_eq!(owners.len(), 1);
            prop_assert_eq!(merged.pixel(p), latents[owners[0]].pixel(p));
        }
    }

    #[test]
    fn scaffolding_is_independent_per_segment(seed in 0u64..1000, j in 0usize..3, token in 0usize..4, kappa in 10.0f64..100.0) {
        let (s, d) = (schedule(), model());
        let run = |specs: Vec<SegmentSpec>| {
            let plan = StepPlan::new(&s, 8, kappa).unwrap();
            scaffold_stage(&CompositeRequest::new(&s, plan, &d, thirds(), specs, 2.0, seed)).unwrap()
        };
        let before = run(base_specs());
        let mut specs = base_specs();
        specs[j] = altered(j, token);
        let after = run(specs);
        for i in (0..3).filter(|&i| i != j) {
            prop_assert_eq!(&before.segments[i], &after.segments[i]);
        }
    }
}

#[test]
fn zero_kappa_global_matches_text_to_image() {
    let (s, d) = (schedule(), model());
    for seed in 0..3 {
        let specs = vec![SegmentSpec::text(1, vec![0]), SegmentSpec::text(2, vec![3]), SegmentSpec::text(3, vec![1, 2])];
        let mut req = CompositeRequest::new(&s, StepPlan::new(&s, 10, 0.0).unwrap(), &d, thirds(), specs, 3.0, seed);
        req.harmonization = HarmonizationMode::Global;
        let sampler = Sampler { denoiser: &d, schedule: &s, guidance: 3.0, sigma_mode: SigmaMode::Deterministic, seed };
        let t2i = run_text_to_image_baseline(&req.global_condition(), &sampler, &req.plan, (H, W)).unwrap();
        assert_eq!(run_composite(&req).unwrap().image, t2i);
        assert_eq!(req.global_condition(), Condition::from_tokens(4, &[0, 1, 2, 3]).unwrap());
    }
}

#[test]
fn execution_mode_does_not_change_output() {
    let (s, d) = (schedule(), model());
    for mode in [HarmonizationMode::Global, HarmonizationMode::PerSegment, HarmonizationMode::PerSegmentWithControl] {
        let outputs: Vec<ImageGrid> = [Execution::Parallel, Execution::Sequential]
            .into_iter()
            .map(|exec| {
                let plan = StepPlan::new(&s, 10, 40.0).unwrap().with_sigma_mode(SigmaMode::DdpmMatched);
                let mut req = CompositeRequest::new(&s, plan, &d, thirds(), base_specs(), 3.0, 9);
                req.harmonization = mode;
                req.execution = exec;
                run_composite(&req).unwrap().image
            })
            .collect();
        assert_eq!(outputs[0], outputs[1], "{mode:?}");
    }
}

#[test]
fn trace_records_every_step() {
    let (s, d) = (schedule(), model());
    let mut req = CompositeRequest::new(&s, StepPlan::new(&s, 10, 30.0).unwrap(), &d, thirds(), base_specs(), 3.0, 2);
    req.trace = true;
    let out = run_composite(&req).unwrap();
    assert_eq!(out.trace.steps.len(), 10);
    assert_eq!(out.trace.steps.last().unwrap().timestep, 0);
    assert!(out.trace.steps.iter().all(|st| st.segments.len() == 3));
}

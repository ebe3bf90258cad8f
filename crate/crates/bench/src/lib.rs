//! Fixtures shared by the benchmarks.

use nudgeseg_core::driver::RunConfig;
use nudgeseg_core::flow::{ground_truth_flow, FlowField};
use nudgeseg_core::geometry::Vec2;
use nudgeseg_core::scene::{apply_nudge, generate_scene, render_labels, NudgeCommand, SceneState};
use nudgeseg_core::SegmentationHypothesis;

/// A default scene, the flow of pushing its first object, and a hypothesis
/// holding one mask per visible object.
pub struct Fixture {
    pub config: RunConfig,
    pub scene: SceneState,
    pub flow: FlowField,
    pub hyp: SegmentationHypothesis,
}

pub fn fixture(seed: u64) -> Fixture {
    let config = RunConfig::default();
    let scene = generate_scene(&config.scene, seed).expect("default scene config packs");
    let target = scene.objects[0].centroid();
    let cmd = NudgeCommand { point: target, direction: Vec2::new(1.0, 0.0), magnitude: 25.0, twist: 0.05 };
    let after = apply_nudge(&scene, &cmd).expect("centroid contact hits the object");
    let flow = ground_truth_flow(&scene, &after).expect("frames share a size");
    let labels = render_labels(&scene);
    let hyp = SegmentationHypothesis::from_label_image(&labels);
    Fixture { config, scene, flow, hyp }
}

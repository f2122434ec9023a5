//! Fixtures shared by the criterion benches and the throughput baseline.

use std::path::PathBuf;

use hemgs::hemgs::{HemgsConfig, HemgsModel};
use hemgs::nn::AgnosticExtractor;
use hemgs::scene::AnchorScene;
use hemgs::synth::{synth_scene, SynthSpec};
use hemgs::throughput::ThroughputReport;

/// Seed of every benchmark scene.
pub const SCENE_SEED: u64 = 42;

pub struct Fixture {
    pub scene: AnchorScene,
    pub model: HemgsModel,
    pub extractor: AgnosticExtractor,
}

/// Correlated synthetic scene with an untrained default-size model.
pub fn fixture(anchors: usize) -> Fixture {
    let scene = synth_scene(&SynthSpec::new(anchors, SCENE_SEED)).expect("synthetic scene");
    let model = HemgsModel::new(HemgsConfig::new(scene.feature_dim, scene.offsets_per_anchor)).expect("model");
    Fixture { scene, model, extractor: AgnosticExtractor::builtin() }
}

/// Checked-in throughput report that later runs are compared against.
pub fn baseline_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("throughput_baseline.json")
}

pub fn load_baseline() -> Option<ThroughputReport> {
    let text = std::fs::read_to_string(baseline_path()).ok()?;
    serde_json::from_str(&text).ok()
}

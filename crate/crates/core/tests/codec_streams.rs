use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hemgs::codec::{compress, decompress, inspect, CodecError};
use hemgs::hemgs::{HemgsConfig, HemgsModel};
use hemgs::nn::{AgnosticExtractor, HashGridConfig, Params};
use hemgs::scene::{load_scene, save_scene, SceneFormat};
use hemgs::synth::{synth_scene, AttributeModel, SpatialPattern, SynthSpec};

fn model(seed: u64) -> HemgsModel {
    let mut cfg = HemgsConfig::new(6, 2);
    cfg.hash =
        HashGridConfig { levels: 3, base_resolution: 4, max_resolution: 16, log2_table_size: 8, features_per_level: 2 };
    let mut m = HemgsModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05)));
    m
}

fn spec(count: usize, seed: u64, pattern: u8, iid: bool) -> SynthSpec {
    let pattern = [SpatialPattern::Uniform, SpatialPattern::Clustered, SpatialPattern::Planar][pattern as usize % 3];
    let attrs = if iid { AttributeModel::IidGaussian } else { AttributeModel::SpatiallyCorrelated };
    SynthSpec::new(count, seed).pattern(pattern).attributes(attrs).dims(6, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn streams_decode_to_the_encoder_reconstruction(
        count in 1usize..80,
        seed in any::<u64>(),
        pattern in 0u8..3,
        iid in any::<bool>(),
        lambda in 1e-4f64..1e-2,
    ) {
        let scene = synth_scene(&spec(count, seed, pattern, iid)).unwrap();
        let ext = AgnosticExtractor::builtin();
        let c = compress(&scene, &model(seed), &ext, lambda).unwrap();
        let d = decompress(&c.bytes, &ext).unwrap();
        prop_assert_eq!(&d, &c.decoded);
        for (rank, a) in d.anchors.iter().enumerate() {
            let orig = &scene.anchors[c.original_index[rank]];
            for ((x, y), s) in orig.feature.iter().zip(&a.feature).zip(&a.feature_step) {
                prop_assert!((*x as f64 - y).abs() <= s / 2.0);
            }
            for ((x, y), s) in orig.scaling_offsets().zip(&a.scof).zip(&a.scof_step) {
                prop_assert!((x as f64 - y).abs() <= s / 2.0);
            }
        }
        prop_assert_eq!(inspect(&c.bytes).unwrap(), c.report);
    }

    #[test]
    fn any_single_bit_flip_is_rejected(seed in any::<u64>(), position in any::<prop::sample::Index>(), bit in 0u8..8) {
        let scene = synth_scene(&spec(40, seed, 0, false)).unwrap();
        let ext = AgnosticExtractor::builtin();
        let mut bytes = compress(&scene, &model(1), &ext, 2e-3).unwrap().bytes;
        let i = position.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decompress(&bytes, &ext).is_err());
    }

    #[test]
    fn truncated_streams_are_rejected(seed in any::<u64>(), cut in any::<prop::sample::Index>()) {
        let scene = synth_scene(&spec(40, seed, 1, true)).unwrap();
        let ext = AgnosticExtractor::builtin();
        let bytes = compress(&scene, &model(2), &ext, 2e-3).unwrap().bytes;
        let len = cut.index(bytes.len());
        prop_assert!(decompress(&bytes[..len], &ext).is_err());
        prop_assert!(inspect(&bytes[..len]).is_err());
    }
}

#[test]
fn scene_files_round_trip_before_coding() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth_scene(&spec(300, 5, 2, false)).unwrap();
    let ext = AgnosticExtractor::builtin();
    for name in ["s.a3gs", "s.txt"] {
        let path = dir.path().join(name);
        save_scene(&scene, &path, SceneFormat::from_path(&path)).unwrap();
        let loaded = load_scene(&path, SceneFormat::from_path(&path)).unwrap();
        assert_eq!(loaded, scene);
        let a = compress(&loaded, &model(3), &ext, 1e-3).unwrap();
        let b = compress(&scene, &model(3), &ext, 1e-3).unwrap();
        assert_eq!(a.bytes, b.bytes);
    }
}

#[test]
fn duplicate_voxels_and_dimension_mismatch_are_errors() {
    let mut scene = synth_scene(&spec(30, 6, 0, false)).unwrap();
    let ext = AgnosticExtractor::builtin();
    let wrong = HemgsModel::new(HemgsConfig::new(32, 10)).unwrap();
    assert!(matches!(compress(&scene, &wrong, &ext, 1e-3), Err(CodecError::Model(_))));
    scene.anchors[1].location = scene.anchors[0].location;
    assert!(compress(&scene, &model(4), &ext, 1e-3).is_err());
    assert!(compress(&synth_scene(&spec(30, 6, 0, false)).unwrap(), &model(4), &ext, 0.5).is_err());
}

#[test]
fn untrained_step_head_ignores_lambda() {
    // The step head starts with a zero output layer, so lambda has no
    // effect until training.
    let scene = synth_scene(&spec(200, 7, 0, false)).unwrap();
    let ext = AgnosticExtractor::builtin();
    let m = HemgsModel::new(HemgsConfig {
        hash: HashGridConfig { log2_table_size: 8, ..Default::default() },
        ..HemgsConfig::new(6, 2)
    })
    .unwrap();
    let a = compress(&scene, &m, &ext, 1e-3).unwrap();
    let b = compress(&scene, &m, &ext, 4e-3).unwrap();
    assert_eq!(a.decoded.anchors, b.decoded.anchors);
}

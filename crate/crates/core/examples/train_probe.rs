//! Trains the model variants on a correlated synthetic scene and prints
//! timing, rate-distortion rows and the factorized baseline.
//!
//! `cargo run --release -p hemgs-core --example train_probe -- [anchors] [iterations] [batch]`

use std::time::Instant;

use hemgs::hemgs::{HemgsConfig, HemgsModel, RateLambda, DEFAULT_LAMBDAS};
use hemgs::nn::{AgnosticExtractor, HashGridConfig};
use hemgs::synth::{synth_scene, SynthSpec};
use hemgs::trainer::{eval_rd, evaluate, factorized_baseline, init_from_data, train, TrainConfig, TrainData, Variant};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let anchors = args.first().copied().unwrap_or(5000);
    let iterations = args.get(1).copied().unwrap_or(2000);
    let batch = args.get(2).copied().unwrap_or(128);
    let scene = synth_scene(&SynthSpec::new(anchors, 42)).unwrap();
    let ext = AgnosticExtractor::builtin();
    let cfg = TrainConfig { iterations, batch_size: batch, log_every: 250, ..Default::default() };
    for variant in [Variant::Full, Variant::NoAgnostic, Variant::NoAgnosticNoContext] {
        let mut mc = HemgsConfig::new(scene.feature_dim, scene.offsets_per_anchor);
        mc.hash = HashGridConfig {
            levels: 6,
            base_resolution: 4,
            max_resolution: 32,
            log2_table_size: 12,
            features_per_level: 2,
        };
        variant.apply(&mut mc);
        let model = HemgsModel::new(mc).unwrap();
        let mut init = model.clone();
        let data = TrainData::new(&scene, &ext, &init).unwrap();
        init_from_data(&mut init, &data);
        let t = Instant::now();
        let out = train(&scene, &ext, model, &cfg).unwrap();
        println!("== {} trained in {:.1}s", variant.label(), t.elapsed().as_secs_f64());
        print!("{}", out.log.to_tsv());
        for &l in &DEFAULT_LAMBDAS {
            let lam = RateLambda::new(l).unwrap();
            let a = evaluate(&init, &data, lam, &cfg.weights).unwrap();
            let b = evaluate(&out.model, &data, lam, &cfg.weights).unwrap();
            println!(
                "eval lambda {l}: init D {:.5} R {:.1} | trained D {:.5} R {:.1}",
                a.distortion, a.rate_bits, b.distortion, b.rate_bits
            );
        }
        let rows = eval_rd(&scene, &out.model, &ext, &DEFAULT_LAMBDAS, &cfg.weights).unwrap();
        for r in &rows {
            let c = hemgs::codec::compress(&scene, &out.model, &ext, r.lambda).unwrap();
            let base = factorized_baseline(&c.decoded);
            println!(
                "lambda {} attr_bytes {} dist {:.5} (f {:.4} s {:.5} o {:.5}) baseline_bytes {:.0} saving {:.1}%",
                r.lambda,
                r.attribute_bytes,
                r.distortion,
                r.mse.feature,
                r.mse.scaling,
                r.mse.offsets,
                base.total_bits() / 8.0,
                100.0 * (1.0 - r.recorded_bits / base.total_bits())
            );
        }
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hemgs::codec::{compress, decompress, decompress_with_model, inspect, CodecError, StorageReport};
use hemgs::context::{scene_context_stats, ContextParams, DEFAULT_MAX_CONTEXT, DEFAULT_RECEPTIVE_FIELD};
use hemgs::hemgs::{HemgsConfig, HemgsModel, RateLambda, DEFAULT_LAMBDAS};
use hemgs::nn::{AgnosticExtractor, HashGridConfig};
use hemgs::scene::{load_scene, save_scene, AnchorScene, SceneFormat};
use hemgs::synth::{synth_scene, AttributeModel, SpatialPattern, SynthSpec};
use hemgs::throughput::{measure_throughput, ThroughputReport};
use hemgs::trainer::{train, TrainConfig};

use crate::errors::{Internal, Usage};
use crate::{
    Attributes, BenchArgs, Cli, Command, CompressArgs, DecompressArgs, Format, HashPreset, InspectArgs, Pattern,
    StatsArgs, SynthArgs, TrainArgs,
};

pub const MODEL_FILE: &str = "model.hmgsw";
pub const EXTRACTOR_FILE: &str = "agnostic.hmgsw";

/// Runs one invocation and returns what goes to standard output.
pub fn run(cli: &Cli) -> Result<String> {
    if cli.show_config {
        return show_config(cli);
    }
    match &cli.command {
        None => Err(Usage("no subcommand given; see --help".into()).into()),
        Some(Command::Compress(a)) => run_compress(cli, a),
        Some(Command::Decompress(a)) => run_decompress(cli, a),
        Some(Command::Train(a)) => run_train(cli, a),
        Some(Command::Inspect(a)) => run_inspect(cli, a),
        Some(Command::Stats(a)) => run_stats(cli, a),
        Some(Command::Synth(a)) => run_synth(cli, a),
        Some(Command::Bench(a)) => run_bench(cli, a),
    }
}

/// Ordered key/value report.
#[derive(Default)]
struct Report(Vec<(String, String)>);

impl Report {
    fn put(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    fn render(&self, format: Format) -> String {
        let mut s = String::new();
        let width = self.0.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in &self.0 {
            match format {
                Format::Kv => writeln!(s, "{k}={v}").unwrap(),
                Format::Text => writeln!(s, "{k:<width$}  {v}").unwrap(),
            }
        }
        s
    }
}

fn storage_text(report: &StorageReport, extra: &Report, format: Format) -> String {
    match format {
        Format::Kv => report.to_kv() + &extra.render(format),
        Format::Text => format!("{report}\n{}", extra.render(format)),
    }
}

fn require_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Usage(format!("input {} is not a readable file", path.display())).into());
    }
    Ok(())
}

/// The output's directory must exist and the output must not be one of the inputs.
fn require_output(path: &Path, inputs: &[&Path]) -> Result<()> {
    if path.is_dir() {
        return Err(Usage(format!("output {} is a directory", path.display())).into());
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Usage(format!("output directory {} does not exist", parent.display())).into());
    }
    if let Ok(out) = path.canonicalize() {
        for input in inputs {
            if input.canonicalize().map(|i| i == out).unwrap_or(false) {
                return Err(Usage(format!("output {} would overwrite an input", path.display())).into());
            }
        }
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    RateLambda::new(lambda).map_err(|e| Usage(e.to_string()))?;
    Ok(())
}

fn context_params(rf: Option<u32>, n: Option<usize>) -> Result<ContextParams> {
    let params = ContextParams::new(rf.unwrap_or(DEFAULT_RECEPTIVE_FIELD), n.unwrap_or(DEFAULT_MAX_CONTEXT))
        .map_err(|e| Usage(e.to_string()))?;
    Ok(params)
}

fn model_path(cli: &Cli, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    match &cli.assets {
        Some(dir) => Ok(dir.join(MODEL_FILE)),
        None => Err(Usage("no model given; pass --model or set HEMGS_ASSET_DIR".into()).into()),
    }
}

fn extractor_path(cli: &Cli) -> Option<PathBuf> {
    cli.assets.as_ref().map(|d| d.join(EXTRACTOR_FILE)).filter(|p| p.is_file())
}

fn extractor(cli: &Cli) -> Result<AgnosticExtractor> {
    match extractor_path(cli) {
        Some(p) => {
            let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            AgnosticExtractor::from_asset(&bytes).with_context(|| format!("loading extractor {}", p.display()))
        }
        None => Ok(AgnosticExtractor::builtin()),
    }
}

fn load_model(path: &Path) -> Result<HemgsModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    HemgsModel::from_bytes(&bytes).with_context(|| format!("loading model {}", path.display()))
}

/// Loads a scene and keeps the first anchor of every voxel; `strict` makes
/// a shared voxel an error. Returns the scene and the dropped count.
fn read_scene(path: &Path, strict: bool) -> Result<(AnchorScene, usize)> {
    let scene =
        load_scene(path, SceneFormat::from_path(path)).with_context(|| format!("reading scene {}", path.display()))?;
    let (scene, dropped) = scene.dedup_voxels(strict).with_context(|| format!("scene {}", path.display()))?;
    Ok((scene, dropped))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run_compress(cli: &Cli, a: &CompressArgs) -> Result<String> {
    let model_path = model_path(cli, &a.model)?;
    require_input(&a.input)?;
    require_input(&model_path)?;
    require_output(&a.output, &[&a.input, &model_path])?;
    check_lambda(a.lambda)?;

    let model = load_model(&model_path)?;
    let ext = extractor(cli)?;
    let (scene, dropped) = read_scene(&a.input, a.strict)?;
    let c = compress(&scene, &model, &ext, a.lambda)?;
    write_file(&a.output, &c.bytes)?;

    let mut extra = Report::default();
    extra
        .put("stream", a.output.display())
        .put("dropped_duplicates", dropped)
        .put("feature_bits", c.rate.feature_bits)
        .put("scaling_offsets_bits", c.rate.scof_bits())
        .put("feature_estimate_bits", c.rate.feature_estimate_bits)
        .put("scaling_offsets_estimate_bits", c.rate.scof_estimate_bits)
        .put("escapes", c.rate.escapes);
    Ok(storage_text(&c.report, &extra, cli.format))
}

fn run_decompress(cli: &Cli, a: &DecompressArgs) -> Result<String> {
    require_input(&a.input)?;
    let mut inputs = vec![a.input.as_path()];
    if let Some(m) = &a.model {
        require_input(m)?;
        inputs.push(m);
    }
    require_output(&a.output, &inputs)?;

    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let ext = extractor(cli)?;
    let decoded = match &a.model {
        Some(m) => decompress_with_model(&bytes, &load_model(m)?, &ext),
        None => decompress(&bytes, &ext),
    }
    .with_context(|| format!("decoding {}", a.input.display()))?;
    let scene = decoded.to_anchor_scene()?;
    save_scene(&scene, &a.output, SceneFormat::from_path(&a.output))
        .with_context(|| format!("writing {}", a.output.display()))?;

    let mut r = Report::default();
    r.put("scene", a.output.display()).put("anchors", decoded.len()).put("lambda", decoded.lambda as f64);
    Ok(r.render(cli.format))
}

fn hash_config(preset: HashPreset) -> HashGridConfig {
    match preset {
        HashPreset::Default => HashGridConfig::default(),
        HashPreset::Desk => HashGridConfig {
            levels: 6,
            base_resolution: 4,
            max_resolution: 32,
            log2_table_size: 12,
            features_per_level: 2,
        },
    }
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        lambdas: a.lambdas.clone().unwrap_or(d.lambdas.clone()),
        iterations: a.iterations.unwrap_or(d.iterations),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        hash_lr: a.hash_lr.unwrap_or(d.hash_lr),
        mlp_lr: a.mlp_lr.unwrap_or(d.mlp_lr),
        seed: a.seed.unwrap_or(d.seed),
        average_lambdas: a.average_lambdas,
        ..d
    }
}

fn run_train(cli: &Cli, a: &TrainArgs) -> Result<String> {
    require_input(&a.input)?;
    require_output(&a.output, &[&a.input])?;
    if let Some(log) = &a.log {
        require_output(log, &[&a.input, &a.output])?;
    }
    let params = context_params(a.rf, a.n)?;
    let cfg = train_config(a);
    cfg.validate()?;

    let (scene, dropped) = read_scene(&a.input, a.strict)?;
    let mut mc = HemgsConfig::new(scene.feature_dim, scene.offsets_per_anchor);
    mc.hash = hash_config(a.hash);
    mc.receptive_field = params.receptive_field;
    mc.max_context = params.max_context;
    mc.use_agnostic = !a.no_agnostic;
    mc.use_context = !a.no_context;
    mc.seed = cfg.seed;
    let model = HemgsModel::new(mc)?;
    let ext = extractor(cli)?;
    let out = train(&scene, &ext, model, &cfg)?;
    let bytes = out.model.to_bytes()?;
    write_file(&a.output, &bytes)?;
    if let Some(log) = &a.log {
        write_file(log, out.log.to_tsv().as_bytes())?;
    }

    let mut r = Report::default();
    r.put("model", a.output.display())
        .put("model_bytes", bytes.len())
        .put("anchors", scene.len())
        .put("dropped_duplicates", dropped)
        .put("iterations", cfg.iterations);
    if let Some(last) = out.log.rows.last() {
        r.put("final_lambda", last.lambda)
            .put("final_distortion", last.distortion)
            .put("final_rate_bits", last.rate_bits)
            .put("final_loss", last.total);
    }
    Ok(r.render(cli.format))
}

fn run_inspect(cli: &Cli, a: &InspectArgs) -> Result<String> {
    require_input(&a.input)?;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report = inspect(&bytes).with_context(|| format!("parsing {}", a.input.display()))?;
    Ok(storage_text(&report, &Report::default(), cli.format))
}

fn run_stats(cli: &Cli, a: &StatsArgs) -> Result<String> {
    require_input(&a.input)?;
    let params = context_params(a.rf, a.n)?;
    let (scene, dropped) = read_scene(&a.input, a.strict)?;
    let stats = scene_context_stats(&scene, params).with_context(|| format!("scene {}", a.input.display()))?;
    let mut r = Report::default();
    r.put("anchors", scene.len())
        .put("dropped_duplicates", dropped)
        .put("receptive_field", params.receptive_field)
        .put("max_context", params.max_context)
        .put("mean_selected", stats.mean_selected)
        .put("max_selected", stats.max_selected)
        .put("sparse_fraction", stats.sparse_fraction);
    Ok(r.render(cli.format))
}

fn run_synth(cli: &Cli, a: &SynthArgs) -> Result<String> {
    require_output(&a.output, &[])?;
    let spec = SynthSpec::new(a.count, a.seed)
        .pattern(match a.pattern {
            Pattern::Uniform => SpatialPattern::Uniform,
            Pattern::Clustered => SpatialPattern::Clustered,
            Pattern::Planar => SpatialPattern::Planar,
        })
        .attributes(match a.attributes {
            Attributes::Iid => AttributeModel::IidGaussian,
            Attributes::Correlated => AttributeModel::SpatiallyCorrelated,
        })
        .dims(a.feature_dim, a.offsets);
    let scene = synth_scene(&spec).map_err(|e| Usage(e.to_string()))?;
    save_scene(&scene, &a.output, SceneFormat::from_path(&a.output))
        .with_context(|| format!("writing {}", a.output.display()))?;
    let mut r = Report::default();
    r.put("scene", a.output.display())
        .put("anchors", scene.len())
        .put("feature_dim", scene.feature_dim)
        .put("offsets_per_anchor", scene.offsets_per_anchor)
        .put("voxel_size", scene.voxel_size);
    Ok(r.render(cli.format))
}

fn run_bench(cli: &Cli, a: &BenchArgs) -> Result<String> {
    let mut inputs = Vec::new();
    for p in [&a.input, &a.model, &a.baseline].into_iter().flatten() {
        require_input(p)?;
        inputs.push(p.as_path());
    }
    if let Some(save) = &a.save {
        require_output(save, &inputs)?;
    }
    check_lambda(a.lambda)?;
    let baseline: Option<ThroughputReport> = match &a.baseline {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing baseline {}", p.display()))?)
        }
        None => None,
    };

    let scene = match &a.input {
        Some(p) => read_scene(p, false)?.0,
        None => synth_scene(&SynthSpec::new(a.anchors, 42)).map_err(|e| Usage(e.to_string()))?,
    };
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => HemgsModel::new(HemgsConfig::new(scene.feature_dim, scene.offsets_per_anchor))?,
    };
    let ext = extractor(cli)?;
    let report = measure_throughput(&scene, &model, &ext, a.lambda, a.repeats).map_err(|e| match e {
        // compress just produced the stream, so a layout failure is ours
        CodecError::Layout(msg) => anyhow::Error::new(Internal(msg)),
        e => e.into(),
    })?;
    if let Some(save) = &a.save {
        let json = serde_json::to_string_pretty(&report)?;
        write_file(save, json.as_bytes())?;
    }

    let mut r = Report::default();
    r.put("anchors", report.anchors)
        .put("lambda", report.lambda)
        .put("repeats", report.repeats)
        .put("stream_bytes", report.stream_bytes)
        .put("encode_seconds", report.encode_seconds)
        .put("decode_seconds", report.decode_seconds)
        .put("encode_anchors_per_second", report.encode_anchors_per_second())
        .put("decode_anchors_per_second", report.decode_anchors_per_second());
    if let Some(base) = &baseline {
        let (enc, dec) = report.relative_to(base);
        r.put("encode_relative_to_baseline", enc).put("decode_relative_to_baseline", dec);
    }
    Ok(r.render(cli.format))
}

fn show_config(cli: &Cli) -> Result<String> {
    let t = TrainConfig::default();
    let m = HemgsConfig::new(hemgs::scene::DEFAULT_FEATURE_DIM, hemgs::scene::DEFAULT_OFFSETS_PER_ANCHOR);
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let mut r = Report::default();
    r.put("lambdas", join(&DEFAULT_LAMBDAS))
        .put("receptive_field", DEFAULT_RECEPTIVE_FIELD)
        .put("max_context", DEFAULT_MAX_CONTEXT)
        .put("feature_dim", m.feature_dim)
        .put("offsets_per_anchor", m.offsets_per_anchor)
        .put("hash_levels", m.hash.levels)
        .put("hash_base_resolution", m.hash.base_resolution)
        .put("hash_max_resolution", m.hash.max_resolution)
        .put("hash_log2_table_size", m.hash.log2_table_size)
        .put("hash_features_per_level", m.hash.features_per_level)
        .put("agnostic_dim", m.agnostic_dim)
        .put("prior_dim", m.prior_dim)
        .put("hidden", m.hidden)
        .put("context_hidden", m.context_hidden)
        .put("context_embed", m.context_embed)
        .put("context_dim", m.context_dim)
        .put("feature_base_step", m.feature_base_step)
        .put("scof_base_step", m.scof_base_step)
        .put("train_iterations", t.iterations)
        .put("train_batch_size", t.batch_size)
        .put("train_hash_lr", t.hash_lr)
        .put("train_mlp_lr", t.mlp_lr)
        .put("train_final_lr_fraction", t.final_lr_fraction)
        .put("train_seed", t.seed)
        .put("train_average_lambdas", t.average_lambdas)
        .put("train_cache_refresh", t.cache_refresh)
        .put("train_weight_feature", t.weights.feature)
        .put("train_weight_scaling", t.weights.scaling)
        .put("train_weight_offsets", t.weights.offsets)
        .put("compress_lambda", 2e-3)
        .put("bench_anchors", 50_000)
        .put("asset_dir", cli.assets.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into()))
        .put(
            "model",
            cli.assets.as_ref().map(|d| d.join(MODEL_FILE).display().to_string()).unwrap_or_else(|| "-".into()),
        )
        .put("extractor", extractor_path(cli).map(|p| p.display().to_string()).unwrap_or_else(|| "builtin".into()));
    Ok(r.render(cli.format))
}

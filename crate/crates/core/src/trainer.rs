//! Desk-scale optimization of the scene-specific parameters.
//!
//! The loss for one anchor at rate point `lambda` is
//! `D + lambda * R`, where `D` is the weighted per-attribute mean squared
//! error between the original and the straight-through dequantized values
//! and `R` the estimated bits of both stages with additive uniform noise.
//! Neighbour values seen by the context path come from decoded caches that
//! are rebuilt periodically and treated as constants.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{compress, reconstruct, CodecError, Compressed, DecodedScene};
use crate::entropy_model::{
    quantize_value, rate_bits_grad, EntropyError, GaussianCdf, GaussianParams, QuantStep, RateMode, SIGMA_FLOOR,
};
use crate::hemgs::{HemgsError, HemgsGrad, HemgsModel, RateLambda, SceneGeometry, Stage, StageInput, DEFAULT_LAMBDAS};
use crate::nn::{AgnosticExtractor, Params};
use crate::scene::{AnchorScene, SceneError, SCALING_DIM};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] HemgsError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String, last_good: Box<HemgsModel>, log: TrainLog },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionWeights {
    pub feature: f64,
    pub scaling: f64,
    pub offsets: f64,
}

impl Default for DistortionWeights {
    fn default() -> Self {
        DistortionWeights { feature: 1.0, scaling: 10.0, offsets: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambdas: Vec<f64>,
    pub iterations: usize,
    /// Anchors per step.
    pub batch_size: usize,
    pub hash_lr: f64,
    pub mlp_lr: f64,
    /// The cosine schedule ends at this fraction of the initial rates.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub weights: DistortionWeights,
    /// Evaluate every rate point on every batch instead of cycling.
    pub average_lambdas: bool,
    /// Iterations between rebuilds of the decoded neighbour caches.
    pub cache_refresh: usize,
    pub log_every: usize,
    /// Start the distribution heads at the per-channel mean and spread.
    pub data_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            iterations: 2000,
            batch_size: 128,
            hash_lr: 1e-2,
            mlp_lr: 1e-3,
            final_lr_fraction: 0.1,
            seed: 0,
            weights: DistortionWeights::default(),
            average_lambdas: false,
            cache_refresh: 100,
            log_every: 50,
            data_init: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<Vec<RateLambda>, TrainError> {
        if self.lambdas.is_empty() {
            return Err(TrainError::Config("empty lambda grid".into()));
        }
        let lambdas = self
            .lambdas
            .iter()
            .map(|&l| RateLambda::new(l).map_err(|e| TrainError::Config(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.batch_size == 0 || self.cache_refresh == 0 || self.log_every == 0 {
            return Err(TrainError::Config("batch size, cache refresh and log interval must be positive".into()));
        }
        if !(positive(self.hash_lr) && positive(self.mlp_lr)) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(TrainError::Config("final learning-rate fraction must lie in [0, 1]".into()));
        }
        let w = self.weights;
        if ![w.feature, w.scaling, w.offsets].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(TrainError::Config("distortion weights must be finite and non-negative".into()));
        }
        Ok(lambdas)
    }
}

/// Loss terms averaged over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lambda: f64,
    pub distortion: f64,
    /// Estimated bits per anchor.
    pub rate_bits: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lambda: f64,
    pub distortion: f64,
    pub rate_bits: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("iteration\tlambda\tdistortion\trate_bits\ttotal\n");
        for r in &self.rows {
            s += &format!("{}\t{}\t{:.6}\t{:.4}\t{:.6}\n", r.iteration, r.lambda, r.distortion, r.rate_bits, r.total);
        }
        s
    }
}

/// A scene prepared for training: geometry and original values in coding
/// order.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub geometry: SceneGeometry,
    pub original_index: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub scof: Vec<Vec<f64>>,
}

impl TrainData {
    pub fn new(scene: &AnchorScene, extractor: &AgnosticExtractor, model: &HemgsModel) -> Result<Self, TrainError> {
        scene.validate()?;
        model.check_scene_dims(scene.feature_dim, scene.offsets_per_anchor)?;
        let (geometry, index) = SceneGeometry::from_unordered(
            &scene.quantized_locations(),
            &scene.aabb,
            scene.voxel_size,
            extractor,
            &model.config,
        )?;
        let features = index.iter().map(|&i| scene.anchors[i].feature.iter().map(|&v| v as f64).collect()).collect();
        let scof = index.iter().map(|&i| scene.anchors[i].scaling_offsets().map(|v| v as f64).collect()).collect();
        Ok(TrainData { geometry, original_index: index, features, scof })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn values(&self, stage: Stage) -> &[Vec<f64>] {
        match stage {
            Stage::Feature => &self.features,
            Stage::ScalingOffsets => &self.scof,
        }
    }
}

/// Decoded values of every anchor at one rate point.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedCache {
    pub lambda: f64,
    pub features: Vec<Vec<f64>>,
    pub scof: Vec<Vec<f64>>,
}

/// Quantizes every anchor with the current model. Steps depend only on the
/// hyperprior path, so this needs no sequential pass and matches what the
/// decoder reconstructs.
pub fn decoded_cache(model: &HemgsModel, data: &TrainData, lambda: RateLambda) -> Result<DecodedCache, TrainError> {
    let mut features = Vec::with_capacity(data.len());
    let mut scof = Vec::with_capacity(data.len());
    for r in 0..data.len() {
        let hash = model.hash.query(data.geometry.unit_locations[r]).map_err(HemgsError::from)?;
        let agnostic = &data.geometry.agnostic[r];
        let input = StageInput { agnostic, hash: &hash, local: None, neighbors: &[], lambda };
        let prior = model.hyperprior_feature(Stage::Feature, &input)?;
        let step = model.predict_step(Stage::Feature, &prior, lambda)?;
        let f: Vec<f64> = data.features[r].iter().zip(step.as_slice()).map(|(&x, &s)| quantize_value(x, s).1).collect();
        let input = StageInput { local: Some(&f), ..input };
        let prior = model.hyperprior_feature(Stage::ScalingOffsets, &input)?;
        let step = model.predict_step(Stage::ScalingOffsets, &prior, lambda)?;
        scof.push(data.scof[r].iter().zip(step.as_slice()).map(|(&x, &s)| quantize_value(x, s).1).collect());
        features.push(f);
    }
    Ok(DecodedCache { lambda: lambda.value(), features, scof })
}

/// One anchor of a batch with its frozen randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample {
    pub rank: usize,
    /// Uniform noise in `[-1/2, 1/2]` per element, in units of the step.
    pub noise_feature: Vec<f64>,
    pub noise_scof: Vec<f64>,
    /// Rounding residuals `round(x/s) - x/s`; `None` recomputes them from
    /// the current steps.
    pub residual_feature: Option<Vec<f64>>,
    pub residual_scof: Option<Vec<f64>>,
}

impl BatchSample {
    pub fn draw<R: Rng>(rank: usize, data: &TrainData, rng: &mut R) -> Self {
        let mut noise = |d: usize| (0..d).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<f64>>();
        BatchSample {
            rank,
            noise_feature: noise(data.features[rank].len()),
            noise_scof: noise(data.scof[rank].len()),
            residual_feature: None,
            residual_scof: None,
        }
    }
}

fn residuals(values: &[f64], step: &[f64]) -> Vec<f64> {
    values.iter().zip(step).map(|(&x, &s)| quantize_value(x, s).0 as f64 - x / s).collect()
}

/// Weighted squared error of one stage and its gradient with respect to the
/// steps, for `x_hat = x + e * s`.
fn stage_distortion(stage: Stage, e: &[f64], step: &[f64], w: &DistortionWeights, d_step: &mut [f64]) -> f64 {
    let mut total = 0.0;
    let mut term = |range: std::ops::Range<usize>, weight: f64| {
        if range.is_empty() {
            return;
        }
        let k = weight / range.len() as f64;
        for i in range {
            let err = e[i] * step[i];
            total += k * err * err;
            d_step[i] += 2.0 * k * err * e[i];
        }
    };
    match stage {
        Stage::Feature => term(0..e.len(), w.feature),
        Stage::ScalingOffsets => {
            term(0..SCALING_DIM, w.scaling);
            term(SCALING_DIM..e.len(), w.offsets);
        }
    }
    total
}

/// Loss of a batch at one rate point; with `grads` set, accumulates the
/// gradient of the batch mean loss.
pub fn batch_loss_grad(
    model: &HemgsModel,
    data: &TrainData,
    cache: &DecodedCache,
    lambda: RateLambda,
    samples: &[BatchSample],
    weights: &DistortionWeights,
    mut grads: Option<&mut HemgsGrad>,
) -> Result<LossBreakdown, TrainError> {
    let mut out = LossBreakdown { lambda: lambda.value(), ..Default::default() };
    if samples.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / samples.len() as f64;
    let lv = lambda.value();
    for s in samples {
        let r = s.rank;
        let (hash, hash_tape) = model.hash_features(data.geometry.unit_locations[r])?;
        let agnostic = &data.geometry.agnostic[r];

        let nb1 = data.geometry.neighbors(r, &cache.features, r)?;
        let t1 = model
            .forward(Stage::Feature, &StageInput { agnostic, hash: &hash, local: None, neighbors: &nb1, lambda })?;
        let p1 = &t1.prediction;
        let x1 = &data.features[r];
        let e1 = s.residual_feature.clone().unwrap_or_else(|| residuals(x1, &p1.step));
        let f_hat: Vec<f64> = (0..x1.len()).map(|i| x1[i] + e1[i] * p1.step[i]).collect();
        let mut d_step1 = vec![0.0; x1.len()];
        let dist1 = stage_distortion(Stage::Feature, &e1, &p1.step, weights, &mut d_step1);
        let rate1 = rate_bits_grad(
            &GaussianParams::new(p1.mu.clone(), p1.sigma.clone()).map_err(HemgsError::from)?,
            &QuantStep(p1.step.clone()),
            x1,
            RateMode::Noise(&s.noise_feature),
        )
        .map_err(HemgsError::from)?;

        let nb2 = data.geometry.neighbors(r, &cache.scof, r)?;
        let input2 = StageInput { agnostic, hash: &hash, local: Some(&f_hat), neighbors: &nb2, lambda };
        let t2 = model.forward(Stage::ScalingOffsets, &input2)?;
        let p2 = &t2.prediction;
        let x2 = &data.scof[r];
        let e2 = s.residual_scof.clone().unwrap_or_else(|| residuals(x2, &p2.step));
        let mut d_step2 = vec![0.0; x2.len()];
        let dist2 = stage_distortion(Stage::ScalingOffsets, &e2, &p2.step, weights, &mut d_step2);
        let rate2 = rate_bits_grad(
            &GaussianParams::new(p2.mu.clone(), p2.sigma.clone()).map_err(HemgsError::from)?,
            &QuantStep(p2.step.clone()),
            x2,
            RateMode::Noise(&s.noise_scof),
        )
        .map_err(HemgsError::from)?;

        out.distortion += (dist1 + dist2) * scale;
        out.rate_bits += (rate1.bits + rate2.bits) * scale;

        if let Some(g) = grads.as_deref_mut() {
            let k = scale * lv;
            let up = |d_dist: &[f64], d_rate: &[f64]| -> Vec<f64> {
                d_dist.iter().zip(d_rate).map(|(a, b)| scale * a + k * b).collect()
            };
            let mul = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * k).collect() };
            let g2 = model.backward(&t2, &up(&d_step2, &rate2.d_step), &mul(&rate2.d_mu), &mul(&rate2.d_sigma), g)?;
            let mut ds1 = up(&d_step1, &rate1.d_step);
            if let Some(local) = &g2.local {
                for i in 0..ds1.len() {
                    ds1[i] += local[i] * e1[i];
                }
            }
            let g1 = model.backward(&t1, &ds1, &mul(&rate1.d_mu), &mul(&rate1.d_sigma), g)?;
            let hash_up: Vec<f64> = g1.hash.iter().zip(&g2.hash).map(|(a, b)| a + b).collect();
            model.hash.backward(&hash_tape, &hash_up, &mut g.hash).map_err(HemgsError::from)?;
        }
    }
    out.total = out.distortion + lv * out.rate_bits;
    Ok(out)
}

fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + libm::log(-libm::expm1(-y))
    }
}

/// Points the distribution heads at the per-channel mean and standard
/// deviation of the data, so early steps are spent on structure rather than
/// on moving biases.
pub fn init_from_data(model: &mut HemgsModel, data: &TrainData) {
    if data.is_empty() {
        return;
    }
    for stage in [Stage::Feature, Stage::ScalingOffsets] {
        let values = data.values(stage);
        let d = model.config.stage_dim(stage);
        let n = values.len() as f64;
        let nets = match stage {
            Stage::Feature => &mut model.feature,
            Stage::ScalingOffsets => &mut model.scof,
        };
        let last = nets.dist.layers.last_mut().expect("dist head has layers");
        for c in 0..d {
            let mean = values.iter().map(|v| v[c]).sum::<f64>() / n;
            let var = values.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / n;
            last.bias[c] = mean;
            last.bias[d + c] = softplus_inverse((var.sqrt() - SIGMA_FLOOR).max(1e-3));
        }
    }
}

struct Adam {
    t: i32,
    mlp_m: Vec<f64>,
    mlp_v: Vec<f64>,
    hash_m: Vec<Vec<f64>>,
    hash_v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

fn is_hash(name: &str) -> bool {
    name.starts_with("hash.")
}

impl Adam {
    fn new(model: &HemgsModel) -> Self {
        let mut n = 0;
        model.visit(&mut |name, t| {
            if !is_hash(name) {
                n += t.len()
            }
        });
        Adam {
            t: 0,
            mlp_m: vec![0.0; n],
            mlp_v: vec![0.0; n],
            hash_m: model.hash.tables.iter().map(|t| vec![0.0; t.len()]).collect(),
            hash_v: model.hash.tables.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// MLPs are updated densely; hash tables only at touched slots.
    fn step(&mut self, model: &mut HemgsModel, grads: &HemgsGrad, mlp_lr: f64, hash_lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let mut flat = Vec::with_capacity(self.mlp_m.len());
        grads.visit(&mut |name, t| {
            if !is_hash(name) {
                flat.extend_from_slice(t)
            }
        });
        let (m, v) = (&mut self.mlp_m, &mut self.mlp_v);
        let mut i = 0;
        model.visit_mut(&mut |name, t| {
            if is_hash(name) {
                return;
            }
            for p in t.iter_mut() {
                let g = flat[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                *p -= mlp_lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                i += 1;
            }
        });
        let f = grads.hash.features();
        for level in 0..model.hash.tables.len() {
            let table = &mut model.hash.tables[level];
            let g = &grads.hash.tables[level];
            let (m, v) = (&mut self.hash_m[level], &mut self.hash_v[level]);
            for &slot in grads.hash.touched(level) {
                for j in slot as usize * f..(slot as usize + 1) * f {
                    m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                    v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                    table[j] -= hash_lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn cosine(base: f64, final_fraction: f64, iteration: usize, total: usize) -> f64 {
    let progress = if total == 0 { 0.0 } else { iteration as f64 / total as f64 };
    base * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: HemgsModel,
    pub log: TrainLog,
}

/// Fits `model` to `scene`. Deterministic given the inputs.
pub fn train(
    scene: &AnchorScene,
    extractor: &AgnosticExtractor,
    model: HemgsModel,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    let lambdas = cfg.validate()?;
    let mut model = model;
    let data = TrainData::new(scene, extractor, &model)?;
    let mut log = TrainLog::default();
    if data.is_empty() || cfg.iterations == 0 {
        return Ok(TrainOutput { model, log });
    }
    if let Some(name) = model.first_non_finite() {
        return Err(TrainError::Config(format!("initial model has a non-finite value in {name}")));
    }
    if cfg.data_init {
        init_from_data(&mut model, &data);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model);
    let mut grads = model.zero_grad();
    let mut caches: Vec<DecodedCache> = Vec::new();
    let batch = cfg.batch_size.min(data.len());

    let diverged = |it: usize, reason: String, model: &HemgsModel, log: &TrainLog| TrainError::Diverged {
        iteration: it,
        reason,
        last_good: Box::new(model.clone()),
        log: log.clone(),
    };
    for it in 0..cfg.iterations {
        if it % cfg.cache_refresh == 0 {
            caches = match lambdas.iter().map(|&l| decoded_cache(&model, &data, l)).collect::<Result<_, _>>() {
                Err(e) if is_breakdown(&e) => return Err(diverged(it, e.to_string(), &model, &log)),
                r => r?,
            };
        }
        let ranks = sample(&mut rng, data.len(), batch);
        let samples: Vec<BatchSample> = ranks.iter().map(|r| BatchSample::draw(r, &data, &mut rng)).collect();
        grads.reset();
        let picked: Vec<usize> =
            if cfg.average_lambdas { (0..lambdas.len()).collect() } else { vec![it % lambdas.len()] };
        let mut loss = LossBreakdown::default();
        for &k in &picked {
            let l = match batch_loss_grad(
                &model,
                &data,
                &caches[k],
                lambdas[k],
                &samples,
                &cfg.weights,
                Some(&mut grads),
            ) {
                Err(e) if is_breakdown(&e) => return Err(diverged(it, e.to_string(), &model, &log)),
                r => r?,
            };
            let w = 1.0 / picked.len() as f64;
            loss.lambda = l.lambda;
            loss.distortion += w * l.distortion;
            loss.rate_bits += w * l.rate_bits;
            loss.total += w * l.total;
        }
        if picked.len() > 1 {
            grads.scale(1.0 / picked.len() as f64);
        }
        if !loss.total.is_finite() {
            return Err(diverged(it, format!("loss {}", loss.total), &model, &log));
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(diverged(it, format!("non-finite gradient in {name}"), &model, &log));
        }
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            log.rows.push(LogRow {
                iteration: it,
                lambda: loss.lambda,
                distortion: loss.distortion,
                rate_bits: loss.rate_bits,
                total: loss.total,
            });
        }
        let last_good = model.clone();
        let mlp_lr = cosine(cfg.mlp_lr, cfg.final_lr_fraction, it, cfg.iterations);
        let hash_lr = cosine(cfg.hash_lr, cfg.final_lr_fraction, it, cfg.iterations);
        adam.step(&mut model, &grads, mlp_lr, hash_lr);
        if let Some(name) = model.first_non_finite() {
            return Err(diverged(it, format!("non-finite parameter in {name}"), &last_good, &log));
        }
    }
    Ok(TrainOutput { model, log })
}

/// A finite model predicting an invalid step or sigma has blown up numerically.
fn is_breakdown(e: &TrainError) -> bool {
    matches!(e, TrainError::Model(HemgsError::Entropy(EntropyError::BadStep(_) | EntropyError::BadSigma(_))))
}

/// Round-mode loss of the whole scene with a real sequential decode.
pub fn evaluate(
    model: &HemgsModel,
    data: &TrainData,
    lambda: RateLambda,
    weights: &DistortionWeights,
) -> Result<LossBreakdown, TrainError> {
    let rec = reconstruct(model, &data.geometry, &data.features, &data.scof, lambda, false, &data.original_index)?;
    let mut out = LossBreakdown { lambda: lambda.value(), ..Default::default() };
    if data.is_empty() {
        return Ok(out);
    }
    let n = data.len() as f64;
    for (r, a) in rec.anchors.iter().enumerate() {
        let mse = |orig: &[f64], dec: &[f64]| {
            orig.iter().zip(dec).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / orig.len().max(1) as f64
        };
        out.distortion += (weights.feature * mse(&data.features[r], &a.feature)
            + weights.scaling * mse(&data.scof[r][..SCALING_DIM], &a.scof[..SCALING_DIM])
            + weights.offsets * mse(&data.scof[r][SCALING_DIM..], &a.scof[SCALING_DIM..]))
            / n;
    }
    out.rate_bits = (rec.rate.feature_estimate_bits + rec.rate.scof_estimate_bits) / n;
    out.total = out.distortion + lambda.value() * out.rate_bits;
    Ok(out)
}

/// Distortion of a decoded scene against the original, per attribute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeMse {
    pub feature: f64,
    pub scaling: f64,
    pub offsets: f64,
}

impl AttributeMse {
    pub fn weighted(&self, w: &DistortionWeights) -> f64 {
        w.feature * self.feature + w.scaling * self.scaling + w.offsets * self.offsets
    }
}

/// Mean over anchors of the per-attribute mean squared errors.
pub fn attribute_mse(scene: &AnchorScene, c: &Compressed) -> AttributeMse {
    let mut out = AttributeMse::default();
    let n = c.decoded.anchors.len();
    if n == 0 {
        return out;
    }
    let mse = |a: &mut dyn Iterator<Item = (f64, f64)>| {
        let (mut s, mut k) = (0.0, 0usize);
        for (x, y) in a {
            s += (x - y).powi(2);
            k += 1;
        }
        s / k.max(1) as f64
    };
    for (r, d) in c.decoded.anchors.iter().enumerate() {
        let orig = &scene.anchors[c.original_index[r]];
        out.feature += mse(&mut orig.feature.iter().zip(&d.feature).map(|(&x, &y)| (x as f64, y)));
        out.scaling += mse(&mut orig.scaling.iter().zip(&d.scof[..SCALING_DIM]).map(|(&x, &y)| (x as f64, y)));
        out.offsets += mse(&mut orig.offsets.iter().zip(&d.scof[SCALING_DIM..]).map(|(&x, &y)| (x as f64, y)));
    }
    let inv = 1.0 / n as f64;
    AttributeMse { feature: out.feature * inv, scaling: out.scaling * inv, offsets: out.offsets * inv }
}

/// One rate point measured with a real compress call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub lambda: f64,
    pub total_bytes: u64,
    /// FEAT and SCOF sections, checksums included.
    pub attribute_bytes: u64,
    pub feature_bytes: u64,
    pub scof_bytes: u64,
    /// Bits the encoder attributed to coded elements, escapes included.
    pub recorded_bits: f64,
    pub mse: AttributeMse,
    pub distortion: f64,
}

/// Compresses `scene` at every rate point, sorted by `lambda`.
pub fn eval_rd(
    scene: &AnchorScene,
    model: &HemgsModel,
    extractor: &AgnosticExtractor,
    lambdas: &[f64],
    weights: &DistortionWeights,
) -> Result<Vec<RdRow>, TrainError> {
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|lambda| {
            let c = compress(scene, model, extractor, lambda)?;
            let mse = attribute_mse(scene, &c);
            Ok(RdRow {
                lambda,
                total_bytes: c.report.total_bytes,
                attribute_bytes: c.report.feature_bytes + c.report.scof_bytes,
                feature_bytes: c.report.feature_bytes,
                scof_bytes: c.report.scof_bytes,
                recorded_bits: c.rate.feature_bits + c.rate.scof_bits(),
                mse,
                distortion: mse.weighted(weights),
            })
        })
        .collect()
}

pub fn rd_table_tsv(rows: &[RdRow]) -> String {
    let mut s =
        String::from("lambda\ttotal_bytes\tattribute_bytes\tfeature_mse\tscaling_mse\toffsets_mse\tdistortion\n");
    for r in rows {
        s += &format!(
            "{}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\n",
            r.lambda, r.total_bytes, r.attribute_bytes, r.mse.feature, r.mse.scaling, r.mse.offsets, r.distortion
        );
    }
    s
}

/// Cost of coding the same symbols with a factorized model: zero mean and
/// one spread per channel, fitted to minimize the coded size.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedBaseline {
    pub feature_sigma: Vec<f64>,
    pub scof_sigma: Vec<f64>,
    pub feature_bits: f64,
    pub scof_bits: f64,
}

impl FactorizedBaseline {
    pub fn total_bits(&self) -> f64 {
        self.feature_bits + self.scof_bits
    }
}

fn discrete_cost(value: f64, sigma: f64, step: f64) -> f64 {
    let cdf = GaussianCdf::new(0.0, sigma, step).expect("positive sigma and step");
    let (k, _) = quantize_value(value, step);
    match cdf.index_of(k) {
        Some(i) => cdf.cost_bits(i),
        None => cdf.cost_bits(cdf.escape_index()) + 32.0,
    }
}

/// Minimizes a unimodal function of `ln sigma` by golden-section search.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iterations: usize) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..iterations {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    if fa <= fb {
        a
    } else {
        b
    }
}

fn fit_channels(values: &[(&[f64], &[f64])], dim: usize) -> (Vec<f64>, f64) {
    let mut sigmas = Vec::with_capacity(dim);
    let mut total = 0.0;
    for c in 0..dim {
        let cost = |log_sigma: f64| -> f64 {
            let sigma = log_sigma.exp();
            values.iter().map(|(v, s)| discrete_cost(v[c], sigma, s[c])).sum()
        };
        let best = golden_section(cost, (1e-4f64).ln(), (1e3f64).ln(), 60);
        total += cost(best);
        sigmas.push(best.exp());
    }
    (sigmas, total)
}

/// Fits the factorized baseline to a decoded scene's symbols and steps.
pub fn factorized_baseline(decoded: &DecodedScene) -> FactorizedBaseline {
    let feat: Vec<(&[f64], &[f64])> =
        decoded.anchors.iter().map(|a| (a.feature.as_slice(), a.feature_step.as_slice())).collect();
    let scof: Vec<(&[f64], &[f64])> =
        decoded.anchors.iter().map(|a| (a.scof.as_slice(), a.scof_step.as_slice())).collect();
    let (feature_sigma, feature_bits) = fit_channels(&feat, decoded.feature_dim);
    let (scof_sigma, scof_bits) = fit_channels(&scof, SCALING_DIM + 3 * decoded.offsets_per_anchor);
    FactorizedBaseline { feature_sigma, scof_sigma, feature_bits, scof_bits }
}

/// Model variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// No scene-agnostic features.
    NoAgnostic,
    /// No scene-agnostic features and no autoregressive context.
    NoAgnosticNoContext,
}

impl Variant {
    pub fn apply(self, config: &mut crate::hemgs::HemgsConfig) {
        config.use_agnostic = self == Variant::Full;
        config.use_context = self != Variant::NoAgnosticNoContext;
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAgnostic => "w/o SA",
            Variant::NoAgnosticNoContext => "w/o SA, AR",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_model::interval_mass;
    use crate::hemgs::HemgsConfig;
    use crate::nn::HashGridConfig;
    use crate::synth::{synth_scene, SynthSpec};

    fn small_config(feature_dim: usize, offsets: usize) -> HemgsConfig {
        let mut cfg = HemgsConfig::new(feature_dim, offsets);
        cfg.hash = HashGridConfig {
            levels: 4,
            base_resolution: 8,
            max_resolution: 64,
            log2_table_size: 12,
            features_per_level: 2,
        };
        cfg
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lambdas: vec![], ..Default::default() },
            TrainConfig { lambdas: vec![0.5], ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { mlp_lr: -1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn zero_iterations_keeps_initialization() {
        let scene = synth_scene(&SynthSpec::new(30, 1).dims(4, 2)).unwrap();
        let model = HemgsModel::new(small_config(4, 2)).unwrap();
        let ext = AgnosticExtractor::builtin();
        let out = train(&scene, &ext, model.clone(), &TrainConfig { iterations: 0, ..Default::default() }).unwrap();
        assert_eq!(out.model, model);
        assert!(out.log.rows.is_empty());
    }

    #[test]
    fn cache_matches_sequential_decode() {
        let scene = synth_scene(&SynthSpec::new(200, 2).dims(4, 2)).unwrap();
        let mut model = HemgsModel::new(small_config(4, 2)).unwrap();
        let ext = AgnosticExtractor::builtin();
        let data = TrainData::new(&scene, &ext, &model).unwrap();
        init_from_data(&mut model, &data);
        let lambda = RateLambda::new(2e-3).unwrap();
        let cache = decoded_cache(&model, &data, lambda).unwrap();
        let c = compress(&scene, &model.snapped().unwrap(), &ext, 2e-3).unwrap();
        let snapped_cache = decoded_cache(&model.snapped().unwrap(), &data, lambda).unwrap();
        for (r, a) in c.decoded.anchors.iter().enumerate() {
            assert_eq!(a.feature, snapped_cache.features[r]);
            assert_eq!(a.scof, snapped_cache.scof[r]);
        }
        assert_eq!(cache.features.len(), 200);
    }

    /// Independent forward computation of the batch loss.
    #[test]
    fn loss_matches_scripted_oracle() {
        let scene = synth_scene(&SynthSpec::new(60, 3).dims(4, 2)).unwrap();
        let mut model = HemgsModel::new(small_config(4, 2)).unwrap();
        let ext = AgnosticExtractor::builtin();
        let data = TrainData::new(&scene, &ext, &model).unwrap();
        init_from_data(&mut model, &data);
        let lambda = RateLambda::new(3e-3).unwrap();
        let cache = decoded_cache(&model, &data, lambda).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<BatchSample> =
            [3usize, 17, 40, 59].iter().map(|&r| BatchSample::draw(r, &data, &mut rng)).collect();
        let w = DistortionWeights::default();
        let got = batch_loss_grad(&model, &data, &cache, lambda, &samples, &w, None).unwrap();

        let mut dist = 0.0;
        let mut bits = 0.0;
        for s in &samples {
            let r = s.rank;
            let hash = model.hash.query(data.geometry.unit_locations[r]).unwrap();
            let agn = &data.geometry.agnostic[r];
            let nb = data.geometry.neighbors(r, &cache.features, r).unwrap();
            let p1 = model
                .predict(
                    Stage::Feature,
                    &StageInput { agnostic: agn, hash: &hash, local: None, neighbors: &nb, lambda },
                )
                .unwrap();
            let mut f_hat = Vec::new();
            let mut fe = 0.0;
            for (i, &x) in data.features[r].iter().enumerate() {
                let q = (x / p1.step[i]).round() * p1.step[i];
                f_hat.push(q);
                fe += (q - x).powi(2);
                let y = x + s.noise_feature[i] * p1.step[i];
                let lo = (y - p1.step[i] / 2.0 - p1.mu[i]) / p1.sigma[i];
                let hi = (y + p1.step[i] / 2.0 - p1.mu[i]) / p1.sigma[i];
                bits -= interval_mass(lo, hi).log2();
            }
            dist += fe / 4.0;
            let nb = data.geometry.neighbors(r, &cache.scof, r).unwrap();
            let p2 = model
                .predict(
                    Stage::ScalingOffsets,
                    &StageInput { agnostic: agn, hash: &hash, local: Some(&f_hat), neighbors: &nb, lambda },
                )
                .unwrap();
            let (mut se, mut oe) = (0.0, 0.0);
            for (i, &x) in data.scof[r].iter().enumerate() {
                let q = (x / p2.step[i]).round() * p2.step[i];
                if i < SCALING_DIM {
                    se += (q - x).powi(2);
                } else {
                    oe += (q - x).powi(2);
                }
                let y = x + s.noise_scof[i] * p2.step[i];
                let lo = (y - p2.step[i] / 2.0 - p2.mu[i]) / p2.sigma[i];
                let hi = (y + p2.step[i] / 2.0 - p2.mu[i]) / p2.sigma[i];
                bits -= interval_mass(lo, hi).log2();
            }
            dist += 10.0 * se / 6.0 + 10.0 * oe / 6.0;
        }
        dist /= 4.0;
        bits /= 4.0;
        let total = dist + 3e-3 * bits;
        assert!((got.distortion - dist).abs() <= 1e-9 * dist.max(1.0), "{} vs {dist}", got.distortion);
        assert!((got.rate_bits - bits).abs() <= 1e-9 * bits.max(1.0));
        assert!((got.total - total).abs() <= 1e-5 * total.abs().max(1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences_on_samples() {
        let scene = synth_scene(&SynthSpec::new(12, 5).dims(4, 2)).unwrap();
        let mut cfg = small_config(4, 2);
        cfg.hidden = 16;
        let mut model = HemgsModel::new(cfg).unwrap();
        let ext = AgnosticExtractor::builtin();
        let data = TrainData::new(&scene, &ext, &model).unwrap();
        init_from_data(&mut model, &data);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        model.visit_mut(&mut |name, t| {
            if name.contains("vrp") || name.contains("dist") || name.starts_with("hash") {
                t.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
            }
        });
        let lambda = RateLambda::new(2e-3).unwrap();
        let cache = decoded_cache(&model, &data, lambda).unwrap();
        let mut samples: Vec<BatchSample> = (0..data.len()).map(|r| BatchSample::draw(r, &data, &mut rng)).collect();
        for s in &mut samples {
            s.residual_feature = Some((0..4).map(|_| rng.random::<f64>() - 0.5).collect());
            s.residual_scof = Some((0..12).map(|_| rng.random::<f64>() - 0.5).collect());
        }
        let w = DistortionWeights::default();
        let mut grads = model.zero_grad();
        batch_loss_grad(&model, &data, &cache, lambda, &samples, &w, Some(&mut grads)).unwrap();
        let mut analytic = Vec::new();
        grads.visit(&mut |name, t| analytic.push((name.to_string(), t.to_vec())));
        let loss = |m: &HemgsModel| batch_loss_grad(m, &data, &cache, lambda, &samples, &w, None).unwrap().total;
        let mut checked = 0;
        for (ti, (name, g)) in analytic.iter().enumerate() {
            let idx: Vec<usize> = if name.starts_with("hash") {
                g.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).take(6).collect()
            } else {
                (0..g.len()).step_by((g.len() / 6).max(1)).collect()
            };
            for i in idx {
                let h = 1e-6;
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let mut k = 0;
                    m.visit_mut(&mut |_, t| {
                        if k == ti {
                            t[i] += delta;
                        }
                        k += 1;
                    });
                    loss(&m)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (fd - g[i]).abs();
                assert!(err <= 1e-6 + 1e-4 * fd.abs().max(g[i].abs()), "{name}[{i}]: fd {fd} analytic {}", g[i]);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn training_is_deterministic_and_improves_the_fit() {
        let scene = synth_scene(&SynthSpec::new(400, 6).dims(8, 3)).unwrap();
        let model = HemgsModel::new(small_config(8, 3)).unwrap();
        let ext = AgnosticExtractor::builtin();
        let cfg =
            TrainConfig { iterations: 150, batch_size: 32, log_every: 10, cache_refresh: 25, ..Default::default() };
        let a = train(&scene, &ext, model.clone(), &cfg).unwrap();
        let b = train(&scene, &ext, model.clone(), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        assert!(a.log.to_tsv().starts_with("iteration\tlambda"));
        let mut init = model;
        let data = TrainData::new(&scene, &ext, &init).unwrap();
        init_from_data(&mut init, &data);
        let lambda = RateLambda::new(1e-3).unwrap();
        let before = evaluate(&init, &data, lambda, &cfg.weights).unwrap();
        let after = evaluate(&a.model, &data, lambda, &cfg.weights).unwrap();
        assert!(after.total < before.total, "{before:?} -> {after:?}");
    }

    #[test]
    fn baseline_fit_finds_the_spread() {
        let scene =
            synth_scene(&SynthSpec::new(500, 7).dims(4, 2).attributes(crate::synth::AttributeModel::IidGaussian))
                .unwrap();
        let model = HemgsModel::new(small_config(4, 2)).unwrap();
        let ext = AgnosticExtractor::builtin();
        let c = compress(&scene, &model, &ext, 1e-3).unwrap();
        let base = factorized_baseline(&c.decoded);
        // unit-variance features coded at step 1
        for s in &base.feature_sigma {
            assert!((0.7..1.4).contains(s), "{s}");
        }
        assert!(base.total_bits() > 0.0);
    }

    #[test]
    fn eval_rd_rows_are_sorted() {
        let scene = synth_scene(&SynthSpec::new(50, 8).dims(4, 2)).unwrap();
        let model = HemgsModel::new(small_config(4, 2)).unwrap();
        let ext = AgnosticExtractor::builtin();
        let rows = eval_rd(&scene, &model, &ext, &[3e-3, 1e-3], &DistortionWeights::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].lambda < rows[1].lambda);
        let single = eval_rd(&scene, &model, &ext, &[2e-3], &DistortionWeights::default()).unwrap();
        assert_eq!(single.len(), 1);
        assert!(rd_table_tsv(&single).lines().count() == 2);
    }
}

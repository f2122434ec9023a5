//! The conditional entropy model: per anchor and per stage it predicts the
//! quantization steps and the Gaussian `(mu, sigma)` of every element.
//!
//! Three paths feed a stage:
//! - the hyperprior, fusing fixed point-set features, a scene-specific hash
//!   grid and (second stage) the anchor's own decoded feature;
//! - the variable-rate predictor, mapping the prior and `log10(lambda)` to
//!   steps;
//! - the context head, pooling already-decoded values of neighbouring anchors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::context::{coding_order, morton3, CodingOrder, ContextError, ContextIndex, ContextParams, ContextSet};
use crate::entropy_model::{EntropyError, SIGMA_FLOOR};
pub use crate::entropy_model::{GaussianParams, QuantStep};
use crate::nn::hashgrid::HashGridTape;
use crate::nn::serialize::{load_into, read_blob, write_blob};
use crate::nn::{
    sigmoid, softplus, Activation, AgnosticExtractor, HashGridConfig, HashGridEncoder, HashGridGrad, Mlp, MlpTape,
    NnError, Params,
};
use crate::scene::{dequantize_location, normalized_location, voxel_of, Aabb, SCALING_DIM};

pub const LAMBDA_MIN: f64 = 1e-4;
pub const LAMBDA_MAX: f64 = 1e-2;
pub const DEFAULT_LAMBDAS: [f64; 4] = [1e-3, 2e-3, 3e-3, 4e-3];
pub const MODEL_KIND: &str = "hemgs-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HemgsError {
    #[error("lambda {0} outside [1e-4, 1e-2]")]
    Lambda(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("anchor {target} references neighbour {neighbor} that is not decoded yet")]
    Causality { target: usize, neighbor: usize },
    #[error("anchor at rank {rank} is not in strictly increasing Morton order")]
    Order { rank: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Context(#[from] ContextError),
}

/// The rate-distortion trade-off parameter.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RateLambda(f64);

impl RateLambda {
    pub fn new(value: f64) -> Result<Self, HemgsError> {
        if (LAMBDA_MIN..=LAMBDA_MAX).contains(&value) {
            Ok(RateLambda(value))
        } else {
            Err(HemgsError::Lambda(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `log10(lambda)` mapped linearly from `[-4, -2]` to `[-1, 1]`.
    pub fn conditioning(self) -> f64 {
        libm::log10(self.0) + 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Feature,
    ScalingOffsets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HemgsConfig {
    pub feature_dim: usize,
    pub offsets_per_anchor: usize,
    pub hash: HashGridConfig,
    pub agnostic_dim: usize,
    pub prior_dim: usize,
    pub hidden: usize,
    pub context_hidden: usize,
    pub context_embed: usize,
    pub context_dim: usize,
    pub receptive_field: u32,
    pub max_context: usize,
    pub use_agnostic: bool,
    pub use_context: bool,
    pub feature_base_step: f64,
    pub scof_base_step: f64,
    pub seed: u64,
}

impl HemgsConfig {
    pub fn new(feature_dim: usize, offsets_per_anchor: usize) -> Self {
        HemgsConfig {
            feature_dim,
            offsets_per_anchor,
            hash: HashGridConfig::default(),
            agnostic_dim: 32,
            prior_dim: 32,
            hidden: 64,
            context_hidden: 32,
            context_embed: 16,
            context_dim: 32,
            receptive_field: crate::context::DEFAULT_RECEPTIVE_FIELD,
            max_context: crate::context::DEFAULT_MAX_CONTEXT,
            use_agnostic: true,
            use_context: true,
            feature_base_step: 1.0,
            scof_base_step: 0.05,
            seed: 0,
        }
    }

    pub fn scof_dim(&self) -> usize {
        SCALING_DIM + 3 * self.offsets_per_anchor
    }

    pub fn stage_dim(&self, stage: Stage) -> usize {
        match stage {
            Stage::Feature => self.feature_dim,
            Stage::ScalingOffsets => self.scof_dim(),
        }
    }

    pub fn base_step(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Feature => self.feature_base_step,
            Stage::ScalingOffsets => self.scof_base_step,
        }
    }

    pub fn context_params(&self) -> Result<ContextParams, HemgsError> {
        Ok(ContextParams::new(self.receptive_field, self.max_context)?)
    }

    fn hyper_input_dim(&self, stage: Stage) -> usize {
        let local = if stage == Stage::ScalingOffsets { self.feature_dim } else { 0 };
        self.agnostic_dim + self.hash.output_dim() + local
    }

    fn validate(&self) -> Result<(), HemgsError> {
        let dims = [
            self.feature_dim,
            self.offsets_per_anchor,
            self.agnostic_dim,
            self.prior_dim,
            self.hidden,
            self.context_hidden,
            self.context_embed,
            self.context_dim,
        ];
        if dims.contains(&0) {
            return Err(HemgsError::Shape(format!("zero width in model config {self:?}")));
        }
        if !(self.feature_base_step > 0.0 && self.scof_base_step > 0.0) {
            return Err(HemgsError::Shape("base steps must be positive".into()));
        }
        self.hash.validate()?;
        self.context_params()?;
        Ok(())
    }
}

/// The MLPs of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageNets {
    pub hyper: Mlp,
    pub vrp: Mlp,
    pub ctx_shared: Mlp,
    pub ctx_head: Mlp,
    pub dist: Mlp,
}

impl StageNets {
    fn new(cfg: &HemgsConfig, stage: Stage, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.stage_dim(stage);
        let p = cfg.prior_dim;
        let hyper = Mlp::random(&[cfg.hyper_input_dim(stage), cfg.hidden, p], Activation::None, rng);
        let mut vrp = Mlp::random(&[2 * p, cfg.hidden, d], Activation::ExpClamped, rng);
        vrp.zero_last_layer();
        let ctx_shared = Mlp::random(&[3 + d, cfg.context_hidden, cfg.context_embed], Activation::Relu, rng);
        let ctx_head = Mlp::random(&[2 * cfg.context_embed, cfg.hidden, cfg.context_dim], Activation::None, rng);
        let mut dist = Mlp::random(&[p + cfg.context_dim + d, cfg.hidden, 2 * d], Activation::None, rng);
        dist.zero_last_layer();
        StageNets { hyper, vrp, ctx_shared, ctx_head, dist }
    }

    fn zeros_like(&self) -> Self {
        StageNets {
            hyper: self.hyper.zeros_like(),
            vrp: self.vrp.zeros_like(),
            ctx_shared: self.ctx_shared.zeros_like(),
            ctx_head: self.ctx_head.zeros_like(),
            dist: self.dist.zeros_like(),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.hyper.visit_named(&format!("{prefix}.hyper"), f);
        self.vrp.visit_named(&format!("{prefix}.vrp"), f);
        self.ctx_shared.visit_named(&format!("{prefix}.ctx_shared"), f);
        self.ctx_head.visit_named(&format!("{prefix}.ctx_head"), f);
        self.dist.visit_named(&format!("{prefix}.dist"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.hyper.visit_named_mut(&format!("{prefix}.hyper"), f);
        self.vrp.visit_named_mut(&format!("{prefix}.vrp"), f);
        self.ctx_shared.visit_named_mut(&format!("{prefix}.ctx_shared"), f);
        self.ctx_head.visit_named_mut(&format!("{prefix}.ctx_head"), f);
        self.dist.visit_named_mut(&format!("{prefix}.dist"), f);
    }
}

/// A decoded neighbour as seen by the context head.
#[derive(Debug, Clone, Copy)]
pub struct NeighborValues<'a> {
    pub offset: [i32; 3],
    pub values: &'a [f64],
}

/// Everything one stage prediction depends on.
#[derive(Debug, Clone, Copy)]
pub struct StageInput<'a> {
    pub agnostic: &'a [f64],
    pub hash: &'a [f64],
    /// The anchor's own decoded feature; second stage only.
    pub local: Option<&'a [f64]>,
    pub neighbors: &'a [NeighborValues<'a>],
    pub lambda: RateLambda,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub step: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Prediction {
    pub fn params(&self) -> Result<GaussianParams, HemgsError> {
        Ok(GaussianParams::new(self.mu.clone(), self.sigma.clone())?)
    }

    pub fn quant_step(&self) -> Result<QuantStep, HemgsError> {
        Ok(QuantStep::new(self.step.clone())?)
    }
}

#[derive(Debug, Clone)]
struct ContextTape {
    shared: Vec<MlpTape>,
    argmax: Vec<usize>,
    head: MlpTape,
}

/// Forward state of one stage prediction, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct StageTape {
    stage: Stage,
    hyper: MlpTape,
    vrp: MlpTape,
    ctx: Option<ContextTape>,
    dist: MlpTape,
    pub prediction: Prediction,
}

/// Gradients of a stage prediction with respect to its differentiable inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInputGrad {
    pub hash: Vec<f64>,
    pub local: Option<Vec<f64>>,
}

/// Scene-specific parameters of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct HemgsModel {
    pub config: HemgsConfig,
    pub hash: HashGridEncoder,
    pub feature: StageNets,
    pub scof: StageNets,
}

/// Gradient accumulator shaped like a [`HemgsModel`].
#[derive(Debug, Clone)]
pub struct HemgsGrad {
    pub hash: HashGridGrad,
    pub feature: StageNets,
    pub scof: StageNets,
}

impl HemgsGrad {
    pub fn reset(&mut self) {
        self.hash.reset();
        for nets in [&mut self.feature, &mut self.scof] {
            nets.visit_mut("", &mut |_, t| t.iter_mut().for_each(|v| *v = 0.0));
        }
    }

    /// Multiplies every accumulated value by `factor`.
    pub fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageNets {
        match stage {
            Stage::Feature => &mut self.feature,
            Stage::ScalingOffsets => &mut self.scof,
        }
    }
}

impl Params for HemgsModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.hash.visit(f);
        self.feature.visit("feature", f);
        self.scof.visit("scof", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.hash.visit_mut(f);
        self.feature.visit_mut("feature", f);
        self.scof.visit_mut("scof", f);
    }
}

impl Params for HemgsGrad {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.hash.visit(f);
        self.feature.visit("feature", f);
        self.scof.visit("scof", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.hash.visit_mut(f);
        self.feature.visit_mut("feature", f);
        self.scof.visit_mut("scof", f);
    }
}

impl HemgsModel {
    pub fn new(config: HemgsConfig) -> Result<Self, HemgsError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let hash = HashGridEncoder::new(config.hash.clone(), config.seed ^ 0x9e37_79b9_7f4a_7c15)?;
        let feature = StageNets::new(&config, Stage::Feature, &mut rng);
        let scof = StageNets::new(&config, Stage::ScalingOffsets, &mut rng);
        Ok(HemgsModel { config, hash, feature, scof })
    }

    pub fn zero_grad(&self) -> HemgsGrad {
        HemgsGrad {
            hash: HashGridGrad::for_encoder(&self.hash),
            feature: self.feature.zeros_like(),
            scof: self.scof.zeros_like(),
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageNets {
        match stage {
            Stage::Feature => &self.feature,
            Stage::ScalingOffsets => &self.scof,
        }
    }

    /// Parameter file bytes; values are rounded to `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>, HemgsError> {
        Ok(write_blob(MODEL_KIND, MODEL_VERSION, &self.config, self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HemgsError> {
        let (manifest, values) = read_blob(bytes)?;
        if manifest.kind != MODEL_KIND || manifest.version != MODEL_VERSION {
            return Err(NnError::Format(format!(
                "expected {MODEL_KIND} v{MODEL_VERSION}, found {} v{}",
                manifest.kind, manifest.version
            ))
            .into());
        }
        let config: HemgsConfig =
            serde_json::from_value(manifest.config.clone()).map_err(|e| NnError::Format(e.to_string()))?;
        let mut model = HemgsModel::new(config)?;
        load_into(&mut model, &manifest, &values)?;
        Ok(model)
    }

    /// The model exactly as a decoder will see it (parameters rounded to `f32`).
    pub fn snapped(&self) -> Result<Self, HemgsError> {
        Self::from_bytes(&self.to_bytes()?)
    }

    pub fn check_scene_dims(&self, feature_dim: usize, offsets_per_anchor: usize) -> Result<(), HemgsError> {
        if feature_dim != self.config.feature_dim || offsets_per_anchor != self.config.offsets_per_anchor {
            return Err(HemgsError::Shape(format!(
                "model expects feature_dim {} and {} offsets, scene has {} and {}",
                self.config.feature_dim, self.config.offsets_per_anchor, feature_dim, offsets_per_anchor
            )));
        }
        Ok(())
    }

    /// Concatenated prior inputs, then the hyperprior MLP.
    pub fn hyperprior_feature(&self, stage: Stage, input: &StageInput<'_>) -> Result<Vec<f64>, HemgsError> {
        let x = self.hyper_input(stage, input)?;
        Ok(self.stage(stage).hyper.forward(&x)?)
    }

    /// Steps `s0 * 2^clamp(u, -4, 4)` for a prior.
    pub fn predict_step(&self, stage: Stage, prior: &[f64], lambda: RateLambda) -> Result<QuantStep, HemgsError> {
        let u = self.stage(stage).vrp.forward(&vrp_input(prior, lambda))?;
        let s0 = self.config.base_step(stage);
        Ok(QuantStep::new(u.iter().map(|v| s0 * v).collect())?)
    }

    /// Pooled neighbour feature; zero for an empty set or a disabled path.
    pub fn context_feature(&self, stage: Stage, neighbors: &[NeighborValues<'_>]) -> Result<Vec<f64>, HemgsError> {
        Ok(self
            .context_tape(stage, neighbors)?
            .map_or_else(|| vec![0.0; self.config.context_dim], |t| t.head.output().to_vec()))
    }

    /// `mu` and `sigma = softplus(raw) + floor` from prior, context and steps.
    pub fn predict_distribution(
        &self,
        stage: Stage,
        prior: &[f64],
        context: &[f64],
        step: &QuantStep,
    ) -> Result<GaussianParams, HemgsError> {
        let x = self.dist_input(stage, prior, context, step.as_slice())?;
        let raw = self.stage(stage).dist.forward(&x)?;
        let d = self.config.stage_dim(stage);
        Ok(GaussianParams::new(raw[..d].to_vec(), raw[d..].iter().map(|&r| softplus(r) + SIGMA_FLOOR).collect())?)
    }

    /// Steps and distribution for one anchor and stage.
    pub fn predict(&self, stage: Stage, input: &StageInput<'_>) -> Result<Prediction, HemgsError> {
        Ok(self.forward(stage, input)?.prediction)
    }

    fn hyper_input(&self, stage: Stage, input: &StageInput<'_>) -> Result<Vec<f64>, HemgsError> {
        let cfg = &self.config;
        if input.agnostic.len() != cfg.agnostic_dim || input.hash.len() != cfg.hash.output_dim() {
            return Err(HemgsError::Shape(format!(
                "prior inputs of width {} and {}, expected {} and {}",
                input.agnostic.len(),
                input.hash.len(),
                cfg.agnostic_dim,
                cfg.hash.output_dim()
            )));
        }
        let mut x = Vec::with_capacity(cfg.hyper_input_dim(stage));
        if cfg.use_agnostic {
            x.extend_from_slice(input.agnostic);
        } else {
            x.resize(cfg.agnostic_dim, 0.0);
        }
        x.extend_from_slice(input.hash);
        match (stage, input.local) {
            (Stage::Feature, None) => {}
            (Stage::ScalingOffsets, Some(local)) if local.len() == cfg.feature_dim => x.extend_from_slice(local),
            _ => {
                return Err(HemgsError::Shape("the local feature is required in, and only in, the second stage".into()))
            }
        }
        Ok(x)
    }

    fn dist_input(&self, stage: Stage, prior: &[f64], context: &[f64], step: &[f64]) -> Result<Vec<f64>, HemgsError> {
        let d = self.config.stage_dim(stage);
        if step.len() != d || context.len() != self.config.context_dim {
            return Err(HemgsError::Shape(format!("{} steps / {} context values", step.len(), context.len())));
        }
        let s0 = self.config.base_step(stage);
        let mut x = Vec::with_capacity(prior.len() + context.len() + d);
        x.extend_from_slice(prior);
        x.extend_from_slice(context);
        x.extend(step.iter().map(|s| libm::log2(s / s0)));
        Ok(x)
    }

    fn context_tape(&self, stage: Stage, neighbors: &[NeighborValues<'_>]) -> Result<Option<ContextTape>, HemgsError> {
        if !self.config.use_context || neighbors.is_empty() {
            return Ok(None);
        }
        let nets = self.stage(stage);
        let d = self.config.stage_dim(stage);
        let e = self.config.context_embed;
        let half = (self.config.receptive_field / 2).max(1) as f64;
        let mut shared = Vec::with_capacity(neighbors.len());
        let mut input = vec![0.0; 3 + d];
        for nb in neighbors {
            if nb.values.len() != d {
                return Err(HemgsError::Shape(format!("neighbour has {} values, expected {d}", nb.values.len())));
            }
            for a in 0..3 {
                input[a] = nb.offset[a] as f64 / half;
            }
            input[3..].copy_from_slice(nb.values);
            shared.push(nets.ctx_shared.forward_tape(&input)?);
        }
        let mut pooled = vec![0.0; 2 * e];
        let mut argmax = vec![0usize; e];
        let inv = 1.0 / neighbors.len() as f64;
        for k in 0..e {
            let mut best = f64::NEG_INFINITY;
            for (j, t) in shared.iter().enumerate() {
                let v = t.output()[k];
                pooled[k] += v * inv;
                if v > best {
                    best = v;
                    argmax[k] = j;
                }
            }
            pooled[e + k] = best;
        }
        let head = nets.ctx_head.forward_tape(&pooled)?;
        Ok(Some(ContextTape { shared, argmax, head }))
    }

    /// Full stage forward pass, keeping what the backward pass needs.
    pub fn forward(&self, stage: Stage, input: &StageInput<'_>) -> Result<StageTape, HemgsError> {
        let nets = self.stage(stage);
        let d = self.config.stage_dim(stage);
        let s0 = self.config.base_step(stage);
        let hyper = nets.hyper.forward_tape(&self.hyper_input(stage, input)?)?;
        let prior = hyper.output();
        let vrp = nets.vrp.forward_tape(&vrp_input(prior, input.lambda))?;
        let step: Vec<f64> = vrp.output().iter().map(|u| s0 * u).collect();
        let ctx = self.context_tape(stage, input.neighbors)?;
        let zeros;
        let context = match &ctx {
            Some(t) => t.head.output(),
            None => {
                zeros = vec![0.0; self.config.context_dim];
                &zeros
            }
        };
        let dist = nets.dist.forward_tape(&self.dist_input(stage, prior, context, &step)?)?;
        let raw = dist.output();
        let prediction = Prediction {
            step,
            mu: raw[..d].to_vec(),
            sigma: raw[d..].iter().map(|&r| softplus(r) + SIGMA_FLOOR).collect(),
        };
        Ok(StageTape { stage, hyper, vrp, ctx, dist, prediction })
    }

    /// Accumulates parameter gradients for upstream gradients on the step,
    /// `mu` and `sigma`, and returns the gradients for the hash feature and
    /// the local feature.
    pub fn backward(
        &self,
        tape: &StageTape,
        d_step: &[f64],
        d_mu: &[f64],
        d_sigma: &[f64],
        grads: &mut HemgsGrad,
    ) -> Result<StageInputGrad, HemgsError> {
        let stage = tape.stage;
        let nets = self.stage(stage);
        let g = grads.stage_mut(stage);
        let d = self.config.stage_dim(stage);
        let p = self.config.prior_dim;
        let c = self.config.context_dim;
        let s0 = self.config.base_step(stage);
        if d_step.len() != d || d_mu.len() != d || d_sigma.len() != d {
            return Err(HemgsError::Shape("upstream gradient width".into()));
        }

        let raw = tape.dist.output();
        let mut d_raw = Vec::with_capacity(2 * d);
        d_raw.extend_from_slice(d_mu);
        d_raw.extend((0..d).map(|e| d_sigma[e] * sigmoid(raw[d + e])));
        let g_dist = nets.dist.backward(&tape.dist, &d_raw, &mut g.dist)?;

        let mut g_prior = g_dist[..p].to_vec();
        let g_ctx = &g_dist[p..p + c];
        let u = tape.vrp.output();
        let d_u: Vec<f64> =
            (0..d).map(|e| d_step[e] * s0 + g_dist[p + c + e] / (u[e] * std::f64::consts::LN_2)).collect();
        let g_vrp = nets.vrp.backward(&tape.vrp, &d_u, &mut g.vrp)?;
        for k in 0..p {
            g_prior[k] += g_vrp[k];
        }

        if let Some(ctx) = &tape.ctx {
            let e = self.config.context_embed;
            let g_pooled = nets.ctx_head.backward(&ctx.head, g_ctx, &mut g.ctx_head)?;
            let inv = 1.0 / ctx.shared.len() as f64;
            let mut g_embed = vec![0.0; e];
            for (j, t) in ctx.shared.iter().enumerate() {
                for k in 0..e {
                    g_embed[k] = g_pooled[k] * inv + if ctx.argmax[k] == j { g_pooled[e + k] } else { 0.0 };
                }
                nets.ctx_shared.backward(t, &g_embed, &mut g.ctx_shared)?;
            }
        }

        let g_in = nets.hyper.backward(&tape.hyper, &g_prior, &mut g.hyper)?;
        let a = self.config.agnostic_dim;
        let h = self.config.hash.output_dim();
        Ok(StageInputGrad {
            hash: g_in[a..a + h].to_vec(),
            local: (stage == Stage::ScalingOffsets).then(|| g_in[a + h..].to_vec()),
        })
    }

    /// Hash features of a normalized location, with the tape for backward.
    pub fn hash_features(&self, location: [f64; 3]) -> Result<(Vec<f64>, HashGridTape), HemgsError> {
        Ok(self.hash.query_tape(location)?)
    }
}

fn vrp_input(prior: &[f64], lambda: RateLambda) -> Vec<f64> {
    let mut x = prior.to_vec();
    x.resize(2 * prior.len(), lambda.conditioning());
    x
}

/// 16-byte identifier of a parameter file together with the extractor it was
/// trained against.
pub fn model_digest(model_bytes: &[u8], extractor: &AgnosticExtractor) -> [u8; 16] {
    let mut h = Sha256::new();
    h.update(model_bytes);
    h.update(extractor.fingerprint());
    let full: [u8; 32] = h.finalize().into();
    full[..16].try_into().unwrap()
}

/// Decoder-reproducible per-anchor geometry, all in coding order.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub order: CodingOrder,
    pub qlocations: Vec<[u16; 3]>,
    pub agnostic: Vec<Vec<f64>>,
    /// Locations normalized to the unit cube, the hash grid's input.
    pub unit_locations: Vec<[f64; 3]>,
    pub contexts: Vec<ContextSet>,
}

impl SceneGeometry {
    /// Builds the geometry from quantized locations that are already in
    /// coding order; anything else is an error.
    pub fn from_ordered(
        qlocations: Vec<[u16; 3]>,
        aabb: &Aabb,
        voxel_size: f32,
        extractor: &AgnosticExtractor,
        config: &HemgsConfig,
    ) -> Result<Self, HemgsError> {
        let voxels: Vec<[u32; 3]> = qlocations.iter().map(|q| voxel_of(aabb, voxel_size, q)).collect();
        for r in 1..voxels.len() {
            if morton3(voxels[r]) <= morton3(voxels[r - 1]) {
                return Err(HemgsError::Order { rank: r });
            }
        }
        let order = coding_order(&voxels)?;
        debug_assert!(order.order.iter().enumerate().all(|(r, &i)| r == i));
        let agnostic = if qlocations.is_empty() {
            Vec::new()
        } else if config.use_agnostic {
            if extractor.output_dim() != config.agnostic_dim {
                return Err(HemgsError::Shape(format!(
                    "extractor emits {} features, model expects {}",
                    extractor.output_dim(),
                    config.agnostic_dim
                )));
            }
            let world: Vec<[f64; 3]> = qlocations.iter().map(|q| dequantize_location(aabb, q)).collect();
            extractor.features(&world, voxel_size as f64)?
        } else {
            vec![vec![0.0; config.agnostic_dim]; qlocations.len()]
        };
        let contexts = ContextIndex::new(&order, config.context_params()?).select_all();
        Ok(SceneGeometry {
            unit_locations: qlocations.iter().map(normalized_location).collect(),
            order,
            qlocations,
            agnostic,
            contexts,
        })
    }

    /// Sorts quantized locations into coding order first; returns the
    /// geometry and, for each rank, the original anchor index.
    pub fn from_unordered(
        qlocations: &[[u16; 3]],
        aabb: &Aabb,
        voxel_size: f32,
        extractor: &AgnosticExtractor,
        config: &HemgsConfig,
    ) -> Result<(Self, Vec<usize>), HemgsError> {
        let voxels: Vec<[u32; 3]> = qlocations.iter().map(|q| voxel_of(aabb, voxel_size, q)).collect();
        let order = coding_order(&voxels)?;
        let ordered = order.order.iter().map(|&i| qlocations[i]).collect();
        let geometry = Self::from_ordered(ordered, aabb, voxel_size, extractor, config)?;
        Ok((geometry, order.order))
    }

    pub fn len(&self) -> usize {
        self.qlocations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qlocations.is_empty()
    }

    /// Neighbour views of `rank` into `values` (decoded values per rank).
    pub fn neighbors<'a>(
        &self,
        rank: usize,
        values: &'a [Vec<f64>],
        decoded: usize,
    ) -> Result<Vec<NeighborValues<'a>>, HemgsError> {
        self.contexts[rank]
            .neighbors
            .iter()
            .map(|nb| {
                if nb.rank >= decoded.min(rank) {
                    return Err(HemgsError::Causality { target: rank, neighbor: nb.rank });
                }
                Ok(NeighborValues { offset: nb.offset, values: &values[nb.rank] })
            })
            .collect()
    }
}

//! Fixed-weight two-stage point-set feature extractor.
//!
//! Each stage gathers the `k` nearest anchors (the anchor itself included),
//! runs a shared MLP on every neighbour's relative coordinates (plus, in the
//! second stage, the neighbour's first-stage feature) and max-pools. The
//! weights never change and are not stored per scene.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::serialize::{load_into, read_blob, write_blob};
use super::{Activation, Mlp, NnError, Params};

pub const ASSET_KIND: &str = "agnostic-extractor";
pub const ASSET_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 0x5eed_a9e0;

static BUILTIN_ASSET: &[u8] = include_bytes!("../../assets/agnostic_v1.hmgsw");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgnosticConfig {
    pub k: usize,
    pub stage1: Vec<usize>,
    pub stage2: Vec<usize>,
    /// Relative coordinates are measured in voxels and divided by this.
    pub coord_scale: u32,
}

impl Default for AgnosticConfig {
    fn default() -> Self {
        AgnosticConfig { k: 16, stage1: vec![3, 16, 16], stage2: vec![3 + 16, 32, 32], coord_scale: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgnosticExtractor {
    pub config: AgnosticConfig,
    stage1: Mlp,
    stage2: Mlp,
}

impl Params for AgnosticExtractor {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.stage1.visit_named("stage1", f);
        self.stage2.visit_named("stage2", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.stage1.visit_named_mut("stage1", f);
        self.stage2.visit_named_mut("stage2", f);
    }
}

impl AgnosticExtractor {
    /// Weights drawn from a seeded generator and rounded to `f32`, exactly as
    /// they would be after an asset round trip.
    pub fn seeded(config: AgnosticConfig, seed: u64) -> Result<Self, NnError> {
        if config.k == 0 || config.stage2.first() != Some(&(3 + config.stage1.last().copied().unwrap_or(0))) {
            return Err(NnError::Format(format!("inconsistent extractor config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ext = AgnosticExtractor {
            stage1: Mlp::random(&config.stage1, Activation::Relu, &mut rng),
            stage2: Mlp::random(&config.stage2, Activation::Relu, &mut rng),
            config,
        };
        ext.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v = *v as f32 as f64));
        Ok(ext)
    }

    /// The extractor shipped with the library.
    pub fn builtin() -> Self {
        Self::from_asset(BUILTIN_ASSET).expect("bundled extractor asset is valid")
    }

    pub fn from_asset(bytes: &[u8]) -> Result<Self, NnError> {
        let (manifest, values) = read_blob(bytes)?;
        if manifest.kind != ASSET_KIND || manifest.version != ASSET_VERSION {
            return Err(NnError::Format(format!(
                "expected {ASSET_KIND} v{ASSET_VERSION}, found {} v{}",
                manifest.kind, manifest.version
            )));
        }
        let config: AgnosticConfig =
            serde_json::from_value(manifest.config.clone()).map_err(|e| NnError::Format(e.to_string()))?;
        let mut ext = Self::seeded(config, 0)?;
        load_into(&mut ext, &manifest, &values)?;
        Ok(ext)
    }

    pub fn to_asset(&self) -> Result<Vec<u8>, NnError> {
        write_blob(ASSET_KIND, ASSET_VERSION, &self.config, self)
    }

    /// SHA-256 of the asset bytes; streams record it so a decoder can tell it
    /// is using the same extractor.
    pub fn fingerprint(&self) -> [u8; 32] {
        let bytes = self.to_asset().expect("extractor weights are finite");
        Sha256::digest(&bytes).into()
    }

    pub fn output_dim(&self) -> usize {
        self.stage2.out_dim()
    }

    /// One feature vector per location. `locations` are in world units and
    /// `voxel_size` sets the unit of the relative coordinates.
    pub fn features(&self, locations: &[[f64; 3]], voxel_size: f64) -> Result<Vec<Vec<f64>>, NnError> {
        if locations.is_empty() {
            return Err(NnError::Empty);
        }
        let scale = 1.0 / (voxel_size * self.config.coord_scale as f64);
        let knn = knn_sets(locations, self.config.k, voxel_size * 2.0);
        let rel = |i: usize, j: usize| [0, 1, 2].map(|a| (locations[j][a] - locations[i][a]) * scale);

        let mut first = Vec::with_capacity(locations.len());
        for (i, nbrs) in knn.iter().enumerate() {
            let mut pooled = vec![f64::NEG_INFINITY; self.stage1.out_dim()];
            for &j in nbrs {
                max_into(&mut pooled, &self.stage1.forward(&rel(i, j))?);
            }
            first.push(pooled);
        }
        let mut out = Vec::with_capacity(locations.len());
        let mut input = vec![0.0; self.stage2.in_dim()];
        for (i, nbrs) in knn.iter().enumerate() {
            let mut pooled = vec![f64::NEG_INFINITY; self.stage2.out_dim()];
            for &j in nbrs {
                input[..3].copy_from_slice(&rel(i, j));
                input[3..].copy_from_slice(&first[j]);
                max_into(&mut pooled, &self.stage2.forward(&input)?);
            }
            out.push(pooled);
        }
        Ok(out)
    }
}

fn max_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a = a.max(*b);
    }
}

fn cmp_point(a: &[f64; 3], b: &[f64; 3]) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}

/// The `k` nearest points to each point (itself included), ordered by
/// distance and then by coordinates, so the result does not depend on the
/// order of `points` except through exact duplicates.
pub fn knn_sets(points: &[[f64; 3]], k: usize, cell: f64) -> Vec<Vec<usize>> {
    let key = |p: &[f64; 3]| p.map(|c| (c / cell).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for c in grid.keys() {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let max_radius = (0..3).map(|a| hi[a] - lo[a]).max().unwrap_or(0);
    let k = k.min(points.len());

    points
        .iter()
        .map(|p| {
            let c = key(p);
            let mut cand: Vec<(f64, usize)> = Vec::new();
            let mut r = 0i64;
            loop {
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            if let Some(ids) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                                for &j in ids {
                                    let q = &points[j];
                                    let d2 = (0..3).map(|a| (q[a] - p[a]).powi(2)).sum::<f64>();
                                    cand.push((d2, j));
                                }
                            }
                        }
                    }
                }
                // Everything outside the scanned cube is at least r cells away.
                if cand.len() >= k {
                    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(cmp_point(&points[a.1], &points[b.1])));
                    let bound = r as f64 * cell;
                    if cand[k - 1].0 < bound * bound || r >= max_radius {
                        break;
                    }
                }
                if r >= max_radius {
                    break;
                }
                r += 1;
            }
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(cmp_point(&points[a.1], &points[b.1])));
            cand.truncate(k);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

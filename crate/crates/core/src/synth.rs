//! Deterministic synthetic scenes for tests, benchmarks and training demos.
//!
//! Anchors are placed at voxel centres (one per voxel). In the spatially
//! correlated mode every attribute is a smooth function of location plus a
//! short-range field, a term driven by local anchor density, and a small iid
//! residual, so conditional entropy models have something to exploit.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scene::{Aabb, Anchor, AnchorScene, SceneError, SCALING_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialPattern {
    Uniform,
    Clustered,
    Planar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeModel {
    IidGaussian,
    SpatiallyCorrelated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub seed: u64,
    pub pattern: SpatialPattern,
    pub attributes: AttributeModel,
    pub feature_dim: usize,
    pub offsets_per_anchor: usize,
    pub voxel_size: f32,
}

impl SynthSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        SynthSpec {
            count,
            seed,
            pattern: SpatialPattern::Uniform,
            attributes: AttributeModel::SpatiallyCorrelated,
            feature_dim: crate::scene::DEFAULT_FEATURE_DIM,
            offsets_per_anchor: crate::scene::DEFAULT_OFFSETS_PER_ANCHOR,
            voxel_size: 0.05,
        }
    }

    pub fn pattern(mut self, pattern: SpatialPattern) -> Self {
        self.pattern = pattern;
        self
    }

    pub fn attributes(mut self, attributes: AttributeModel) -> Self {
        self.attributes = attributes;
        self
    }

    pub fn dims(mut self, feature_dim: usize, offsets_per_anchor: usize) -> Self {
        self.feature_dim = feature_dim;
        self.offsets_per_anchor = offsets_per_anchor;
        self
    }

    /// Voxels per axis of the generated grid.
    pub fn grid_size(&self) -> u32 {
        (((8 * self.count.max(1)) as f64).cbrt().ceil() as u32).max(16)
    }
}

/// Generates a scene; a pure function of `spec`.
pub fn synth_scene(spec: &SynthSpec) -> Result<AnchorScene, SceneError> {
    if spec.feature_dim == 0 || spec.offsets_per_anchor == 0 {
        return Err(SceneError::Invalid("synthetic scene needs positive attribute dimensions".into()));
    }
    if !(spec.voxel_size.is_finite() && spec.voxel_size > 0.0) {
        return Err(SceneError::Invalid("voxel size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = spec.grid_size();
    let voxels = place_voxels(spec, grid, &mut rng);
    let extent = grid as f32 * spec.voxel_size;
    let aabb = Aabb::new([0.0; 3], [extent; 3])?;

    let attrs = match spec.attributes {
        AttributeModel::IidGaussian => iid_attributes(spec, voxels.len(), &mut rng),
        AttributeModel::SpatiallyCorrelated => correlated_attributes(spec, grid, &voxels, &mut rng),
    };
    let anchors = voxels
        .iter()
        .zip(attrs)
        .map(|(v, (feature, scaling, offsets))| Anchor {
            location: v.map(|c| (c as f32 + 0.5) * spec.voxel_size),
            feature,
            scaling,
            offsets,
        })
        .collect();
    AnchorScene::new(anchors, aabb, spec.voxel_size, spec.feature_dim, spec.offsets_per_anchor)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn place_voxels(spec: &SynthSpec, grid: u32, rng: &mut ChaCha8Rng) -> Vec<[u32; 3]> {
    let n = spec.count;
    let mut taken = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    let g = grid as f64;
    let inside = |p: [f64; 3]| p.iter().all(|&c| c >= 0.0 && c < g);

    let mut propose: Box<dyn FnMut(&mut ChaCha8Rng) -> [f64; 3]> = match spec.pattern {
        SpatialPattern::Uniform => Box::new(move |rng| [0; 3].map(|_| rng.random::<f64>() * g)),
        SpatialPattern::Clustered => {
            let clusters = (n / 400).max(1);
            let centers: Vec<[f64; 3]> =
                (0..clusters).map(|_| [0; 3].map(|_| (0.1 + 0.8 * rng.random::<f64>()) * g)).collect();
            let spread = g / 20.0 + 1.0;
            Box::new(move |rng| {
                let c = centers[rng.random_range(0..centers.len())];
                [0, 1, 2].map(|a| c[a] + spread * normal(rng))
            })
        }
        SpatialPattern::Planar => {
            let planes: Vec<([f64; 3], f64)> = (0..3)
                .map(|_| {
                    let mut nrm = [0; 3].map(|_| normal(rng));
                    let len = nrm.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-9);
                    nrm.iter_mut().for_each(|c| *c /= len);
                    let through = [0; 3].map(|_| (0.3 + 0.4 * rng.random::<f64>()) * g);
                    let d = nrm.iter().zip(through).map(|(a, b)| a * b).sum::<f64>();
                    (nrm, d)
                })
                .collect();
            Box::new(move |rng| {
                let (nrm, d) = planes[rng.random_range(0..planes.len())];
                let p = [0; 3].map(|_| rng.random::<f64>() * g);
                let dist = nrm.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() - d + 0.7 * normal(rng);
                [0, 1, 2].map(|a| p[a] - dist * nrm[a])
            })
        }
    };

    // Patterns can saturate their support; fall back to uniform placement then.
    let mut budget = 50 * n + 1000;
    while out.len() < n {
        let p = if budget > 0 {
            budget -= 1;
            propose(rng)
        } else {
            [0; 3].map(|_| rng.random::<f64>() * g)
        };
        if !inside(p) {
            continue;
        }
        let v = p.map(|c| c.floor() as u32);
        if taken.insert(v) {
            out.push(v);
        }
    }
    out
}

type Attributes = (Vec<f32>, [f32; SCALING_DIM], Vec<f32>);

fn iid_attributes(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<Attributes> {
    (0..n)
        .map(|_| {
            let feature = (0..spec.feature_dim).map(|_| normal(rng) as f32).collect();
            let scaling = [0; SCALING_DIM].map(|_| (0.3 * normal(rng)) as f32);
            let offsets = (0..3 * spec.offsets_per_anchor).map(|_| (0.3 * normal(rng)) as f32).collect();
            (feature, scaling, offsets)
        })
        .collect()
}

/// A bank of random plane waves over voxel coordinates.
struct WaveBank {
    waves: Vec<([f64; 3], f64)>,
}

impl WaveBank {
    fn new(count: usize, min_wavelength: f64, max_wavelength: f64, rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..count)
            .map(|_| {
                let mut dir = [0; 3].map(|_| normal(rng));
                let len = dir.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-9);
                let wavelength = min_wavelength + (max_wavelength - min_wavelength) * rng.random::<f64>();
                let k = std::f64::consts::TAU / wavelength;
                dir.iter_mut().for_each(|c| *c *= k / len);
                (dir, std::f64::consts::TAU * rng.random::<f64>())
            })
            .collect();
        WaveBank { waves }
    }

    /// Values of all waves at `p`, each with unit variance over space.
    fn eval(&self, p: [f64; 3]) -> Vec<f64> {
        self.waves
            .iter()
            .map(|(k, phase)| std::f64::consts::SQRT_2 * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
            .collect()
    }
}

/// Random mixing rows with unit-norm rows.
fn mixing(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let row: Vec<f64> = (0..cols).map(|_| normal(rng)).collect();
            let len = row.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-9);
            row.into_iter().map(|c| c / len).collect()
        })
        .collect()
}

fn mix(row: &[f64], basis: &[f64]) -> f64 {
    row.iter().zip(basis).map(|(a, b)| a * b).sum()
}

fn correlated_attributes(spec: &SynthSpec, grid: u32, voxels: &[[u32; 3]], rng: &mut ChaCha8Rng) -> Vec<Attributes> {
    let smooth = WaveBank::new(8, 12.0, 40.0, rng);
    let fine = WaveBank::new(8, 3.0, 8.0, rng);
    let d = spec.feature_dim;
    let k3 = 3 * spec.offsets_per_anchor;
    let feat_smooth = mixing(d, 8, rng);
    let feat_fine = mixing(d, 8, rng);
    let feat_geo: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let scal_smooth = mixing(SCALING_DIM, 8, rng);
    let off_smooth = mixing(k3, 8, rng);
    let off_fine = mixing(k3, 8, rng);
    let off_geo: Vec<f64> = (0..k3).map(|_| normal(rng)).collect();

    let density = local_density(voxels, grid);
    let mean = density.iter().sum::<f64>() / density.len().max(1) as f64;
    let var = density.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / density.len().max(1) as f64;
    let std = var.sqrt().max(1e-6);

    voxels
        .iter()
        .zip(&density)
        .map(|(v, rho)| {
            let p = v.map(|c| c as f64 + 0.5);
            let s = smooth.eval(p);
            let f = fine.eval(p);
            let geo = (rho - mean) / std;
            let feature = (0..d)
                .map(|c| {
                    let x = mix(&feat_smooth[c], &s)
                        + 0.6 * mix(&feat_fine[c], &f)
                        + 0.5 * feat_geo[c] * geo
                        + 0.25 * normal(rng);
                    x as f32
                })
                .collect();
            let scaling = [0, 1, 2, 3, 4, 5].map(|c| {
                let x = -1.0 - 0.4 * geo + 0.2 * mix(&scal_smooth[c], &s) + 0.05 * normal(rng);
                x as f32
            });
            let offsets = (0..k3)
                .map(|c| {
                    let x = 0.25 * mix(&off_smooth[c], &s)
                        + 0.15 * mix(&off_fine[c], &f)
                        + 0.1 * off_geo[c] * geo
                        + 0.05 * normal(rng);
                    x as f32
                })
                .collect();
            (feature, scaling, offsets)
        })
        .collect()
}

/// `ln(1 + occupied voxels in the 5x5x5 neighbourhood)` for every anchor.
fn local_density(voxels: &[[u32; 3]], grid: u32) -> Vec<f64> {
    let occupied: HashSet<[u32; 3]> = voxels.iter().copied().collect();
    voxels
        .iter()
        .map(|v| {
            let mut count = 0u32;
            for dz in -2i64..=2 {
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let n = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                        if n.iter().any(|&c| c < 0 || c >= grid as i64) {
                            continue;
                        }
                        if occupied.contains(&n.map(|c| c as u32)) {
                            count += 1;
                        }
                    }
                }
            }
            (1.0 + count as f64).ln()
        })
        .collect()
}

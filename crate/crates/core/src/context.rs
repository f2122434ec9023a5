//! Coding order and adaptive context selection over occupied voxels.
//!
//! Anchors are coded in Morton order of their voxels. For each anchor the
//! candidates are the already-coded anchors inside a cubic receptive field
//! centred on it. If there are at most `n` of them all are kept; otherwise only
//! the `n` nearest are.

use std::collections::HashMap;

use thiserror::Error;

use crate::scene::AnchorScene;

/// Full side length of the receptive field, in voxels.
pub const DEFAULT_RECEPTIVE_FIELD: u32 = 25;
pub const DEFAULT_MAX_CONTEXT: usize = 20;
/// Side of the coarse buckets used for neighbourhood lookups, in voxels.
const BUCKET: i64 = 8;
const MORTON_AXIS_BITS: u32 = 21;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("anchors {first} and {second} share voxel {voxel:?}")]
    DuplicateVoxel { first: usize, second: usize, voxel: [u32; 3] },
    #[error("voxel coordinate {0} exceeds the 21-bit Morton range")]
    VoxelRange(u32),
    #[error("receptive field must be odd and at least 1, got {0}")]
    BadField(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextParams {
    /// Full side length of the cubic receptive field (odd).
    pub receptive_field: u32,
    /// Most neighbours kept for one anchor.
    pub max_context: usize,
}

impl Default for ContextParams {
    fn default() -> Self {
        ContextParams { receptive_field: DEFAULT_RECEPTIVE_FIELD, max_context: DEFAULT_MAX_CONTEXT }
    }
}

impl ContextParams {
    pub fn new(receptive_field: u32, max_context: usize) -> Result<Self, ContextError> {
        if receptive_field == 0 || receptive_field % 2 == 0 {
            return Err(ContextError::BadField(receptive_field));
        }
        Ok(ContextParams { receptive_field, max_context })
    }

    pub fn half_extent(&self) -> u32 {
        self.receptive_field / 2
    }
}

/// Interleaves the low 21 bits of each axis, x in the lowest position.
pub fn morton3(v: [u32; 3]) -> u64 {
    fn spread(x: u32) -> u64 {
        let mut x = x as u64 & 0x1f_ffff;
        x = (x | x << 32) & 0x1f_0000_0000_ffff;
        x = (x | x << 16) & 0x1f_0000_ff00_00ff;
        x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
        x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
        x = (x | x << 2) & 0x1249_2492_4924_9249;
        x
    }
    spread(v[0]) | spread(v[1]) << 1 | spread(v[2]) << 2
}

/// Anchor indices in coding order plus their voxels and Morton codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodingOrder {
    /// `order[rank]` is the original index of the anchor coded at `rank`.
    pub order: Vec<usize>,
    /// Voxel of the anchor at each rank.
    pub voxels: Vec<[u32; 3]>,
    pub mortons: Vec<u64>,
}

impl CodingOrder {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Sorts anchors by the Morton code of their voxel (ties by index, which
/// only matter for the duplicate check).
pub fn coding_order(voxels: &[[u32; 3]]) -> Result<CodingOrder, ContextError> {
    if let Some(&c) = voxels.iter().flatten().find(|&&c| c >= 1 << MORTON_AXIS_BITS) {
        return Err(ContextError::VoxelRange(c));
    }
    let mut keyed: Vec<(u64, usize)> = voxels.iter().enumerate().map(|(i, v)| (morton3(*v), i)).collect();
    keyed.sort_unstable();
    for w in keyed.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(ContextError::DuplicateVoxel { first: w[0].1, second: w[1].1, voxel: voxels[w[0].1] });
        }
    }
    Ok(CodingOrder {
        order: keyed.iter().map(|k| k.1).collect(),
        voxels: keyed.iter().map(|k| voxels[k.1]).collect(),
        mortons: keyed.iter().map(|k| k.0).collect(),
    })
}

pub fn scene_coding_order(scene: &AnchorScene) -> Result<CodingOrder, ContextError> {
    coding_order(&scene.voxels())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Coding rank of the neighbour.
    pub rank: usize,
    /// Neighbour voxel minus target voxel.
    pub offset: [i32; 3],
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Density {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    /// Sorted by (squared distance, Morton code, rank).
    pub neighbors: Vec<Neighbor>,
    pub density: Density,
}

impl ContextSet {
    pub fn empty() -> Self {
        ContextSet { neighbors: Vec::new(), density: Density::Sparse }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Occupied voxels in coding order, bucketed for window queries.
#[derive(Debug, Clone)]
pub struct ContextIndex {
    params: ContextParams,
    voxels: Vec<[u32; 3]>,
    mortons: Vec<u64>,
    buckets: HashMap<[i64; 3], Vec<u32>>,
}

fn bucket_of(v: [i64; 3]) -> [i64; 3] {
    v.map(|c| c.div_euclid(BUCKET))
}

impl ContextIndex {
    pub fn new(order: &CodingOrder, params: ContextParams) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (rank, v) in order.voxels.iter().enumerate() {
            buckets.entry(bucket_of(v.map(|c| c as i64))).or_default().push(rank as u32);
        }
        ContextIndex { params, voxels: order.voxels.clone(), mortons: order.mortons.clone(), buckets }
    }

    pub fn params(&self) -> ContextParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Context of the anchor coded at `rank`.
    pub fn select(&self, rank: usize) -> ContextSet {
        let half = self.params.half_extent() as i64;
        let t = self.voxels[rank].map(|c| c as i64);
        let lo = bucket_of(t.map(|c| c - half));
        let hi = bucket_of(t.map(|c| c + half));
        let mut cand: Vec<(i64, u64, usize)> = Vec::new();
        for bz in lo[2]..=hi[2] {
            for by in lo[1]..=hi[1] {
                for bx in lo[0]..=hi[0] {
                    let Some(ranks) = self.buckets.get(&[bx, by, bz]) else { continue };
                    // ranks are ascending within a bucket
                    for &r in ranks.iter().take_while(|&&r| (r as usize) < rank) {
                        let v = self.voxels[r as usize];
                        let d = [0, 1, 2].map(|a| v[a] as i64 - t[a]);
                        if d.iter().all(|c| c.abs() <= half) {
                            cand.push((d.iter().map(|c| c * c).sum(), self.mortons[r as usize], r as usize));
                        }
                    }
                }
            }
        }
        cand.sort_unstable();
        let density = if cand.len() > self.params.max_context { Density::Dense } else { Density::Sparse };
        cand.truncate(self.params.max_context);
        let neighbors = cand
            .into_iter()
            .map(|(d2, _, r)| {
                let v = self.voxels[r];
                Neighbor {
                    rank: r,
                    offset: [0, 1, 2].map(|a| (v[a] as i64 - t[a]) as i32),
                    distance: (d2 as f64).sqrt(),
                }
            })
            .collect();
        ContextSet { neighbors, density }
    }

    pub fn select_all(&self) -> Vec<ContextSet> {
        (0..self.voxels.len()).map(|r| self.select(r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextStats {
    pub mean_selected: f64,
    pub max_selected: usize,
    pub sparse_fraction: f64,
}

/// Exact statistics over `sets`. An empty scene counts as all-sparse.
pub fn context_stats(sets: &[ContextSet]) -> ContextStats {
    if sets.is_empty() {
        return ContextStats { mean_selected: 0.0, max_selected: 0, sparse_fraction: 1.0 };
    }
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let sparse = sets.iter().filter(|s| s.density == Density::Sparse).count();
    ContextStats {
        mean_selected: total as f64 / sets.len() as f64,
        max_selected: sets.iter().map(|s| s.len()).max().unwrap_or(0),
        sparse_fraction: sparse as f64 / sets.len() as f64,
    }
}

/// Coding order, selection and statistics for a whole scene.
pub fn scene_context_stats(scene: &AnchorScene, params: ContextParams) -> Result<ContextStats, ContextError> {
    let order = scene_coding_order(scene)?;
    Ok(context_stats(&ContextIndex::new(&order, params).select_all()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Bit-by-bit interleave, the textbook definition.
    fn morton_slow(v: [u32; 3]) -> u64 {
        let mut m = 0u64;
        for bit in 0..21 {
            for a in 0..3 {
                m |= ((v[a] as u64 >> bit) & 1) << (3 * bit + a);
            }
        }
        m
    }

    /// Scans every earlier anchor.
    fn brute_force(order: &CodingOrder, rank: usize, params: ContextParams) -> ContextSet {
        let half = params.half_extent() as i64;
        let t = order.voxels[rank];
        let mut cand = Vec::new();
        for r in 0..rank {
            let v = order.voxels[r];
            let d: Vec<i64> = (0..3).map(|a| v[a] as i64 - t[a] as i64).collect();
            if d.iter().all(|c| c.abs() <= half) {
                cand.push((
                    d.iter().map(|c| c * c).sum::<i64>(),
                    order.mortons[r],
                    r,
                    [d[0] as i32, d[1] as i32, d[2] as i32],
                ));
            }
        }
        cand.sort();
        let density = if cand.len() > params.max_context { Density::Dense } else { Density::Sparse };
        let neighbors = cand
            .into_iter()
            .take(params.max_context)
            .map(|(d2, _, rank, offset)| Neighbor { rank, offset, distance: (d2 as f64).sqrt() })
            .collect();
        ContextSet { neighbors, density }
    }

    #[test]
    fn morton_matches_bitwise_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let v = [0; 3].map(|_| rng.random_range(0..1u32 << 21));
            assert_eq!(morton3(v), morton_slow(v));
        }
    }

    #[test]
    fn unit_cube_corners_follow_z_order() {
        let corners: Vec<[u32; 3]> =
            vec![[1, 1, 1], [0, 0, 1], [1, 0, 0], [0, 1, 1], [0, 0, 0], [1, 1, 0], [0, 1, 0], [1, 0, 1]];
        let order = coding_order(&corners).unwrap();
        let expect = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]];
        assert_eq!(order.voxels, expect);
        assert_eq!(coding_order(&[[5, 6, 7]]).unwrap().order, vec![0]);
    }

    #[test]
    fn duplicates_and_out_of_range_voxels_are_rejected() {
        assert!(matches!(
            coding_order(&[[1, 2, 3], [0, 0, 0], [1, 2, 3]]),
            Err(ContextError::DuplicateVoxel { first: 0, second: 2, .. })
        ));
        assert!(matches!(coding_order(&[[1 << 21, 0, 0]]), Err(ContextError::VoxelRange(_))));
        assert!(ContextParams::new(24, 20).is_err());
    }

    #[test]
    fn first_anchor_has_empty_context() {
        let order = coding_order(&[[3, 3, 3], [4, 3, 3]]).unwrap();
        let idx = ContextIndex::new(&order, ContextParams::default());
        assert_eq!(idx.select(0), ContextSet::empty());
        assert_eq!(idx.select(1).len(), 1);
    }

    #[test]
    fn exactly_n_candidates_stay_sparse() {
        // A row of n + 2 voxels; the last sees n + 1, the one before it n.
        let n = 5;
        let voxels: Vec<[u32; 3]> = (0..n as u32 + 2).map(|x| [x, 0, 0]).collect();
        let order = coding_order(&voxels).unwrap();
        let idx = ContextIndex::new(&order, ContextParams::new(25, n).unwrap());
        let at_n = idx.select(n);
        assert_eq!((at_n.len(), at_n.density), (n, Density::Sparse));
        let over = idx.select(n + 1);
        assert_eq!((over.len(), over.density), (n, Density::Dense));
        assert!(over.neighbors.iter().all(|nb| nb.rank >= 1));
    }

    #[test]
    fn selection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..6 {
            let side = [12u32, 30, 60][trial % 3];
            let mut voxels: Vec<[u32; 3]> = (0..1500).map(|_| [0; 3].map(|_| rng.random_range(0..side))).collect();
            voxels.sort();
            voxels.dedup();
            let order = coding_order(&voxels).unwrap();
            for params in [ContextParams::default(), ContextParams::new(5, 3).unwrap()] {
                let idx = ContextIndex::new(&order, params);
                for rank in 0..order.len() {
                    let got = idx.select(rank);
                    assert_eq!(got, brute_force(&order, rank, params));
                    assert!(got.neighbors.iter().all(|nb| nb.rank < rank));
                    assert!(got.len() <= params.max_context);
                }
            }
        }
    }

    #[test]
    fn stats_of_single_anchor() {
        let order = coding_order(&[[0, 0, 0]]).unwrap();
        let sets = ContextIndex::new(&order, ContextParams::default()).select_all();
        assert_eq!(context_stats(&sets), ContextStats { mean_selected: 0.0, max_selected: 0, sparse_fraction: 1.0 });
    }
}

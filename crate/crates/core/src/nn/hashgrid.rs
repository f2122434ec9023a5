//! Multi-resolution hash grid over the unit cube with trilinear lookup.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Params};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];
const INIT_RANGE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub log2_table_size: u32,
    pub features_per_level: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 8,
            base_resolution: 16,
            max_resolution: 512,
            log2_table_size: 15,
            features_per_level: 2,
        }
    }
}

impl HashGridConfig {
    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    /// Cells per axis at each level, geometric from base to max.
    pub fn resolutions(&self) -> Vec<u32> {
        if self.levels == 1 {
            return vec![self.base_resolution];
        }
        let growth = (self.max_resolution as f64 / self.base_resolution as f64).ln() / (self.levels - 1) as f64;
        (0..self.levels).map(|l| (self.base_resolution as f64 * (growth * l as f64).exp()).round() as u32).collect()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.levels > 0
            && self.features_per_level > 0
            && self.base_resolution > 0
            && self.max_resolution >= self.base_resolution
            && (1..=24).contains(&self.log2_table_size);
        if ok {
            Ok(())
        } else {
            Err(NnError::Format(format!("invalid hash grid config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashGridEncoder {
    pub config: HashGridConfig,
    resolutions: Vec<u32>,
    /// `tables[level][slot * F + f]`
    pub tables: Vec<Vec<f64>>,
}

/// Slots and weights touched by one query, for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct HashGridTape {
    corners: Vec<[(u32, f64); 8]>,
}

impl HashGridTape {
    /// Interpolation corners `(slot, weight)` for each level.
    pub fn corners(&self) -> &[[(u32, f64); 8]] {
        &self.corners
    }
}

impl HashGridEncoder {
    pub fn new(config: HashGridConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = config.table_size() * config.features_per_level;
        let tables =
            (0..config.levels).map(|_| (0..len).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect()).collect();
        Ok(HashGridEncoder { resolutions: config.resolutions(), config, tables })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    /// Table slot of grid vertex `v` at `level`.
    pub fn slot(&self, level: usize, v: [u32; 3]) -> u32 {
        let side = self.resolutions[level] as u64 + 1;
        let t = self.config.table_size() as u64;
        if side * side * side <= t {
            (v[0] as u64 + side * (v[1] as u64 + side * v[2] as u64)) as u32
        } else {
            let h = v[0].wrapping_mul(PRIMES[0]) ^ v[1].wrapping_mul(PRIMES[1]) ^ v[2].wrapping_mul(PRIMES[2]);
            h & (t as u32 - 1)
        }
    }

    fn check(location: [f64; 3]) -> Result<(), NnError> {
        if location.iter().all(|c| (0.0..=1.0).contains(c)) {
            Ok(())
        } else {
            Err(NnError::OutOfRange(location))
        }
    }

    pub fn query(&self, location: [f64; 3]) -> Result<Vec<f64>, NnError> {
        Ok(self.query_tape(location)?.0)
    }

    pub fn query_tape(&self, location: [f64; 3]) -> Result<(Vec<f64>, HashGridTape), NnError> {
        Self::check(location)?;
        let f = self.config.features_per_level;
        let mut out = vec![0.0; self.output_dim()];
        let mut tape = HashGridTape { corners: Vec::with_capacity(self.config.levels) };
        for level in 0..self.config.levels {
            let res = self.resolutions[level];
            let mut cell = [0u32; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let p = location[a] * res as f64;
                let c = (p.floor() as u32).min(res - 1);
                cell[a] = c;
                frac[a] = p - c as f64;
            }
            let mut corners = [(0u32, 0.0); 8];
            for (corner, slot_weight) in corners.iter_mut().enumerate() {
                let mut v = cell;
                let mut w = 1.0;
                for a in 0..3 {
                    if corner >> a & 1 == 1 {
                        v[a] += 1;
                        w *= frac[a];
                    } else {
                        w *= 1.0 - frac[a];
                    }
                }
                let slot = self.slot(level, v);
                *slot_weight = (slot, w);
                let entry = &self.tables[level][slot as usize * f..(slot as usize + 1) * f];
                for k in 0..f {
                    out[level * f + k] += w * entry[k];
                }
            }
            tape.corners.push(corners);
        }
        Ok((out, tape))
    }

    /// Scatters `upstream` (length `output_dim`) into table gradients.
    pub fn backward(&self, tape: &HashGridTape, upstream: &[f64], grad: &mut HashGridGrad) -> Result<(), NnError> {
        if upstream.len() != self.output_dim() {
            return Err(NnError::Dim { expected: self.output_dim(), got: upstream.len() });
        }
        let f = self.config.features_per_level;
        for (level, corners) in tape.corners.iter().enumerate() {
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            for &(slot, w) in corners {
                grad.add(level, slot, up, w);
            }
        }
        Ok(())
    }
}

impl Params for HashGridEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (l, t) in self.tables.iter().enumerate() {
            f(&format!("hash.level{l}"), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (l, t) in self.tables.iter_mut().enumerate() {
            f(&format!("hash.level{l}"), t);
        }
    }
}

/// Dense gradient tables plus the list of slots touched since the last reset,
/// so sparse updates and resets cost only what was touched.
#[derive(Debug, Clone)]
pub struct HashGridGrad {
    features: usize,
    pub tables: Vec<Vec<f64>>,
    touched: Vec<Vec<u32>>,
    marked: Vec<Vec<bool>>,
}

impl HashGridGrad {
    pub fn for_encoder(enc: &HashGridEncoder) -> Self {
        let slots = enc.config.table_size();
        let levels = enc.config.levels;
        HashGridGrad {
            features: enc.config.features_per_level,
            tables: vec![vec![0.0; slots * enc.config.features_per_level]; levels],
            touched: vec![Vec::new(); levels],
            marked: vec![vec![false; slots]; levels],
        }
    }

    #[inline]
    fn add(&mut self, level: usize, slot: u32, up: &[f64], w: f64) {
        let s = slot as usize;
        if !self.marked[level][s] {
            self.marked[level][s] = true;
            self.touched[level].push(slot);
        }
        let entry = &mut self.tables[level][s * self.features..(s + 1) * self.features];
        for (e, u) in entry.iter_mut().zip(up) {
            *e += w * u;
        }
    }

    /// Slots with a (possibly zero) accumulated gradient at `level`.
    pub fn touched(&self, level: usize) -> &[u32] {
        &self.touched[level]
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn reset(&mut self) {
        for level in 0..self.tables.len() {
            for &slot in &self.touched[level] {
                let s = slot as usize;
                self.marked[level][s] = false;
                self.tables[level][s * self.features..(s + 1) * self.features].iter_mut().for_each(|v| *v = 0.0);
            }
            self.touched[level].clear();
        }
    }
}

impl Params for HashGridGrad {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (l, t) in self.tables.iter().enumerate() {
            f(&format!("hash.level{l}"), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (l, t) in self.tables.iter_mut().enumerate() {
            f(&format!("hash.level{l}"), t);
        }
    }
}

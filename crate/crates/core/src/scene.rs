//! Anchor scene data model and on-disk scene formats.
//!
//! Two formats are supported:
//!
//! * native binary (`.a3gs`): little-endian, magic `A3GS`, a version byte, the
//!   header fields, then one contiguous run of 32-bit floats per anchor
//!   (location, feature, scaling, offsets);
//! * ascii table: a single header line followed by one whitespace-separated
//!   row per anchor in the same column order.
//!
//! Floats are written with the shortest representation that parses back to
//! the same value, so both formats round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Number of scaling components per anchor.
pub const SCALING_DIM: usize = 6;

pub const DEFAULT_FEATURE_DIM: usize = 32;
pub const DEFAULT_OFFSETS_PER_ANCHOR: usize = 10;

/// Largest coordinate produced by 16-bit location quantization.
pub const LOCATION_LEVELS: u32 = u16::MAX as u32;

const NATIVE_MAGIC: &[u8; 4] = b"A3GS";
const NATIVE_VERSION: u8 = 1;
const ASCII_TAG: &str = "A3GS-ASCII";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("anchor {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("anchor {index}: non-finite value in {field}")]
    NonFinite { index: usize, field: &'static str },
    #[error("anchor {index}: location {location:?} lies outside the bounding box")]
    OutsideAabb { index: usize, location: [f32; 3] },
    #[error("anchor {index}: voxel {voxel:?} already holds anchor {first}")]
    DuplicateVoxel { index: usize, first: usize, voxel: [u32; 3] },
    #[error("invalid scene: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneFormat {
    NativeBinary,
    AsciiTable,
}

impl SceneFormat {
    /// Picks the format from a file extension: `.txt`/`.tsv`/`.table` are ascii,
    /// everything else is native binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") | Some("tsv") | Some("table") => SceneFormat::AsciiTable,
            _ => SceneFormat::NativeBinary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl Aabb {
    pub fn new(min: [f32; 3], max: [f32; 3]) -> Result<Self, SceneError> {
        let aabb = Aabb { min, max };
        aabb.validate()?;
        Ok(aabb)
    }

    fn validate(&self) -> Result<(), SceneError> {
        for axis in 0..3 {
            if !self.min[axis].is_finite() || !self.max[axis].is_finite() {
                return Err(SceneError::Header("non-finite bounding box".into()));
            }
            if self.min[axis] >= self.max[axis] {
                return Err(SceneError::Header(format!(
                    "degenerate bounding box on axis {axis}: min {} >= max {}",
                    self.min[axis], self.max[axis]
                )));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.max[a] as f64 - self.min[a] as f64)
    }

    pub fn contains(&self, p: &[f32; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub location: [f32; 3],
    pub feature: Vec<f32>,
    pub scaling: [f32; SCALING_DIM],
    /// Flattened `3 * offsets_per_anchor` offset components.
    pub offsets: Vec<f32>,
}

impl Anchor {
    fn check_finite(&self, index: usize) -> Result<(), SceneError> {
        let fields: [(&'static str, &[f32]); 4] = [
            ("location", &self.location),
            ("feature", &self.feature),
            ("scaling", &self.scaling),
            ("offsets", &self.offsets),
        ];
        for (field, values) in fields {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(SceneError::NonFinite { index, field });
            }
        }
        Ok(())
    }

    /// Scaling followed by offsets, the joint vector coded in the second stage.
    pub fn scaling_offsets(&self) -> impl Iterator<Item = f32> + '_ {
        self.scaling.iter().chain(self.offsets.iter()).copied()
    }
}

/// An anchor-based scene. Immutable once validated; cheap to share.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorScene {
    pub anchors: Vec<Anchor>,
    pub aabb: Aabb,
    pub voxel_size: f32,
    pub feature_dim: usize,
    pub offsets_per_anchor: usize,
}

impl AnchorScene {
    /// Builds and validates a scene.
    pub fn new(
        anchors: Vec<Anchor>,
        aabb: Aabb,
        voxel_size: f32,
        feature_dim: usize,
        offsets_per_anchor: usize,
    ) -> Result<Self, SceneError> {
        let scene = AnchorScene { anchors, aabb, voxel_size, feature_dim, offsets_per_anchor };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty(
        aabb: Aabb,
        voxel_size: f32,
        feature_dim: usize,
        offsets_per_anchor: usize,
    ) -> Result<Self, SceneError> {
        Self::new(Vec::new(), aabb, voxel_size, feature_dim, offsets_per_anchor)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Width of the scaling+offsets vector.
    pub fn scof_dim(&self) -> usize {
        SCALING_DIM + 3 * self.offsets_per_anchor
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        validate_metadata(self.voxel_size, self.feature_dim, self.offsets_per_anchor)?;
        self.aabb.validate()?;
        for (index, anchor) in self.anchors.iter().enumerate() {
            self.validate_anchor(index, anchor)?;
        }
        Ok(())
    }

    fn validate_anchor(&self, index: usize, anchor: &Anchor) -> Result<(), SceneError> {
        if anchor.feature.len() != self.feature_dim {
            return Err(SceneError::Record {
                index,
                reason: format!("feature has {} components, expected {}", anchor.feature.len(), self.feature_dim),
            });
        }
        if anchor.offsets.len() != 3 * self.offsets_per_anchor {
            return Err(SceneError::Record {
                index,
                reason: format!(
                    "offsets have {} components, expected {}",
                    anchor.offsets.len(),
                    3 * self.offsets_per_anchor
                ),
            });
        }
        anchor.check_finite(index)?;
        if !self.aabb.contains(&anchor.location) {
            return Err(SceneError::OutsideAabb { index, location: anchor.location });
        }
        Ok(())
    }

    /// Quantizes every anchor location to 16 bits per axis.
    pub fn quantized_locations(&self) -> Vec<[u16; 3]> {
        self.anchors.iter().map(|a| quantize_location(&self.aabb, &a.location)).collect()
    }

    /// Voxel of every anchor after location quantization.
    pub fn voxels(&self) -> Vec<[u32; 3]> {
        self.anchors
            .iter()
            .map(|a| {
                let q = quantize_location(&self.aabb, &a.location);
                voxel_of(&self.aabb, self.voxel_size, &q)
            })
            .collect()
    }

    /// Drops every anchor whose quantized voxel is already occupied by an
    /// earlier anchor. In strict mode the first collision is an error.
    /// Returns the filtered scene and the number of dropped anchors.
    pub fn dedup_voxels(&self, strict: bool) -> Result<(AnchorScene, usize), SceneError> {
        let mut seen = std::collections::HashMap::with_capacity(self.anchors.len());
        let mut kept = Vec::with_capacity(self.anchors.len());
        let mut dropped = 0;
        for (index, (anchor, voxel)) in self.anchors.iter().zip(self.voxels()).enumerate() {
            match seen.entry(voxel) {
                std::collections::hash_map::Entry::Occupied(e) => {
                    if strict {
                        return Err(SceneError::DuplicateVoxel { index, first: *e.get(), voxel });
                    }
                    dropped += 1;
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(index);
                    kept.push(anchor.clone());
                }
            }
        }
        let scene = AnchorScene { anchors: kept, ..self.clone_metadata() };
        Ok((scene, dropped))
    }

    fn clone_metadata(&self) -> AnchorScene {
        AnchorScene {
            anchors: Vec::new(),
            aabb: self.aabb,
            voxel_size: self.voxel_size,
            feature_dim: self.feature_dim,
            offsets_per_anchor: self.offsets_per_anchor,
        }
    }
}

fn validate_metadata(voxel_size: f32, feature_dim: usize, offsets: usize) -> Result<(), SceneError> {
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(SceneError::Header(format!("voxel size must be positive, got {voxel_size}")));
    }
    if feature_dim == 0 {
        return Err(SceneError::Header("feature_dim must be positive".into()));
    }
    if offsets == 0 {
        return Err(SceneError::Header("offsets_per_anchor must be positive".into()));
    }
    Ok(())
}

/// Maps a location to 16-bit grid coordinates spanning the bounding box.
pub fn quantize_location(aabb: &Aabb, p: &[f32; 3]) -> [u16; 3] {
    let extent = aabb.extent();
    [0, 1, 2].map(|a| {
        let t = (p[a] as f64 - aabb.min[a] as f64) / extent[a];
        (t * LOCATION_LEVELS as f64).round().clamp(0.0, LOCATION_LEVELS as f64) as u16
    })
}

/// Location normalized to `[0, 1]^3`, exactly reproducible from `q`.
pub fn normalized_location(q: &[u16; 3]) -> [f64; 3] {
    q.map(|c| c as f64 / LOCATION_LEVELS as f64)
}

/// Scene-unit location of a quantized coordinate: `min + q / (2^16 - 1) * extent`.
pub fn dequantize_location(aabb: &Aabb, q: &[u16; 3]) -> [f64; 3] {
    let extent = aabb.extent();
    let n = normalized_location(q);
    [0, 1, 2].map(|a| aabb.min[a] as f64 + n[a] * extent[a])
}

/// Voxel containing a quantized location.
pub fn voxel_of(aabb: &Aabb, voxel_size: f32, q: &[u16; 3]) -> [u32; 3] {
    let extent = aabb.extent();
    let n = normalized_location(q);
    [0, 1, 2].map(|a| ((n[a] * extent[a]) / voxel_size as f64).floor().max(0.0) as u32)
}

/// Reads a scene, validating metadata and every anchor.
pub fn load_scene(path: &Path, format: SceneFormat) -> Result<AnchorScene, SceneError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    match format {
        SceneFormat::NativeBinary => read_native(reader),
        SceneFormat::AsciiTable => read_ascii(reader),
    }
}

/// Writes a scene; the file re-loads to an equal scene.
pub fn save_scene(scene: &AnchorScene, path: &Path, format: SceneFormat) -> Result<(), SceneError> {
    let file = fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    match format {
        SceneFormat::NativeBinary => write_native(scene, &mut writer)?,
        SceneFormat::AsciiTable => write_ascii(scene, &mut writer)?,
    }
    writer.flush()?;
    Ok(())
}

pub fn write_native<W: Write>(scene: &AnchorScene, w: &mut W) -> Result<(), SceneError> {
    w.write_all(NATIVE_MAGIC)?;
    w.write_all(&[NATIVE_VERSION])?;
    w.write_all(&(scene.anchors.len() as u32).to_le_bytes())?;
    w.write_all(&(scene.feature_dim as u32).to_le_bytes())?;
    w.write_all(&(scene.offsets_per_anchor as u32).to_le_bytes())?;
    for v in scene.aabb.min.iter().chain(scene.aabb.max.iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&scene.voxel_size.to_le_bytes())?;
    let mut record = Vec::with_capacity(4 * (3 + scene.feature_dim + scene.scof_dim()));
    for anchor in &scene.anchors {
        record.clear();
        let values = anchor
            .location
            .iter()
            .chain(anchor.feature.iter())
            .chain(anchor.scaling.iter())
            .chain(anchor.offsets.iter());
        for v in values {
            record.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&record)?;
    }
    Ok(())
}

pub fn read_native<R: Read>(mut r: R) -> Result<AnchorScene, SceneError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| SceneError::Header("file too short".into()))?;
    if &magic != NATIVE_MAGIC {
        return Err(SceneError::Header(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version).map_err(|_| SceneError::Header("missing version".into()))?;
    if version[0] != NATIVE_VERSION {
        return Err(SceneError::Header(format!("unsupported version {}", version[0])));
    }
    let mut header = [0u8; 12 + 24 + 4];
    r.read_exact(&mut header).map_err(|_| SceneError::Header("truncated header".into()))?;
    let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let f32_at = |i: usize| f32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let count = u32_at(0) as usize;
    let feature_dim = u32_at(4) as usize;
    let offsets_per_anchor = u32_at(8) as usize;
    let min = [f32_at(12), f32_at(16), f32_at(20)];
    let max = [f32_at(24), f32_at(28), f32_at(32)];
    let voxel_size = f32_at(36);
    validate_metadata(voxel_size, feature_dim, offsets_per_anchor)?;
    let aabb = Aabb::new(min, max)?;
    let meta = AnchorScene { anchors: Vec::new(), aabb, voxel_size, feature_dim, offsets_per_anchor };

    let width = 3 + feature_dim + meta.scof_dim();
    let mut buf = vec![0u8; 4 * width];
    let mut values = vec![0f32; width];
    let mut anchors = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        r.read_exact(&mut buf).map_err(|_| SceneError::Record { index, reason: "truncated record".into() })?;
        for (v, chunk) in values.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        let anchor = anchor_from_values(&values, feature_dim);
        meta.validate_anchor(index, &anchor)?;
        anchors.push(anchor);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(SceneError::Header(format!("trailing bytes after {count} anchors")));
    }
    Ok(AnchorScene { anchors, ..meta })
}

fn anchor_from_values(values: &[f32], feature_dim: usize) -> Anchor {
    let location = [values[0], values[1], values[2]];
    let feature = values[3..3 + feature_dim].to_vec();
    let s = 3 + feature_dim;
    let scaling: [f32; SCALING_DIM] = values[s..s + SCALING_DIM].try_into().unwrap();
    let offsets = values[s + SCALING_DIM..].to_vec();
    Anchor { location, feature, scaling, offsets }
}

pub fn write_ascii<W: Write>(scene: &AnchorScene, w: &mut W) -> Result<(), SceneError> {
    let a = &scene.aabb;
    writeln!(
        w,
        "# {ASCII_TAG} v1 count={} feature_dim={} offsets_per_anchor={} aabb={},{},{},{},{},{} voxel_size={}",
        scene.anchors.len(),
        scene.feature_dim,
        scene.offsets_per_anchor,
        a.min[0],
        a.min[1],
        a.min[2],
        a.max[0],
        a.max[1],
        a.max[2],
        scene.voxel_size
    )?;
    let mut line = String::new();
    for anchor in &scene.anchors {
        line.clear();
        let values = anchor
            .location
            .iter()
            .chain(anchor.feature.iter())
            .chain(anchor.scaling.iter())
            .chain(anchor.offsets.iter());
        for (i, v) in values.enumerate() {
            if i > 0 {
                line.push(' ');
            }
            write!(line, "{v}").unwrap();
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_ascii<R: BufRead>(r: R) -> Result<AnchorScene, SceneError> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| SceneError::Header("empty file".into()))??;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("#") || fields.next() != Some(ASCII_TAG) {
        return Err(SceneError::Header(format!("expected '# {ASCII_TAG}' header line")));
    }
    if fields.next() != Some("v1") {
        return Err(SceneError::Header("unsupported ascii version".into()));
    }
    let (mut count, mut feature_dim, mut offsets, mut aabb, mut voxel) = (None, None, None, None, None);
    for field in fields {
        let (key, value) =
            field.split_once('=').ok_or_else(|| SceneError::Header(format!("bad header field '{field}'")))?;
        let bad = || SceneError::Header(format!("bad value for '{key}': '{value}'"));
        match key {
            "count" => count = Some(value.parse::<usize>().map_err(|_| bad())?),
            "feature_dim" => feature_dim = Some(value.parse::<usize>().map_err(|_| bad())?),
            "offsets_per_anchor" => offsets = Some(value.parse::<usize>().map_err(|_| bad())?),
            "voxel_size" => voxel = Some(value.parse::<f32>().map_err(|_| bad())?),
            "aabb" => {
                let v: Vec<f32> =
                    value.split(',').map(|s| s.parse::<f32>()).collect::<Result<_, _>>().map_err(|_| bad())?;
                if v.len() != 6 {
                    return Err(bad());
                }
                aabb = Some(([v[0], v[1], v[2]], [v[3], v[4], v[5]]));
            }
            _ => return Err(SceneError::Header(format!("unknown header field '{key}'"))),
        }
    }
    let missing = |name: &str| SceneError::Header(format!("header lacks '{name}'"));
    let count = count.ok_or_else(|| missing("count"))?;
    let feature_dim = feature_dim.ok_or_else(|| missing("feature_dim"))?;
    let offsets_per_anchor = offsets.ok_or_else(|| missing("offsets_per_anchor"))?;
    let voxel_size = voxel.ok_or_else(|| missing("voxel_size"))?;
    let (min, max) = aabb.ok_or_else(|| missing("aabb"))?;
    validate_metadata(voxel_size, feature_dim, offsets_per_anchor)?;
    let aabb = Aabb::new(min, max)?;
    let meta = AnchorScene { anchors: Vec::new(), aabb, voxel_size, feature_dim, offsets_per_anchor };

    let width = 3 + feature_dim + meta.scof_dim();
    let mut anchors = Vec::with_capacity(count.min(1 << 20));
    let mut values = Vec::with_capacity(width);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let index = anchors.len();
        values.clear();
        for token in line.split_whitespace() {
            let v = token
                .parse::<f32>()
                .map_err(|_| SceneError::Record { index, reason: format!("cannot parse '{token}'") })?;
            values.push(v);
        }
        if values.len() != width {
            return Err(SceneError::Record {
                index,
                reason: format!("row has {} columns, expected {width}", values.len()),
            });
        }
        let anchor = anchor_from_values(&values, feature_dim);
        meta.validate_anchor(index, &anchor)?;
        anchors.push(anchor);
    }
    if anchors.len() != count {
        return Err(SceneError::Header(format!("header declares {count} anchors, found {}", anchors.len())));
    }
    Ok(AnchorScene { anchors, ..meta })
}

/// A quantized anchor as reconstructed by the decoder.
///
/// `feature[i] == qfeature[i] as f64 * feature_step[i]` holds exactly, and
/// likewise for the scaling+offsets vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedAnchor {
    pub qlocation: [u16; 3],
    pub qfeature: Vec<i32>,
    pub feature: Vec<f64>,
    pub feature_step: Vec<f64>,
    /// Scaling followed by offsets.
    pub qscof: Vec<i32>,
    pub scof: Vec<f64>,
    pub scof_step: Vec<f64>,
}

//! Bitstream container and the progressive compress/decompress pipeline.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HMGS" | version u16 | flags u16 | anchors u32 | feature_dim u32 | offsets u32
//! | aabb 6 x f32 | voxel_size f32 | lambda f32 | digest [16] | scaling bits f64
//! | offsets bits f64 | section count u32 | count x (tag [4], offset u32, length u32)
//! | header crc32
//! then every section followed by the crc32 of its bytes:
//! LOC (u16 triples in coding order), FEAT, SCOF (range coded), SIDE (model file)
//! ```
//!
//! The two `f64` bit counts record how the encoder's estimated cost of the
//! SCOF section splits between scaling and offsets; they only serve reports.

use thiserror::Error;

use crate::entropy_model::{element_rate, quantize_value, GaussianCdf};
use crate::hemgs::{model_digest, HemgsError, HemgsModel, RateLambda, SceneGeometry, Stage, StageInput};
use crate::nn::AgnosticExtractor;
use crate::range_coder::{CoderError, RangeDecoder, RangeEncoder};
use crate::scene::{dequantize_location, Aabb, Anchor, AnchorScene, QuantizedAnchor, SceneError, SCALING_DIM};

pub const MAGIC: &[u8; 4] = b"HMGS";
pub const VERSION: u16 = 1;
pub const TAG_LOC: [u8; 4] = *b"LOC ";
pub const TAG_FEAT: [u8; 4] = *b"FEAT";
pub const TAG_SCOF: [u8; 4] = *b"SCOF";
pub const TAG_SIDE: [u8; 4] = *b"SIDE";
const SECTION_TAGS: [[u8; 4]; 4] = [TAG_LOC, TAG_FEAT, TAG_SCOF, TAG_SIDE];
const FIXED_HEADER: usize = 4 + 2 + 2 + 4 * 3 + 4 * 6 + 4 + 4 + 16 + 8 + 8 + 4;
const TABLE_ENTRY: usize = 12;
pub const HEADER_BYTES: usize = FIXED_HEADER + SECTION_TAGS.len() * TABLE_ENTRY + 4;
pub const CHECKSUM_BYTES: usize = 4;
/// Extra cost of an escaped element: a raw 32-bit value.
const ESCAPE_RAW_BITS: f64 = 32.0;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("not a HEMGS stream")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    UnsupportedVersion(u16),
    #[error("stream truncated in {0}")]
    Truncated(String),
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("model digest does not match the stream")]
    DigestMismatch,
    #[error("malformed stream: {0}")]
    Layout(String),
    #[error("decoded locations out of coding order at rank {rank}")]
    Order { rank: usize },
    #[error("anchor {anchor}: value {value} needs a symbol beyond the 32-bit escape range")]
    EscapeOverflow { anchor: usize, value: f64 },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(HemgsError),
    #[error("range coder: {0}")]
    Coder(CoderError),
}

impl From<HemgsError> for CodecError {
    fn from(e: HemgsError) -> Self {
        match e {
            HemgsError::Order { rank } => CodecError::Order { rank },
            other => CodecError::Model(other),
        }
    }
}

fn coder_error(section: &str, e: CoderError) -> CodecError {
    match e {
        CoderError::Truncated => CodecError::Truncated(section.to_string()),
        other => CodecError::Coder(other),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub version: u16,
    pub anchors: u32,
    pub feature_dim: u32,
    pub offsets_per_anchor: u32,
    pub aabb: Aabb,
    pub voxel_size: f32,
    pub lambda: f32,
    pub digest: [u8; 16],
    pub scaling_bits: f64,
    pub offsets_bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionEntry {
    pub tag: [u8; 4],
    pub offset: u32,
    pub length: u32,
}

impl SectionEntry {
    pub fn name(&self) -> String {
        String::from_utf8_lossy(&self.tag).trim().to_string()
    }
}

/// A parsed stream whose checksums have been verified.
#[derive(Debug, Clone)]
pub struct Container<'a> {
    pub header: Header,
    pub sections: Vec<SectionEntry>,
    pub loc: &'a [u8],
    pub feat: &'a [u8],
    pub scof: &'a [u8],
    pub side: &'a [u8],
    pub total_bytes: usize,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| CodecError::Truncated("header".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_container(header: &Header, sections: [&[u8]; 4]) -> Vec<u8> {
    let total: usize = HEADER_BYTES + sections.iter().map(|s| s.len() + CHECKSUM_BYTES).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header.version.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    put_u32(&mut out, header.anchors);
    put_u32(&mut out, header.feature_dim);
    put_u32(&mut out, header.offsets_per_anchor);
    for v in header.aabb.min.iter().chain(&header.aabb.max) {
        put_f32(&mut out, *v);
    }
    put_f32(&mut out, header.voxel_size);
    put_f32(&mut out, header.lambda);
    out.extend_from_slice(&header.digest);
    out.extend_from_slice(&header.scaling_bits.to_le_bytes());
    out.extend_from_slice(&header.offsets_bits.to_le_bytes());
    put_u32(&mut out, SECTION_TAGS.len() as u32);
    let mut offset = HEADER_BYTES;
    for (tag, s) in SECTION_TAGS.iter().zip(sections) {
        out.extend_from_slice(tag);
        put_u32(&mut out, offset as u32);
        put_u32(&mut out, s.len() as u32);
        offset += s.len() + CHECKSUM_BYTES;
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    for s in sections {
        out.extend_from_slice(s);
        put_u32(&mut out, crc32fast::hash(s));
    }
    debug_assert_eq!(out.len(), total);
    out
}

/// Parses the header and section table and verifies every checksum.
pub fn parse_container(bytes: &[u8]) -> Result<Container<'_>, CodecError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let _flags = r.u16()?;
    let anchors = r.u32()?;
    let feature_dim = r.u32()?;
    let offsets_per_anchor = r.u32()?;
    let mut b = [0f32; 6];
    for v in b.iter_mut() {
        *v = r.f32()?;
    }
    let voxel_size = r.f32()?;
    let lambda = r.f32()?;
    let digest: [u8; 16] = r.take(16)?.try_into().unwrap();
    let scaling_bits = r.f64()?;
    let offsets_bits = r.f64()?;
    let count = r.u32()? as usize;
    if count != SECTION_TAGS.len() {
        return Err(CodecError::Layout(format!("{count} sections, expected {}", SECTION_TAGS.len())));
    }
    let mut sections = Vec::with_capacity(count);
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        sections.push(SectionEntry { tag, offset: r.u32()?, length: r.u32()? });
    }
    let header_end = r.pos;
    let crc = r.u32()?;
    if crc32fast::hash(&bytes[..header_end]) != crc {
        return Err(CodecError::Checksum("header".into()));
    }
    let aabb = Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]])
        .map_err(|e| CodecError::Layout(format!("bounding box: {e}")))?;

    let mut expected = HEADER_BYTES;
    let mut bodies = Vec::with_capacity(count);
    for (entry, tag) in sections.iter().zip(SECTION_TAGS) {
        let name = entry.name();
        if entry.tag != tag {
            return Err(CodecError::Layout(format!("section {name} where {} belongs", String::from_utf8_lossy(&tag))));
        }
        if entry.offset as usize != expected {
            return Err(CodecError::Layout(format!("section {name} at offset {}, expected {expected}", entry.offset)));
        }
        let end = expected + entry.length as usize;
        if end + CHECKSUM_BYTES > bytes.len() {
            return Err(CodecError::Truncated(name));
        }
        let body = &bytes[expected..end];
        let crc = u32::from_le_bytes(bytes[end..end + CHECKSUM_BYTES].try_into().unwrap());
        if crc32fast::hash(body) != crc {
            return Err(CodecError::Checksum(name));
        }
        bodies.push(body);
        expected = end + CHECKSUM_BYTES;
    }
    if expected != bytes.len() {
        return Err(CodecError::Layout(format!("{} bytes after the last section", bytes.len() - expected)));
    }
    let header = Header {
        version,
        anchors,
        feature_dim,
        offsets_per_anchor,
        aabb,
        voxel_size,
        lambda,
        digest,
        scaling_bits,
        offsets_bits,
    };
    if sections[0].length as u64 != 6 * anchors as u64 {
        return Err(CodecError::Layout(format!("LOC holds {} bytes for {anchors} anchors", sections[0].length)));
    }
    Ok(Container {
        header,
        sections,
        loc: bodies[0],
        feat: bodies[1],
        scof: bodies[2],
        side: bodies[3],
        total_bytes: bytes.len(),
    })
}

/// A decoded scene: quantized anchors in coding order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedScene {
    pub aabb: Aabb,
    pub voxel_size: f32,
    pub feature_dim: usize,
    pub offsets_per_anchor: usize,
    pub lambda: f32,
    pub anchors: Vec<QuantizedAnchor>,
}

impl DecodedScene {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// An ordinary scene with dequantized values rounded to `f32`.
    pub fn to_anchor_scene(&self) -> Result<AnchorScene, SceneError> {
        let anchors = self
            .anchors
            .iter()
            .map(|a| {
                let loc = dequantize_location(&self.aabb, &a.qlocation);
                Anchor {
                    location: loc.map(|c| (c as f32).clamp(f32::MIN, f32::MAX)),
                    feature: a.feature.iter().map(|&v| v as f32).collect(),
                    scaling: std::array::from_fn(|i| a.scof[i] as f32),
                    offsets: a.scof[SCALING_DIM..].iter().map(|&v| v as f32).collect(),
                }
            })
            .map(|mut a| {
                for c in 0..3 {
                    a.location[c] = a.location[c].clamp(self.aabb.min[c], self.aabb.max[c]);
                }
                a
            })
            .collect();
        AnchorScene::new(anchors, self.aabb, self.voxel_size, self.feature_dim, self.offsets_per_anchor)
    }
}

/// Per-section coding costs recorded while encoding.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RateAccounting {
    /// Sum of `-log2 p` under the coder's quantized cdfs, escapes included.
    pub feature_bits: f64,
    pub scaling_bits: f64,
    pub offsets_bits: f64,
    /// The same elements under the continuous model (round mode).
    pub feature_estimate_bits: f64,
    pub scof_estimate_bits: f64,
    pub escapes: usize,
}

impl RateAccounting {
    pub fn scof_bits(&self) -> f64 {
        self.scaling_bits + self.offsets_bits
    }
}

/// Storage breakdown of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageReport {
    pub anchors: u64,
    pub lambda: f64,
    pub header_bytes: u64,
    /// Section sizes including their checksums.
    pub location_bytes: u64,
    pub feature_bytes: u64,
    pub scof_bytes: u64,
    pub side_bytes: u64,
    /// `scof_bytes` split by the encoder's per-element cost attribution.
    pub scaling_bytes: f64,
    pub offsets_bytes: f64,
    pub total_bytes: u64,
}

impl StorageReport {
    /// Header, section table and scene-specific parameters.
    pub fn others_bytes(&self) -> u64 {
        self.header_bytes + self.side_bytes
    }

    pub fn attribute_bytes(&self) -> u64 {
        self.feature_bytes + self.scof_bytes
    }

    pub fn bits_per_anchor(&self) -> f64 {
        if self.anchors == 0 {
            0.0
        } else {
            self.total_bytes as f64 * 8.0 / self.anchors as f64
        }
    }

    /// `(column, bytes)` pairs in table order.
    pub fn columns(&self) -> [(&'static str, f64); 6] {
        [
            ("Location", self.location_bytes as f64),
            ("Feature", self.feature_bytes as f64),
            ("Scaling", self.scaling_bytes),
            ("Offsets", self.offsets_bytes),
            ("Others", self.others_bytes() as f64),
            ("Total", self.total_bytes as f64),
        ]
    }

    /// Two tab-separated rows: column names and sizes in bytes.
    pub fn to_tsv(&self) -> String {
        let cols = self.columns();
        let names: Vec<&str> = cols.iter().map(|c| c.0).collect();
        let values: Vec<String> = cols.iter().map(|c| format!("{:.1}", c.1)).collect();
        format!("{}\n{}\n", names.join("\t"), values.join("\t"))
    }

    /// One `key=value` line per field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s += &format!("anchors={}\n", self.anchors);
        s += &format!("lambda={}\n", self.lambda);
        for (name, v) in self.columns() {
            s += &format!("{}_bytes={v:.1}\n", name.to_lowercase());
        }
        s += &format!("header_bytes={}\n", self.header_bytes);
        s += &format!("side_bytes={}\n", self.side_bytes);
        s += &format!("scof_bytes={}\n", self.scof_bytes);
        s += &format!("bits_per_anchor={:.4}\n", self.bits_per_anchor());
        s
    }
}

impl std::fmt::Display for StorageReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let cols = self.columns();
        for (name, _) in &cols {
            write!(f, "{name:>12}")?;
        }
        writeln!(f)?;
        for (_, v) in &cols {
            write!(f, "{:>10.2}KB", v / 1024.0)?;
        }
        writeln!(f)?;
        write!(f, "{} anchors, lambda {}, {:.2} bits/anchor", self.anchors, self.lambda, self.bits_per_anchor())
    }
}

/// Builds the report of a parsed stream.
pub fn storage_report(c: &Container<'_>) -> StorageReport {
    let with_crc = |s: &[u8]| (s.len() + CHECKSUM_BYTES) as u64;
    let scof_bytes = with_crc(c.scof);
    let (sb, ob) = (c.header.scaling_bits.max(0.0), c.header.offsets_bits.max(0.0));
    let share = if sb + ob > 0.0 { sb / (sb + ob) } else { 0.0 };
    StorageReport {
        anchors: c.header.anchors as u64,
        lambda: c.header.lambda as f64,
        header_bytes: HEADER_BYTES as u64,
        location_bytes: with_crc(c.loc),
        feature_bytes: with_crc(c.feat),
        scof_bytes,
        side_bytes: with_crc(c.side),
        scaling_bytes: scof_bytes as f64 * share,
        offsets_bytes: scof_bytes as f64 * (1.0 - share),
        total_bytes: c.total_bytes as u64,
    }
}

pub fn inspect(bytes: &[u8]) -> Result<StorageReport, CodecError> {
    Ok(storage_report(&parse_container(bytes)?))
}

/// Output of [`compress`].
#[derive(Debug, Clone)]
pub struct Compressed {
    pub bytes: Vec<u8>,
    /// What the decoder will reconstruct.
    pub decoded: DecodedScene,
    /// Original anchor index of each coding rank.
    pub original_index: Vec<usize>,
    pub rate: RateAccounting,
    pub report: StorageReport,
}

/// Values quantized and (optionally) entropy coded for one stage.
struct StageCoded {
    symbols: Vec<i32>,
    values: Vec<f64>,
    steps: Vec<f64>,
    cost_bits: Vec<f64>,
    estimate_bits: f64,
}

fn code_elements(
    enc: Option<&mut RangeEncoder>,
    anchor: usize,
    original: &[f64],
    step: &[f64],
    mu: &[f64],
    sigma: &[f64],
) -> Result<StageCoded, CodecError> {
    let n = original.len();
    let mut out = StageCoded {
        symbols: Vec::with_capacity(n),
        values: Vec::with_capacity(n),
        steps: step.to_vec(),
        cost_bits: Vec::with_capacity(n),
        estimate_bits: 0.0,
    };
    let mut enc = enc;
    for e in 0..n {
        let (k, deq) = quantize_value(original[e], step[e]);
        let symbol = i32::try_from(k).map_err(|_| CodecError::EscapeOverflow { anchor, value: original[e] })?;
        let cdf = GaussianCdf::new(mu[e], sigma[e], step[e]).map_err(|e| CodecError::Model(e.into()))?;
        let cost = match cdf.index_of(k) {
            Some(i) => {
                if let Some(enc) = enc.as_deref_mut() {
                    enc.encode(&cdf, i).map_err(CodecError::Coder)?;
                }
                cdf.cost_bits(i)
            }
            None => {
                let i = cdf.escape_index();
                if let Some(enc) = enc.as_deref_mut() {
                    enc.encode(&cdf, i).map_err(CodecError::Coder)?;
                    enc.encode_raw_u32(symbol as u32);
                }
                cdf.cost_bits(i) + ESCAPE_RAW_BITS
            }
        };
        out.estimate_bits += element_rate(deq, mu[e], sigma[e], step[e]).bits;
        out.symbols.push(symbol);
        out.values.push(deq);
        out.cost_bits.push(cost);
    }
    Ok(out)
}

fn decode_elements(
    dec: &mut RangeDecoder<'_>,
    section: &str,
    step: &[f64],
    mu: &[f64],
    sigma: &[f64],
) -> Result<(Vec<i32>, Vec<f64>), CodecError> {
    let mut symbols = Vec::with_capacity(step.len());
    let mut values = Vec::with_capacity(step.len());
    for e in 0..step.len() {
        let cdf = GaussianCdf::new(mu[e], sigma[e], step[e]).map_err(|e| CodecError::Model(e.into()))?;
        let i = dec.decode(&cdf).map_err(|e| coder_error(section, e))?;
        let k = if i == cdf.escape_index() {
            dec.decode_raw_u32().map_err(|e| coder_error(section, e))? as i32 as i64
        } else {
            cdf.symbol_at(i)
        };
        let symbol = i32::try_from(k).map_err(|_| CodecError::Layout(format!("{section} symbol {k} out of range")))?;
        symbols.push(symbol);
        values.push(symbol as f64 * step[e]);
    }
    Ok((symbols, values))
}

/// Result of quantizing a whole scene in coding order with a model.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub anchors: Vec<QuantizedAnchor>,
    pub rate: RateAccounting,
    pub feat_bytes: Vec<u8>,
    pub scof_bytes: Vec<u8>,
}

/// Runs both stages over `geometry` in coding order. `features` and `scof`
/// hold the original values per coding rank. With `encode` set, the symbols
/// are also range coded.
pub fn reconstruct(
    model: &HemgsModel,
    geometry: &SceneGeometry,
    features: &[Vec<f64>],
    scof: &[Vec<f64>],
    lambda: RateLambda,
    encode: bool,
    original_index: &[usize],
) -> Result<Reconstruction, CodecError> {
    let n = geometry.len();
    let mut hash = Vec::with_capacity(n);
    for loc in &geometry.unit_locations {
        hash.push(model.hash.query(*loc).map_err(HemgsError::from)?);
    }
    let mut rate = RateAccounting::default();

    let mut feat_enc = encode.then(RangeEncoder::new);
    let mut feat_coded: Vec<StageCoded> = Vec::with_capacity(n);
    let mut feat_values: Vec<Vec<f64>> = Vec::with_capacity(n);
    for r in 0..n {
        let neighbors = geometry.neighbors(r, &feat_values, r)?;
        let input =
            StageInput { agnostic: &geometry.agnostic[r], hash: &hash[r], local: None, neighbors: &neighbors, lambda };
        let p = model.predict(Stage::Feature, &input)?;
        let coded = code_elements(feat_enc.as_mut(), original_index[r], &features[r], &p.step, &p.mu, &p.sigma)?;
        rate.feature_bits += coded.cost_bits.iter().sum::<f64>();
        rate.feature_estimate_bits += coded.estimate_bits;
        rate.escapes += coded.cost_bits.iter().filter(|&&c| c >= ESCAPE_RAW_BITS).count();
        feat_values.push(coded.values.clone());
        feat_coded.push(coded);
    }

    let mut scof_enc = encode.then(RangeEncoder::new);
    let mut scof_values: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut anchors = Vec::with_capacity(n);
    for r in 0..n {
        let neighbors = geometry.neighbors(r, &scof_values, r)?;
        let input = StageInput {
            agnostic: &geometry.agnostic[r],
            hash: &hash[r],
            local: Some(&feat_values[r]),
            neighbors: &neighbors,
            lambda,
        };
        let p = model.predict(Stage::ScalingOffsets, &input)?;
        let coded = code_elements(scof_enc.as_mut(), original_index[r], &scof[r], &p.step, &p.mu, &p.sigma)?;
        rate.scaling_bits += coded.cost_bits[..SCALING_DIM].iter().sum::<f64>();
        rate.offsets_bits += coded.cost_bits[SCALING_DIM..].iter().sum::<f64>();
        rate.scof_estimate_bits += coded.estimate_bits;
        rate.escapes += coded.cost_bits.iter().filter(|&&c| c >= ESCAPE_RAW_BITS).count();
        scof_values.push(coded.values.clone());
        let f = &feat_coded[r];
        anchors.push(QuantizedAnchor {
            qlocation: geometry.qlocations[r],
            qfeature: f.symbols.clone(),
            feature: f.values.clone(),
            feature_step: f.steps.clone(),
            qscof: coded.symbols,
            scof: coded.values,
            scof_step: coded.steps,
        });
    }
    Ok(Reconstruction {
        anchors,
        rate,
        feat_bytes: feat_enc.map(|e| e.finish()).unwrap_or_default(),
        scof_bytes: scof_enc.map(|e| e.finish()).unwrap_or_default(),
    })
}

/// Compresses `scene` at rate point `lambda`.
///
/// The model is first rounded through its file format so the encoder uses
/// exactly the parameters the decoder will load from the stream.
pub fn compress(
    scene: &AnchorScene,
    model: &HemgsModel,
    extractor: &AgnosticExtractor,
    lambda: f64,
) -> Result<Compressed, CodecError> {
    scene.validate()?;
    model.check_scene_dims(scene.feature_dim, scene.offsets_per_anchor)?;
    let lambda32 = lambda as f32;
    let lambda = RateLambda::new(lambda32 as f64)?;
    let side = model.to_bytes()?;
    let model = HemgsModel::from_bytes(&side)?;

    let qlocs = scene.quantized_locations();
    let (geometry, index) =
        SceneGeometry::from_unordered(&qlocs, &scene.aabb, scene.voxel_size, extractor, &model.config)?;
    let features: Vec<Vec<f64>> =
        index.iter().map(|&i| scene.anchors[i].feature.iter().map(|&v| v as f64).collect()).collect();
    let scof: Vec<Vec<f64>> =
        index.iter().map(|&i| scene.anchors[i].scaling_offsets().map(|v| v as f64).collect()).collect();
    let rec = reconstruct(&model, &geometry, &features, &scof, lambda, true, &index)?;

    let loc: Vec<u8> = geometry.qlocations.iter().flatten().flat_map(|c| c.to_le_bytes()).collect();
    let header = Header {
        version: VERSION,
        anchors: scene.len() as u32,
        feature_dim: scene.feature_dim as u32,
        offsets_per_anchor: scene.offsets_per_anchor as u32,
        aabb: scene.aabb,
        voxel_size: scene.voxel_size,
        lambda: lambda32,
        digest: model_digest(&side, extractor),
        scaling_bits: rec.rate.scaling_bits,
        offsets_bits: rec.rate.offsets_bits,
    };
    let bytes = write_container(&header, [&loc, &rec.feat_bytes, &rec.scof_bytes, &side]);
    let report = inspect(&bytes)?;
    Ok(Compressed {
        decoded: DecodedScene {
            aabb: scene.aabb,
            voxel_size: scene.voxel_size,
            feature_dim: scene.feature_dim,
            offsets_per_anchor: scene.offsets_per_anchor,
            lambda: lambda32,
            anchors: rec.anchors,
        },
        original_index: index,
        rate: rec.rate,
        report,
        bytes,
    })
}

/// Decodes a stream using the model stored in it.
pub fn decompress(bytes: &[u8], extractor: &AgnosticExtractor) -> Result<DecodedScene, CodecError> {
    let c = parse_container(bytes)?;
    if model_digest(c.side, extractor) != c.header.digest {
        return Err(CodecError::DigestMismatch);
    }
    let model = HemgsModel::from_bytes(c.side)?;
    decode_container(&c, &model, extractor)
}

/// Decodes a stream with a model supplied out of band; it must be the one
/// the stream was produced with.
pub fn decompress_with_model(
    bytes: &[u8],
    model: &HemgsModel,
    extractor: &AgnosticExtractor,
) -> Result<DecodedScene, CodecError> {
    let c = parse_container(bytes)?;
    let model_bytes = model.to_bytes()?;
    if model_digest(&model_bytes, extractor) != c.header.digest || model_digest(c.side, extractor) != c.header.digest {
        return Err(CodecError::DigestMismatch);
    }
    let model = HemgsModel::from_bytes(&model_bytes)?;
    decode_container(&c, &model, extractor)
}

fn decode_container(
    c: &Container<'_>,
    model: &HemgsModel,
    extractor: &AgnosticExtractor,
) -> Result<DecodedScene, CodecError> {
    let h = &c.header;
    model.check_scene_dims(h.feature_dim as usize, h.offsets_per_anchor as usize)?;
    let lambda = RateLambda::new(h.lambda as f64)?;
    let n = h.anchors as usize;
    let qlocations: Vec<[u16; 3]> =
        c.loc.chunks_exact(6).map(|b| [0, 1, 2].map(|a| u16::from_le_bytes([b[2 * a], b[2 * a + 1]]))).collect();
    let geometry = SceneGeometry::from_ordered(qlocations, &h.aabb, h.voxel_size, extractor, &model.config)?;
    let hash: Vec<Vec<f64>> = geometry
        .unit_locations
        .iter()
        .map(|l| model.hash.query(*l).map_err(HemgsError::from))
        .collect::<Result<_, _>>()?;

    let mut anchors: Vec<QuantizedAnchor> = Vec::with_capacity(n);
    let mut feat_values: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut dec = RangeDecoder::new(c.feat).map_err(|e| coder_error("FEAT", e))?;
    for r in 0..n {
        let neighbors = geometry.neighbors(r, &feat_values, r)?;
        let input =
            StageInput { agnostic: &geometry.agnostic[r], hash: &hash[r], local: None, neighbors: &neighbors, lambda };
        let p = model.predict(Stage::Feature, &input)?;
        let (symbols, values) = decode_elements(&mut dec, "FEAT", &p.step, &p.mu, &p.sigma)?;
        feat_values.push(values.clone());
        anchors.push(QuantizedAnchor {
            qlocation: geometry.qlocations[r],
            qfeature: symbols,
            feature: values,
            feature_step: p.step,
            qscof: Vec::new(),
            scof: Vec::new(),
            scof_step: Vec::new(),
        });
    }
    dec.finish().map_err(|e| coder_error("FEAT", e))?;

    let mut scof_values: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut dec = RangeDecoder::new(c.scof).map_err(|e| coder_error("SCOF", e))?;
    for r in 0..n {
        let neighbors = geometry.neighbors(r, &scof_values, r)?;
        let input = StageInput {
            agnostic: &geometry.agnostic[r],
            hash: &hash[r],
            local: Some(&feat_values[r]),
            neighbors: &neighbors,
            lambda,
        };
        let p = model.predict(Stage::ScalingOffsets, &input)?;
        let (symbols, values) = decode_elements(&mut dec, "SCOF", &p.step, &p.mu, &p.sigma)?;
        scof_values.push(values.clone());
        let a = &mut anchors[r];
        a.qscof = symbols;
        a.scof = values;
        a.scof_step = p.step;
    }
    dec.finish().map_err(|e| coder_error("SCOF", e))?;

    Ok(DecodedScene {
        aabb: h.aabb,
        voxel_size: h.voxel_size,
        feature_dim: h.feature_dim as usize,
        offsets_per_anchor: h.offsets_per_anchor as usize,
        lambda: h.lambda,
        anchors,
    })
}

//! Parameter files: `HMGW` magic, a little-endian `u32` manifest length, a
//! JSON manifest (kind, version, config, tensor names and lengths), then every
//! tensor as little-endian `f32` in manifest order.

use serde::{Deserialize, Serialize};

use super::{NnError, Params};

pub const MAGIC: &[u8; 4] = b"HMGW";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobManifest {
    pub kind: String,
    pub version: u32,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

impl BlobManifest {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len).sum()
    }
}

/// Serializes `params`; values are rounded to `f32`.
pub fn write_blob<C: Serialize>(kind: &str, version: u32, config: &C, params: &dyn Params) -> Result<Vec<u8>, NnError> {
    let mut tensors = Vec::new();
    let mut values: Vec<f32> = Vec::new();
    params.visit(&mut |name, t| {
        tensors.push(TensorEntry { name: name.to_string(), len: t.len() });
        values.extend(t.iter().map(|&v| v as f32));
    });
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(NnError::NonFinite(format!("{kind} parameter value {v}")));
    }
    let config = serde_json::to_value(config).map_err(|e| NnError::Format(e.to_string()))?;
    let manifest = BlobManifest { kind: kind.to_string(), version, config, tensors };
    let json = serde_json::to_vec(&manifest).map_err(|e| NnError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a parameter file into its manifest and raw values.
pub fn read_blob(bytes: &[u8]) -> Result<(BlobManifest, Vec<f32>), NnError> {
    let fail = |m: &str| NnError::Format(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(fail("missing HMGW magic"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + len).ok_or_else(|| fail("truncated manifest"))?;
    let manifest: BlobManifest = serde_json::from_slice(body).map_err(|e| NnError::Format(e.to_string()))?;
    let data = &bytes[8 + len..];
    let count = manifest.param_count();
    if data.len() != 4 * count {
        return Err(NnError::Format(format!("expected {} parameter bytes, found {}", 4 * count, data.len())));
    }
    let values: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite(manifest.kind.clone()));
    }
    Ok((manifest, values))
}

/// Copies `values` into `params`, checking that names and lengths agree with
/// the manifest.
pub fn load_into(params: &mut dyn Params, manifest: &BlobManifest, values: &[f32]) -> Result<(), NnError> {
    let mut i = 0;
    let mut pos = 0;
    let mut err = None;
    params.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match manifest.tensors.get(i) {
            Some(e) if e.name == name && e.len == t.len() => {
                for (dst, src) in t.iter_mut().zip(&values[pos..pos + e.len]) {
                    *dst = *src as f64;
                }
                pos += e.len;
            }
            Some(e) => {
                err = Some(format!("tensor {i}: file has {} [{}], model expects {name} [{}]", e.name, e.len, t.len()))
            }
            None => err = Some(format!("file lacks tensor {name}")),
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(NnError::Format(e));
    }
    if i != manifest.tensors.len() {
        return Err(NnError::Format(format!("file has {} tensors, model {i}", manifest.tensors.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_snaps_to_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::random(&[3, 5, 2], Activation::Softplus, &mut rng);
        let bytes = write_blob("test", 1, &net.widths(), &net).unwrap();
        let (manifest, values) = read_blob(&bytes).unwrap();
        assert_eq!(manifest.kind, "test");
        assert_eq!(manifest.param_count(), net.param_count());
        let mut copy = net.zeros_like();
        load_into(&mut copy, &manifest, &values).unwrap();
        let mut a = Vec::new();
        net.visit(&mut |_, t| a.extend(t.iter().map(|&v| v as f32 as f64)));
        let mut b = Vec::new();
        copy.visit(&mut |_, t| b.extend_from_slice(t));
        assert_eq!(a, b);
        // a second trip is exact
        assert_eq!(write_blob("test", 1, &net.widths(), &copy).unwrap(), bytes);
    }

    #[test]
    fn shape_mismatch_and_truncation_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::random(&[3, 5, 2], Activation::None, &mut rng);
        let bytes = write_blob("test", 1, &(), &net).unwrap();
        let (manifest, values) = read_blob(&bytes).unwrap();
        let mut other = Mlp::random(&[3, 4, 2], Activation::None, &mut rng);
        assert!(load_into(&mut other, &manifest, &values).is_err());
        assert!(read_blob(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_blob(b"nope").is_err());
    }
}

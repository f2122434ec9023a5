//! Encode and decode speed on a given scene.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{compress, decompress, CodecError};
use crate::hemgs::HemgsModel;
use crate::nn::AgnosticExtractor;
use crate::scene::AnchorScene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub anchors: usize,
    pub lambda: f64,
    pub repeats: usize,
    pub stream_bytes: usize,
    /// Best wall time over the repeats.
    pub encode_seconds: f64,
    pub decode_seconds: f64,
}

impl ThroughputReport {
    pub fn encode_anchors_per_second(&self) -> f64 {
        self.anchors as f64 / self.encode_seconds.max(1e-12)
    }

    pub fn decode_anchors_per_second(&self) -> f64 {
        self.anchors as f64 / self.decode_seconds.max(1e-12)
    }

    /// `(encode, decode)` speed relative to `baseline`; below 1 is slower.
    pub fn relative_to(&self, baseline: &ThroughputReport) -> (f64, f64) {
        (
            self.encode_anchors_per_second() / baseline.encode_anchors_per_second(),
            self.decode_anchors_per_second() / baseline.decode_anchors_per_second(),
        )
    }

    pub fn to_kv(&self) -> String {
        format!(
            "anchors={}\nlambda={}\nrepeats={}\nstream_bytes={}\nencode_seconds={:.6}\ndecode_seconds={:.6}\n\
             encode_anchors_per_second={:.1}\ndecode_anchors_per_second={:.1}\n",
            self.anchors,
            self.lambda,
            self.repeats,
            self.stream_bytes,
            self.encode_seconds,
            self.decode_seconds,
            self.encode_anchors_per_second(),
            self.decode_anchors_per_second()
        )
    }
}

/// Times `repeats` compress and decompress calls and keeps the fastest of
/// each. Fails if a decode does not reproduce the encoder's reconstruction.
pub fn measure_throughput(
    scene: &AnchorScene,
    model: &HemgsModel,
    extractor: &AgnosticExtractor,
    lambda: f64,
    repeats: usize,
) -> Result<ThroughputReport, CodecError> {
    let repeats = repeats.max(1);
    let mut encode = f64::INFINITY;
    let mut decode = f64::INFINITY;
    let mut stream_bytes = 0;
    for _ in 0..repeats {
        let t = Instant::now();
        let c = compress(scene, model, extractor, lambda)?;
        encode = encode.min(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let d = decompress(&c.bytes, extractor)?;
        decode = decode.min(t.elapsed().as_secs_f64());
        if d != c.decoded {
            return Err(CodecError::Layout("decoded scene differs from the encoder's reconstruction".into()));
        }
        stream_bytes = c.bytes.len();
    }
    Ok(ThroughputReport {
        anchors: scene.len(),
        lambda,
        repeats,
        stream_bytes,
        encode_seconds: encode,
        decode_seconds: decode,
    })
}

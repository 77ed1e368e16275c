//! LGIS image stacks: the magic line `LGIS1\n`, one JSON header line, then
//! `frame_count · rows · cols` little-endian `f64` readouts, row-major.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beam::{BeamGeometry, ModeSpec, Pose};
use crate::detector::{DetectorModel, Frame, NoiseParams};

pub const MAGIC: &[u8; 6] = b"LGIS1\n";
pub const VALUE_KIND: &str = "f64";

#[derive(Debug, Error)]
pub enum LgisError {
    #[error("bad magic: file does not start with LGIS1")]
    BadMagic,
    #[error("header line is missing or not terminated")]
    MissingHeader,
    #[error("header schema violation: {0}")]
    Schema(String),
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl LgisError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            LgisError::BadMagic => "lgis_bad_magic",
            LgisError::MissingHeader => "lgis_missing_header",
            LgisError::Schema(_) => "lgis_schema",
            LgisError::LengthMismatch { .. } => "lgis_length_mismatch",
            LgisError::Io(_) => "lgis_io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgisHeader {
    pub rows: usize,
    pub cols: usize,
    pub pitch_um: f64,
    pub frame_count: usize,
    pub value_kind: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mode: Option<ModeSpec>,
    #[serde(default)]
    pub geometry: Option<BeamGeometry>,
    #[serde(default)]
    pub noise: Option<NoiseParams>,
    #[serde(default)]
    pub pose: Option<Pose>,
    #[serde(default)]
    pub photons: Option<f64>,
}

impl LgisHeader {
    pub fn new(detector: &DetectorModel, frame_count: usize) -> Self {
        Self {
            rows: detector.rows(),
            cols: detector.cols(),
            pitch_um: detector.pixel_pitch(),
            frame_count,
            value_kind: VALUE_KIND.into(),
            seed: None,
            mode: None,
            geometry: None,
            noise: Some(detector.noise),
            pose: None,
            photons: None,
        }
    }

    fn validate(&self) -> Result<(), LgisError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(LgisError::Schema(format!("grid {}x{}", self.rows, self.cols)));
        }
        if !(self.pitch_um > 0.0 && self.pitch_um.is_finite()) {
            return Err(LgisError::Schema(format!("pitch_um {}", self.pitch_um)));
        }
        if self.value_kind != VALUE_KIND {
            return Err(LgisError::Schema(format!("value_kind {:?}", self.value_kind)));
        }
        Ok(())
    }

    fn payload_len(&self) -> Option<usize> {
        self.frame_count
            .checked_mul(self.rows)?
            .checked_mul(self.cols)?
            .checked_mul(8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgisStack {
    pub header: LgisHeader,
    /// All frames back to back, row-major within a frame.
    pub data: Vec<f64>,
}

impl LgisStack {
    pub fn from_frames(mut header: LgisHeader, frames: &[Frame]) -> Result<Self, LgisError> {
        header.frame_count = frames.len();
        let mut data = Vec::with_capacity(frames.len() * header.rows * header.cols);
        for f in frames {
            if f.rows != header.rows || f.cols != header.cols || f.readouts.len() != f.rows * f.cols {
                return Err(LgisError::Schema(format!(
                    "frame {}x{} in a {}x{} stack",
                    f.rows, f.cols, header.rows, header.cols
                )));
            }
            data.extend_from_slice(&f.readouts);
        }
        header.validate()?;
        Ok(Self { header, data })
    }

    pub fn frame_len(&self) -> usize {
        self.header.rows * self.header.cols
    }

    pub fn frame(&self, i: usize) -> Frame {
        let n = self.frame_len();
        Frame {
            rows: self.header.rows,
            cols: self.header.cols,
            readouts: self.data[i * n..(i + 1) * n].to_vec(),
            seed: self.header.seed,
            frame_index: i as u64,
        }
    }

    pub fn frames(&self) -> Vec<Frame> {
        (0..self.header.frame_count).map(|i| self.frame(i)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, LgisError> {
        self.header.validate()?;
        let expected = self.header.payload_len().ok_or_else(|| LgisError::Schema("payload too large".into()))?;
        if expected != self.data.len() * 8 {
            return Err(LgisError::LengthMismatch {
                expected,
                actual: self.data.len() * 8,
            });
        }
        let header = serde_json::to_string(&self.header).map_err(|e| LgisError::Schema(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 1 + expected);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LgisError> {
        let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or(LgisError::BadMagic)?;
        let end = rest.iter().position(|&b| b == b'\n').ok_or(LgisError::MissingHeader)?;
        let text = std::str::from_utf8(&rest[..end]).map_err(|e| LgisError::Schema(e.to_string()))?;
        let header: LgisHeader = serde_json::from_str(text).map_err(|e| LgisError::Schema(e.to_string()))?;
        header.validate()?;
        let payload = &rest[end + 1..];
        let expected = header.payload_len().ok_or_else(|| LgisError::Schema("payload too large".into()))?;
        if payload.len() != expected {
            return Err(LgisError::LengthMismatch {
                expected,
                actual: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { header, data })
    }
}

pub fn write_lgis(stack: &LgisStack, path: &Path) -> Result<(), LgisError> {
    let bytes = stack.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_lgis(path: &Path) -> Result<LgisStack, LgisError> {
    LgisStack::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack() -> LgisStack {
        let det = DetectorModel::new(13.0, 3, 2, NoiseParams::default()).unwrap();
        let mut h = LgisHeader::new(&det, 0);
        h.seed = Some(9);
        h.mode = Some(ModeSpec::lg(1, 2));
        h.geometry = Some(BeamGeometry::new(0.633, 77.48).unwrap());
        h.pose = Some(Pose::new(0.1, -0.2, 1e4 / 3.0));
        let frames: Vec<Frame> = (0..2)
            .map(|i| Frame {
                rows: 3,
                cols: 2,
                readouts: (0..6).map(|k| (k as f64 + 0.1) * (i as f64 - 0.7) / 3.0).collect(),
                seed: Some(9),
                frame_index: i,
            })
            .collect();
        LgisStack::from_frames(h, &frames).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = stack();
        let bytes = s.to_bytes().unwrap();
        let back = LgisStack::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for (a, b) in back.data.iter().zip(&s.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = stack().to_bytes().unwrap();
        let e = LgisStack::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(e.code(), "lgis_length_mismatch");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(LgisStack::from_bytes(&bad).unwrap_err().code(), "lgis_bad_magic");
        assert_eq!(LgisStack::from_bytes(b"LGIS1\n{}").unwrap_err().code(), "lgis_missing_header");
        let text = String::from_utf8_lossy(&bytes[6..]).to_string();
        let header_line = text.split('\n').next().unwrap().replace("\"rows\":3", "\"rows\":0");
        let mut zero = MAGIC.to_vec();
        zero.extend_from_slice(header_line.as_bytes());
        zero.push(b'\n');
        assert_eq!(LgisStack::from_bytes(&zero).unwrap_err().code(), "lgis_schema");
    }
}

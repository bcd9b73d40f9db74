//! Feature file format (little-endian):
//!
//! ```text
//! magic "C2CF" | version u32 | N u32 | T u32 | H u32 | W u32 | C_in u32
//! N records: verb u32 | object u32 | f32 * (T*H*W*C_in)
//! ```

use std::path::Path;

use super::{write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::labelspace::{LabelSpace, Sample};
use crate::model::VideoShape;
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"C2CF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub verb: u32,
    pub object: u32,
    /// `T x H x W x C_in`, row-major
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub shape: VideoShape,
    pub records: Vec<FeatureRecord>,
}

impl FeatureSet {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = self.shape;
        let mut out = Vec::with_capacity(28 + self.records.len() * (8 + 4 * s.len()));
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [FEATURE_VERSION as usize, self.records.len(), s.frames, s.height, s.width, s.channels] {
            out.extend_from_slice(&u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{v} exceeds u32")))?.to_le_bytes());
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.values.len() != s.len() {
                return Err(Error::Shape(format!("record {i} has {} values, expected {}", r.values.len(), s.len())));
            }
            out.extend_from_slice(&r.verb.to_le_bytes());
            out.extend_from_slice(&r.object.to_le_bytes());
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != FEATURE_MAGIC {
            return Err(Error::format(0, "bad feature-file magic"));
        }
        let version = r.u32("version")?;
        if version != FEATURE_VERSION {
            return Err(Error::format(4, format!("unsupported feature-file version {version}")));
        }
        let n = r.u32("N")? as usize;
        let shape = VideoShape {
            frames: r.u32("T")? as usize,
            height: r.u32("H")? as usize,
            width: r.u32("W")? as usize,
            channels: r.u32("C_in")? as usize,
        };
        let mut records = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let verb = r.u32("verb")?;
            let object = r.u32("object")?;
            let values = r.f32s(shape.len(), "sample values")?;
            records.push(FeatureRecord { verb, object, values });
        }
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "trailing bytes after last record"));
        }
        Ok(Self { shape, records })
    }

    /// Records `indices` stacked frame by frame as `[len * T, H*W*C_in]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.shape;
        let mut data = Vec::with_capacity(indices.len() * s.len());
        for &i in indices {
            let r = self
                .records
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("record {i} out of {}", self.records.len())))?;
            data.extend(r.values.iter().map(|&v| f64::from(v)));
        }
        Tensor::matrix(indices.len() * s.frames, s.frame_len(), data)
    }

    /// Record index of each sample. Sample ids are decimal record indices,
    /// and each record's labels must agree with the sample's composition.
    pub fn resolve(&self, space: &LabelSpace, samples: &[Sample]) -> Result<Vec<usize>> {
        samples
            .iter()
            .map(|s| {
                let i: usize = s
                    .sample_id
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("sample id `{}` is not a record index", s.sample_id)))?;
                let r = self.records.get(i).ok_or_else(|| {
                    Error::InvalidInput(format!("sample `{}` beyond {} records", s.sample_id, self.records.len()))
                })?;
                if s.composition >= space.num_compositions() {
                    return Err(Error::InvalidInput(format!("composition {} out of range", s.composition)));
                }
                let (v, o) = space.composition(s.composition);
                if (r.verb as usize, r.object as usize) != (v, o) {
                    return Err(Error::InvalidInput(format!(
                        "record {i} is labelled ({}, {}) but sample `{}` is composition ({v}, {o})",
                        r.verb, r.object, s.sample_id
                    )));
                }
                Ok(i)
            })
            .collect()
    }
}

pub fn write_features(path: &Path, set: &FeatureSet) -> Result<()> {
    write_atomic(path, &set.to_bytes()?)
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    FeatureSet::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> FeatureSet {
        let shape = VideoShape {
            frames: 4,
            height: 8,
            width: 8,
            channels: 3,
        };
        FeatureSet {
            shape,
            records: (0..2)
                .map(|i| FeatureRecord {
                    verb: i,
                    object: 1 - i,
                    values: (0..shape.len()).map(|k| (k as f32 * 0.01 + i as f32).sin()).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn payload_size_matches_header_arithmetic() {
        let bytes = set().to_bytes().unwrap();
        assert_eq!(bytes.len(), 28 + 2 * (8 + 4 * 8 * 8 * 3 * 4));
    }

    #[test]
    fn byte_round_trip() {
        let bytes = set().to_bytes().unwrap();
        let back = FeatureSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, set());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = set().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(FeatureSet::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = set().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match FeatureSet::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 28 + 8 + 3072 + 8),
            other => panic!("{other:?}"),
        }
    }
}

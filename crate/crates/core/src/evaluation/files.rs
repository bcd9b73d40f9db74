//! Curve export and the external score-matrix format.
//!
//! Score files are little-endian:
//!
//! ```text
//! magic "C2CS" | version u32 | N u32 | N_a u32
//! N_a seen flags (one byte each, 0 or 1) | N ground-truth u32 | N*N_a f32 scores
//! ```

use std::path::{Path, PathBuf};

use super::{CurvePoint, EvalReport, ScoreMatrix, SweepCurve};
use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader};

pub const SCORE_MAGIC: &[u8; 4] = b"C2CS";
pub const SCORE_VERSION: u32 = 1;

pub fn curve_csv(curve: &SweepCurve) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bias", "seen", "unseen"])?;
    for p in &curve.points {
        w.write_record([format!("{:?}", p.bias), format!("{:?}", p.seen), format!("{:?}", p.unseen)])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes the curve CSV to `path` and the report as JSON next to it (same
/// stem, `.json` extension). Returns the sidecar path.
pub fn export_curve(curve: &SweepCurve, report: &EvalReport, path: &Path) -> Result<PathBuf> {
    let sidecar = path.with_extension("json");
    if sidecar == path {
        return Err(Error::InvalidInput(format!("curve path {} must not end in .json", path.display())));
    }
    write_atomic(path, &curve_csv(curve)?)?;
    write_atomic(&sidecar, &serde_json::to_vec_pretty(report)?)?;
    Ok(sidecar)
}

pub fn read_curve(path: &Path) -> Result<SweepCurve> {
    let mut r = csv::Reader::from_path(path)?;
    let points = r.deserialize::<CurvePoint>().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(SweepCurve { points })
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_score_file(path: &Path, m: &ScoreMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(16 + m.cols() + 4 * m.rows() * (1 + m.cols()));
    out.extend_from_slice(SCORE_MAGIC);
    for v in [SCORE_VERSION as usize, m.rows(), m.cols()] {
        out.extend_from_slice(&u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{v} exceeds u32")))?.to_le_bytes());
    }
    out.extend(m.seen().iter().map(|&s| u8::from(s)));
    for &t in m.ground_truth() {
        out.extend_from_slice(&(t as u32).to_le_bytes());
    }
    for &s in m.scores() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_score_file(path: &Path) -> Result<ScoreMatrix> {
    parse_scores(&std::fs::read(path)?)
}

pub(crate) fn parse_scores(bytes: &[u8]) -> Result<ScoreMatrix> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != SCORE_MAGIC {
        return Err(Error::format(0, "bad score-file magic"));
    }
    let version = r.u32("version")?;
    if version != SCORE_VERSION {
        return Err(Error::format(4, format!("unsupported score-file version {version}")));
    }
    let n = r.u32("N")? as usize;
    let na = r.u32("N_a")? as usize;
    let at = r.offset();
    let flags = r.take(na, "seen flags")?;
    if let Some(i) = flags.iter().position(|&f| f > 1) {
        return Err(Error::format(at + i as u64, "seen flag must be 0 or 1"));
    }
    let seen: Vec<bool> = flags.iter().map(|&f| f == 1).collect();
    let truth: Vec<usize> = (0..n).map(|_| r.u32("ground truth").map(|t| t as usize)).collect::<Result<_>>()?;
    let count = n
        .checked_mul(na)
        .ok_or_else(|| Error::format(r.offset(), "score count overflows"))?;
    let scores = r.f32s(count, "scores")?;
    if !r.is_empty() {
        return Err(Error::format(r.offset(), "trailing bytes after scores"));
    }
    ScoreMatrix::new(scores.into_iter().map(f64::from).collect(), truth, seen)
}

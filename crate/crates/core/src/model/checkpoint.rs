//! Model checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic "C2CM" | version u32
//! repeated until EOF:
//!   name_len u32 | name bytes (UTF-8) | rank u32 | dims u32 * rank | f32 * prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{C2CModel, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C2CM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &C2CModel, out: &mut impl Write) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in model.names().iter().zip(model.tensors()) {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<C2CModel> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    while !r.is_empty() {
        let len = r.u32("name length")? as usize;
        let at = r.offset();
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?;
        let rank = r.u32("rank")? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let values = r.f32s(n, "values")?;
        names.push(name);
        tensors.push(Tensor::new(dims, values.into_iter().map(f64::from).collect())?);
    }

    let shape_of = |name: &str| -> Result<&[usize]> {
        names
            .iter()
            .position(|n| n == name)
            .map(|i| tensors[i].shape())
            .ok_or_else(|| Error::format(r.offset(), format!("checkpoint lacks `{name}`")))
    };
    let general = shape_of("general.weight")?;
    let fc1 = shape_of("static.fc1.weight")?;
    let verbs = shape_of("prototypes.verb")?;
    let objects = shape_of("prototypes.object")?;
    if general.len() != 2 || fc1.len() != 2 || verbs.len() != 2 || objects.len() != 2 {
        return Err(Error::format(r.offset(), "parameter tables must be rank 2"));
    }
    let config = ModelConfig {
        frame_len: general[0],
        hidden_dim: general[1],
        channels: fc1[1],
        num_verbs: verbs[0],
        num_objects: objects[0],
        share_reference: !names.iter().any(|n| n.starts_with("reference.")),
    };
    C2CModel::from_parts(config, names, tensors)
}

pub fn save_checkpoint(model: &C2CModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<C2CModel> {
    read_checkpoint(&mut std::fs::File::open(path)?)
}

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Model, ModelConfig, ModelError, Params, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"MEDU";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes a model to bytes. Values are stored as little-endian `f32`.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(model.config()).map_err(|e| ModelError::Parse {
        offset: 0,
        msg: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + model.params().total_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::Parse {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| ModelError::Parse {
                offset: at as u64,
                msg: format!("{what} {v} exceeds file size"),
            })
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(ModelError::Parse {
            offset: 0,
            msg: "bad magic bytes".into(),
        });
    }
    let version = c.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = c.len("header length")?;
    let header_at = c.pos;
    let config: ModelConfig =
        serde_json::from_slice(c.take(header_len, "header")?).map_err(|e| ModelError::Parse {
            offset: header_at as u64,
            msg: format!("header: {e}"),
        })?;
    config.validate()?;

    let skeleton = Model::new(config.clone())?;
    let mut params = Params::new();
    while !c.done() {
        let at = c.pos;
        let name_len = c.u32("name length")? as usize;
        let name =
            std::str::from_utf8(c.take(name_len, "name")?).map_err(|_| ModelError::Parse {
                offset: at as u64,
                msg: "parameter name is not UTF-8".into(),
            })?;
        let rank = c.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(ModelError::Parse {
                offset: at as u64,
                msg: format!("{name}: implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.len("dimension")?);
        }
        let expected = skeleton
            .params()
            .get(name)
            .ok_or_else(|| ModelError::Integrity(format!("unexpected parameter {name}")))?;
        if expected.shape() != shape.as_slice() {
            return Err(ModelError::Integrity(format!(
                "{name}: stored shape {shape:?}, config implies {:?}",
                expected.shape()
            )));
        }
        if params.get(name).is_some() {
            return Err(ModelError::Integrity(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        params.insert(name.to_string(), Tensor::new(shape, data)?);
    }
    if params.len() != skeleton.params().len() {
        let missing: Vec<&str> = skeleton
            .params()
            .iter()
            .map(|(n, _)| n)
            .filter(|n| params.get(n).is_none())
            .collect();
        return Err(ModelError::Integrity(format!(
            "missing parameters {missing:?}"
        )));
    }
    let mut ordered = Params::new();
    for (name, _) in skeleton.params().iter() {
        ordered.insert(name, params.get(name).unwrap().clone());
    }
    Model::from_parts(config, ordered)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| ModelError::Contract(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

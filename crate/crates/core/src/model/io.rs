//! Versioned binary model container.
//!
//! ```text
//! "KDSL" | u32 version | u32 len + config JSON | u32 tensor count
//!   per tensor: u16 len + name | u8 dtype | u8 ndim | u32 dims... | LE payload
//! | 32-byte SHA-256 of everything before it
//! ```
//!
//! All integers are little-endian. dtype 1 is f64, dtype 0 is f32 (read
//! only; written files always use f64 so a reload is bit-exact).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, ParamSet, SelectorModel, Tensor};

pub const MAGIC: &[u8; 4] = b"KDSL";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    echo: serde_json::Value,
}

pub fn write_model<W: Write>(model: &SelectorModel, mut writer: W) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        echo: model.echo.clone(),
    })
    .map_err(|e| ModelError::Corrupt(e.to_string()))?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.params.tensors.len() as u32).to_le_bytes());
    for t in &model.params.tensors {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(DTYPE_F64);
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    writer.write_all(&buf)?;
    Ok(())
}

/// Writes through a temporary file and renames it into place.
pub fn save_model(model: &SelectorModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let tmp = path.with_extension("kdsl.tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        write_model(model, &mut file)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SelectorModel, ModelError> {
    let file = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).ok_or(ModelError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(ModelError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_model<R: Read>(mut reader: R) -> Result<SelectorModel, ModelError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() {
        return Err(ModelError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut cur = Cursor { bytes: &bytes, pos: 4 };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 8 + 32 {
        return Err(ModelError::Truncated);
    }
    let body_len = bytes.len() - 32;
    let header_len = cur.u32()? as usize;
    let header_bytes = cur.take(header_len)?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|_| {
        // a cut inside the header shows up as invalid JSON
        if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
            ModelError::Truncated
        } else {
            ModelError::Corrupt("unreadable config header".into())
        }
    })?;
    let n_tensors = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors.min(1024));
    for _ in 0..n_tensors {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Corrupt("tensor name is not UTF-8".into()))?;
        let dtype = cur.u8()?;
        let ndim = cur.u8()? as usize;
        let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let data = match dtype {
            DTYPE_F64 => cur
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DTYPE_F32 => cur
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(ModelError::Corrupt(format!("unknown dtype tag {other}"))),
        };
        tensors.push(Tensor { name, shape, data });
    }
    if cur.pos != body_len {
        return Err(if cur.pos > body_len {
            ModelError::Truncated
        } else {
            ModelError::Corrupt(format!("{} unexpected trailing bytes", body_len - cur.pos))
        });
    }
    if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
        return Err(ModelError::Checksum);
    }

    header.model.validate()?;
    let layout = header.model.layout();
    if layout.len() != tensors.len()
        || layout
            .iter()
            .zip(&tensors)
            .any(|((name, shape), t)| name != &t.name || shape != &t.shape)
    {
        return Err(ModelError::Corrupt("tensor manifest does not match the model config".into()));
    }
    if tensors.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
        return Err(ModelError::Corrupt("non-finite parameter".into()));
    }
    Ok(SelectorModel {
        config: header.model,
        params: ParamSet { tensors },
        velocity: None,
        echo: header.echo,
    })
}

//! DSAW weight files.
//!
//! Layout, all integers little-endian: `b"DSAW"`, `u32` version (1), `u32`
//! tensor count, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, `u32` extents and the binary32 payload. The first tensor,
//! [`LAYOUT_TENSOR`], holds the model layout integers.

use std::fs;
use std::path::Path;

use dsatrack_core::model::{Model, ParamStore};
use dsatrack_core::Tensor;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"DSAW";
pub const VERSION: u32 = 1;
pub const LAYOUT_TENSOR: &str = "__layout__";

/// Largest integer magnitude a binary32 holds exactly.
const F32_EXACT: i64 = 1 << 24;

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(
        &u32::try_from(tensors.len())
            .map_err(|_| CliError::invalid("too many tensors"))?
            .to_le_bytes(),
    );
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| CliError::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.ndim()).map_err(|_| CliError::invalid(format!("{name}: rank {}", t.ndim())))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| CliError::invalid(format!("{name}: extent {d}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CliError::invalid(format!("weight file truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> CliResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> CliResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(buf: &[u8]) -> CliResult<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CliError::invalid("not a DSAW weight file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::invalid(format!("unsupported DSAW version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CliError::invalid("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<CliResult<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| CliError::invalid(format!("{name}: extents overflow")))?;
        let bytes = r.take(
            n.checked_mul(4)
                .ok_or_else(|| CliError::invalid(format!("{name}: payload overflow")))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CliError::invalid(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(CliError::invalid(format!(
            "{} trailing bytes after last tensor",
            buf.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn encode_model(model: &Model) -> CliResult<Vec<u8>> {
    let ints = model.layout_ints();
    if let Some(v) = ints.iter().find(|v| v.abs() > F32_EXACT) {
        return Err(CliError::invalid(format!("layout value {v} not representable")));
    }
    let layout = Tensor::new(&[ints.len()], ints.iter().map(|&v| v as f64).collect())?;
    let mut tensors = vec![(LAYOUT_TENSOR.to_string(), layout)];
    tensors.extend(model.params().iter().map(|(n, t)| (n.to_string(), t.clone())));
    encode_tensors(&tensors)
}

pub fn decode_model(buf: &[u8]) -> CliResult<Model> {
    let mut tensors = decode_tensors(buf)?.into_iter();
    let (name, layout) = tensors
        .next()
        .ok_or_else(|| CliError::invalid("weight file holds no tensors"))?;
    if name != LAYOUT_TENSOR || layout.ndim() != 1 {
        return Err(CliError::invalid(format!(
            "first tensor must be {LAYOUT_TENSOR}, found {name}"
        )));
    }
    let ints: Vec<i64> = layout.data().iter().map(|&v| v as i64).collect();
    let (config, layers) = Model::layout_from_ints(&ints)?;
    let mut params = ParamStore::new();
    for (n, t) in tensors {
        if params.get(&n).is_some() {
            return Err(CliError::invalid(format!("duplicate tensor {n}")));
        }
        params.insert(n, t);
    }
    Ok(Model::from_params(config, layers, params)?)
}

pub fn save_model(model: &Model, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, encode_model(model)?).map_err(|e| CliError::io(path, e))
}

pub fn load_model(path: &Path) -> CliResult<Model> {
    let buf = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_model(&buf)
}

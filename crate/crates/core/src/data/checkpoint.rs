use std::path::Path;

use indexmap::IndexMap;

use super::{field, header_fields, io_err, parse_num, split_header, write_atomic, DataError, Result};
use crate::model::{HeadKind, ModelParams, UNetConfig};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &str = "SSLCKPT1";

/// Header line with the model config, one `name dims` line per tensor, then
/// the raw little-endian values of every tensor in table order.
pub fn save_checkpoint<T: Real>(path: &Path, model: &ModelParams<T>) -> Result<()> {
    let c = model.config();
    let mut text = format!(
        "{CHECKPOINT_MAGIC} dtype={} head={} depth={} base_channels={} in_channels={} num_classes={} \
         global_embed_dim={} global_hidden_dim={} local_embed_dim={} tensors={}\n",
        T::DTYPE,
        model.head().map_or("none", HeadKind::name),
        c.depth,
        c.base_channels,
        c.in_channels,
        c.num_classes,
        c.global_embed_dim,
        c.global_hidden_dim,
        c.local_embed_dim,
        model.tensors().len(),
    );
    for (name, t) in model.tensors() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        text.push_str(&format!("{name} {}\n", dims.join("x")));
    }
    let mut bytes = text.into_bytes();
    for t in model.tensors().values() {
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    write_atomic(path, &bytes)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_checkpoint(&bytes)
}

fn parse_checkpoint<T: Real>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let (line, mut rest) = split_header(bytes, CHECKPOINT_MAGIC)?;
    let fields = header_fields(line)?;
    let dtype = field(&fields, "dtype")?;
    if dtype != T::DTYPE {
        return Err(DataError::Header(format!("checkpoint dtype {dtype} does not match {}", T::DTYPE)));
    }
    let num = |k: &str| -> Result<usize> { parse_num(k, field(&fields, k)?) };
    let config = UNetConfig {
        depth: num("depth")?,
        base_channels: num("base_channels")?,
        in_channels: num("in_channels")?,
        num_classes: num("num_classes")?,
        global_embed_dim: num("global_embed_dim")?,
        global_hidden_dim: num("global_hidden_dim")?,
        local_embed_dim: num("local_embed_dim")?,
    };
    let head = match field(&fields, "head")? {
        "none" => None,
        other => Some(other.parse::<HeadKind>()?),
    };
    let count = num("tensors")?;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DataError::Header("tensor table ends early".into()))?;
        let entry = std::str::from_utf8(&rest[..end]).map_err(|_| DataError::Header("tensor table is not UTF-8".into()))?;
        let (name, dims) =
            entry.split_once(' ').ok_or_else(|| DataError::Header(format!("bad tensor entry {entry:?}")))?;
        let dims: Vec<usize> = dims.split('x').map(|d| parse_num("dims", d)).collect::<Result<_>>()?;
        table.push((name.to_string(), dims));
        rest = &rest[end + 1..];
    }
    let expected = table.iter().map(|(_, d)| d.iter().product::<usize>()).sum::<usize>() * T::BYTES;
    if rest.len() < expected {
        return Err(DataError::Truncated { expected, found: rest.len() });
    }
    if rest.len() > expected {
        return Err(DataError::SizeMismatch { expected, found: rest.len() });
    }
    let mut tensors = IndexMap::with_capacity(count);
    for (name, dims) in table {
        let n = dims.iter().product::<usize>() * T::BYTES;
        let (chunk, tail) = rest.split_at(n);
        let data = chunk.chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.insert(name, Tensor::new(dims, data).map_err(|e| DataError::Header(e.to_string()))?);
        rest = tail;
    }
    Ok(ModelParams::from_parts(config, head, tensors)?)
}

//! Self-describing binary checkpoint container.
//!
//! Layout (all little-endian): 8-byte magic, u32 version, u32 metadata
//! length + JSON metadata, u32 tensor count, then per tensor a u16 name
//! length + name, u8 ndim, u32 dims, and the payload as f64 bits. Weights
//! are stored as f64, which round-trips both f32 and f64 models bit-exactly.

use crate::error::{Error, Result};
use crate::model::{build_toy_model, nn, ToyNet, ToyNetSpec, ToyVariant};
use crate::Real;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"SEGBCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    variant: String,
    width: usize,
    num_classes: usize,
    seed: u64,
    /// Scalar type the model was trained in (informational).
    scalar: String,
}

fn scalar_name<F: Real>() -> &'static str {
    if std::mem::size_of::<F>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Serializes a toy model to the container format.
pub fn save_model<F: Real>(model: &ToyNet<F>, path: &Path) -> Result<()> {
    let spec = model.spec();
    let meta = CheckpointMeta {
        variant: spec.variant.as_str().to_string(),
        width: spec.width,
        num_classes: spec.num_classes,
        seed: spec.seed,
        scalar: scalar_name::<F>().to_string(),
    };
    let meta_json = serde_json::to_vec(&meta).expect("meta serializes");

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);

    let layers = &model.network().layers;
    buf.extend_from_slice(&((layers.len() * 2) as u32).to_le_bytes());
    for (i, layer) in layers.iter().enumerate() {
        write_tensor(
            &mut buf,
            &format!("layer{i}.weight"),
            &[layer.weight.shape()[0], layer.weight.shape()[1]],
            layer.weight.iter().map(|v| v.to_f64()),
        );
        write_tensor(
            &mut buf,
            &format!("layer{i}.bias"),
            &[layer.bias.len()],
            layer.bias.iter().map(|v| v.to_f64()),
        );
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], values: impl Iterator<Item = f64>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::UnsupportedModel("truncated checkpoint".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Loads a toy model, converting stored f64 weights to the requested scalar.
pub fn load_model<F: Real>(path: &Path) -> Result<ToyNet<F>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::UnsupportedModel(format!("{}: {e}", path.display())))?;
    let mut cur = Cursor {
        data: &bytes,
        pos: 0,
    };
    if cur.take(8)? != MAGIC {
        return Err(Error::UnsupportedModel(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedModel(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::UnsupportedModel(format!("bad metadata: {e}")))?;
    let variant = match meta.variant.as_str() {
        "A" => ToyVariant::A,
        "B" => ToyVariant::B,
        other => {
            return Err(Error::UnsupportedModel(format!(
                "unknown variant '{other}'"
            )))
        }
    };
    let spec = ToyNetSpec {
        variant,
        width: meta.width,
        num_classes: meta.num_classes,
        seed: meta.seed,
    };
    let mut model: ToyNet<F> =
        build_toy_model(spec).map_err(|e| Error::UnsupportedModel(e.to_string()))?;

    let tensor_count = cur.u32()? as usize;
    for _ in 0..tensor_count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::UnsupportedModel("bad tensor name".into()))?
            .to_string();
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let payload = cur.take(count * 8)?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        fill_tensor(&mut model, &name, &dims, &values)?;
    }
    Ok(model)
}

fn fill_tensor<F: Real>(
    model: &mut ToyNet<F>,
    name: &str,
    dims: &[usize],
    values: &[f64],
) -> Result<()> {
    let bad = || Error::UnsupportedModel(format!("tensor '{name}' does not match architecture"));
    let (layer_idx, field) = name
        .strip_prefix("layer")
        .and_then(|rest| rest.split_once('.'))
        .and_then(|(idx, field)| idx.parse::<usize>().ok().map(|i| (i, field.to_string())))
        .ok_or_else(bad)?;
    let layers = &mut model.network_mut().layers;
    let layer: &mut nn::Conv2d<F> = layers.get_mut(layer_idx).ok_or_else(bad)?;
    match field.as_str() {
        "weight" => {
            if dims != [layer.weight.shape()[0], layer.weight.shape()[1]] {
                return Err(bad());
            }
            for (w, &v) in layer.weight.iter_mut().zip(values) {
                *w = F::cast(v);
            }
        }
        "bias" => {
            if dims != [layer.bias.len()] {
                return Err(bad());
            }
            for (b, &v) in layer.bias.iter_mut().zip(values) {
                *b = F::cast(v);
            }
        }
        _ => return Err(bad()),
    }
    Ok(())
}

/// Wraps an externally supplied model behind the adapter interface. The
/// descriptor is a path to a checkpoint in the container format above;
/// anything else is unsupported.
pub fn load_external_model<F: Real>(descriptor: &str) -> Result<ToyNet<F>> {
    load_model(Path::new(descriptor))
}

//! Binary checkpoint format:
//! magic "SFAF" | u32 version | u32 json-len | ArchConfig JSON |
//! repeated records [u32 name-len, name, u8 dtype, u8 ndim, u32 dims...,
//! little-endian raw values]. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ArchConfig, Model};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"SFAF";
pub const VERSION: u32 = 1;

pub struct Record<T: Scalar> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Record<T> {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<T>) -> Self {
        Record {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Record::new(name, t.shape().to_vec(), t.data())
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    cfg: &ArchConfig,
    records: &[Record<T>],
) -> Result<()> {
    let json = serde_json::to_string(cfg)
        .map_err(|e| Error::decode(path.display().to_string(), e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    for rec in records {
        buf.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(rec.name.as_bytes());
        buf.push(T::DTYPE.tag());
        buf.push(rec.dims.len() as u8);
        for d in &rec.dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        debug_assert_eq!(rec.dims.iter().product::<usize>(), rec.data.len());
        for v in &rec.data {
            v.write_le(&mut buf);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::decode(&self.path, "unexpected end of file"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ArchConfig, Vec<Record<T>>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    if cur.take(4)? != MAGIC {
        return Err(Error::decode(&cur.path, "bad magic bytes"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::decode(&cur.path, format!("unsupported version {version}")));
    }
    let json_len = cur.u32()? as usize;
    let json = std::str::from_utf8(cur.take(json_len)?)
        .map_err(|_| Error::decode(&cur.path, "config is not valid UTF-8"))?;
    let cfg: ArchConfig =
        serde_json::from_str(json).map_err(|e| Error::decode(&cur.path, e.to_string()))?;

    let elem = T::DTYPE.size_bytes();
    let mut records = Vec::new();
    while !cur.at_end() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::decode(&cur.path, "record name is not valid UTF-8"))?
            .to_string();
        let tag = cur.u8()?;
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| Error::decode(&cur.path, format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::decode(
                &cur.path,
                format!("record `{name}` has dtype {dtype:?}, expected {:?}", T::DTYPE),
            ));
        }
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel * elem)?;
        let data: Vec<T> = raw.chunks_exact(elem).map(T::read_le).collect();
        records.push(Record { name, dims, data });
    }
    Ok((cfg, records))
}

/// Model parameters as checkpoint records, in stable traversal order.
pub fn model_records<T: Scalar>(model: &Model<T>) -> Vec<Record<T>> {
    let mut out = Vec::new();
    model.visit(&mut |name, t| out.push(Record::from_tensor(name, t)));
    out
}

/// Save model parameters plus any extra records (optimizer state).
pub fn save_model<T: Scalar>(path: &Path, model: &Model<T>, extra: &[Record<T>]) -> Result<()> {
    let mut records = model_records(model);
    records.extend(extra.iter().map(|r| Record {
        name: r.name.clone(),
        dims: r.dims.clone(),
        data: r.data.clone(),
    }));
    save_checkpoint(path, &model.cfg, &records)
}

/// Rebuild a model from a checkpoint. Every model parameter must be
/// present with matching shape; unconsumed records (optimizer state) are
/// returned for the caller.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, Vec<Record<T>>)> {
    let (cfg, records) = load_checkpoint::<T>(path)?;
    let model = Model::new(&cfg, 0)?;
    let mut by_name: std::collections::HashMap<String, Record<T>> =
        records.into_iter().map(|r| (r.name.clone(), r)).collect();
    let mut missing = Vec::new();
    model.visit(&mut |name, t| match by_name.remove(&name) {
        Some(rec) => {
            if rec.dims != t.shape() {
                missing.push(format!(
                    "{name}: shape {:?} in file, {:?} in model",
                    rec.dims,
                    t.shape()
                ));
            } else {
                t.set_data(&rec.data);
            }
        }
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        return Err(Error::decode(
            path.display().to_string(),
            format!("parameter set mismatch: {}", missing.join("; ")),
        ));
    }
    let mut leftover: Vec<Record<T>> = by_name.into_values().collect();
    leftover.sort_by(|a, b| a.name.cmp(&b.name));
    Ok((model, leftover))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::FilterMode;
    use tempfile::tempdir;

    fn tiny_cfg() -> ArchConfig {
        ArchConfig {
            base_channels: 4,
            naf_blocks: 1,
            rows: 2,
            kernel: 3,
            filter: FilterMode::Learned,
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sfaf");
        let model = Model::<f32>::new(&tiny_cfg(), 123).unwrap();
        save_model(&path, &model, &[]).unwrap();

        let (loaded, leftover) = load_model::<f32>(&path).unwrap();
        assert!(leftover.is_empty());
        assert_eq!(loaded.cfg, model.cfg);
        let orig = model.named_params();
        let back = loaded.named_params();
        assert_eq!(orig.len(), back.len());
        for ((n1, t1), (n2, t2)) in orig.iter().zip(&back) {
            assert_eq!(n1, n2);
            let (d1, d2) = (t1.data(), t2.data());
            assert_eq!(
                d1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                d2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "parameter {n1} not bit-identical"
            );
        }
    }

    #[test]
    fn loaded_model_forwards_identically() {
        use crate::tensor::rand_uniform;
        use rand_chacha::rand_core::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sfaf");
        let model = Model::<f32>::new(&tiny_cfg(), 5).unwrap();
        save_model(&path, &model, &[]).unwrap();
        let (loaded, _) = load_model::<f32>(&path).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_uniform::<f32, _>(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let a = model.forward(&img).unwrap();
        let b = loaded.forward(&img).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn extra_records_survive_and_missing_params_fail() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sfaf");
        let model = Model::<f32>::new(&tiny_cfg(), 1).unwrap();
        let extra = vec![Record::new("opt.step", vec![1], vec![42.0f32])];
        save_model(&path, &model, &extra).unwrap();
        let (_, leftover) = load_model::<f32>(&path).unwrap();
        assert_eq!(leftover.len(), 1);
        assert_eq!(leftover[0].name, "opt.step");
        assert_eq!(leftover[0].data, vec![42.0]);

        // A checkpoint with only the extra record is rejected.
        let path2 = dir.path().join("broken.sfaf");
        save_checkpoint(&path2, &tiny_cfg(), &extra).unwrap();
        assert!(load_model::<f32>(&path2).is_err());
    }

    #[test]
    fn corrupted_files_are_decode_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.sfaf");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        let truncated = dir.path().join("trunc.sfaf");
        let model = Model::<f32>::new(&tiny_cfg(), 1).unwrap();
        save_model(&truncated, &model, &[]).unwrap();
        let bytes = std::fs::read(&truncated).unwrap();
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint::<f32>(&truncated).is_err());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f32.sfaf");
        let model = Model::<f32>::new(&tiny_cfg(), 1).unwrap();
        save_model(&path, &model, &[]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }
}

//! `ODF1` named-array checkpoints.
//!
//! Layout, all integers little-endian: magic `ODF1`, `u32` array count, then
//! per array a `u32` name length, the UTF-8 name, a `u8` rank, `rank` `u32`
//! dims and the `f32` payload.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::OdFormer;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ODF1";
/// Array holding the architecture fields needed to rebuild a model.
pub const ARCH_KEY: &str = "meta.arch";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid("checkpoint", format!("duplicate array name {name:?}")));
        }
        if shape.len() > usize::from(u8::MAX) || shape.iter().any(|&d| u32::try_from(d).is_err()) {
            return Err(Error::invalid(
                "checkpoint",
                format!("shape {shape:?} not representable"),
            ));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("checkpoint", shape, &[data.len()]));
        }
        self.arrays.push(NamedArray {
            name,
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    /// Stores a tensor rounded to `f32`.
    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.push(name, t.shape(), t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend((self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend((a.name.len() as u32).to_le_bytes());
            out.extend(a.name.as_bytes());
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend((d as u32).to_le_bytes());
            }
            for v in &a.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad checkpoint magic"));
        }
        let count = r.u32()?;
        let mut names = HashSet::new();
        let mut arrays = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "array name is not UTF-8"))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::format(path, format!("duplicate array name {name:?}")));
            }
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::format(path, format!("array {name:?} larger than file")))?;
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn arch_vector(cfg: &ModelConfig) -> Vec<f32> {
    let mut v = vec![
        cfg.m,
        cfg.k,
        cfg.c_i,
        cfg.window,
        cfg.c_d,
        cfg.classes,
        cfg.input_side,
        cfg.crop,
    ];
    v.extend(&cfg.depths);
    v.extend(&cfg.heads);
    v.into_iter().map(|x| x as f32).collect()
}

fn arch_config(a: &NamedArray, path: &Path) -> Result<ModelConfig> {
    let bad = || Error::format(path, format!("malformed {ARCH_KEY} array"));
    let v: Vec<usize> = a
        .data
        .iter()
        .map(|&x| (x >= 0.0 && x.fract() == 0.0).then_some(x as usize).ok_or_else(bad))
        .collect::<Result<_>>()?;
    if v.len() < 8 || v.len() != 8 + 2 * v[1] {
        return Err(bad());
    }
    let k = v[1];
    let cfg = ModelConfig {
        m: v[0],
        k,
        c_i: v[2],
        window: v[3],
        c_d: v[4],
        classes: v[5],
        input_side: v[6],
        crop: v[7],
        depths: v[8..8 + k].to_vec(),
        heads: v[8 + k..].to_vec(),
        ..ModelConfig::desk()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Every store entry (parameters and statistic buffers) plus the
/// architecture record.
pub fn checkpoint_from_store(config: &ModelConfig, store: &ParamStore) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    let arch = arch_vector(config);
    ck.push(ARCH_KEY, &[arch.len()], arch)?;
    for id in store.ids() {
        ck.push_tensor(store.name(id), store.value(id))?;
    }
    Ok(ck)
}

/// Copies matching arrays into `store`; every entry must be present with
/// the same shape.
pub fn restore_store(ck: &Checkpoint, store: &mut ParamStore, path: &Path) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let a = ck
            .get(&name)
            .ok_or_else(|| Error::format(path, format!("missing array {name:?}")))?;
        let dst = store.value_mut(id);
        if a.shape != dst.shape() {
            return Err(Error::format(
                path,
                format!(
                    "array {name:?} has shape {:?}, model expects {:?}",
                    a.shape,
                    dst.shape()
                ),
            ));
        }
        dst.data_mut()
            .iter_mut()
            .zip(&a.data)
            .for_each(|(d, &s)| *d = f64::from(s));
    }
    Ok(())
}

/// Rebuilds the model described by the checkpoint and loads its weights.
pub fn model_from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(OdFormer, ParamStore)> {
    let arch = ck
        .get(ARCH_KEY)
        .ok_or_else(|| Error::format(path, format!("missing {ARCH_KEY} array")))?;
    let (model, mut store) = OdFormer::new(arch_config(arch, path)?)?;
    restore_store(ck, &mut store, path)?;
    Ok((model, store))
}

pub fn save_model(path: &Path, config: &ModelConfig, store: &ParamStore) -> Result<()> {
    checkpoint_from_store(config, store)?.save(path)
}

pub fn load_model(path: &Path) -> Result<(OdFormer, ParamStore)> {
    model_from_checkpoint(&Checkpoint::load(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn empty_is_eight_bytes() {
        let bytes = Checkpoint::new().encode();
        assert_eq!(bytes, b"ODF1\0\0\0\0");
        assert!(Checkpoint::decode(&bytes, p()).unwrap().is_empty());
    }

    #[test]
    fn exact_layout() {
        let mut ck = Checkpoint::new();
        ck.push("w", &[2, 2], vec![1.0, -2.0, 0.5, 3.25]).unwrap();
        let bytes = ck.encode();
        let mut want = b"ODF1".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.push(b'w');
        want.push(2);
        want.extend(2u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        for v in [1.0f32, -2.0, 0.5, 3.25] {
            want.extend(v.to_le_bytes());
        }
        assert_eq!(bytes, want);
        assert_eq!(Checkpoint::decode(&bytes, p()).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.push("a", &[3], vec![1.0, 2.0, 3.0]).unwrap();
        let good = ck.encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad, p()).unwrap_err().to_string().contains("magic"));
        assert!(Checkpoint::decode(&good[..good.len() - 1], p()).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(Checkpoint::decode(&long, p()).is_err());
        assert!(Checkpoint::decode(b"OD", p()).is_err());
        // huge declared extents must not allocate
        let mut huge = b"ODF1\x01\0\0\0\x01\0\0\0a\x02".to_vec();
        huge.extend(u32::MAX.to_le_bytes());
        huge.extend(u32::MAX.to_le_bytes());
        assert!(Checkpoint::decode(&huge, p()).is_err());
    }

    #[test]
    fn duplicate_names() {
        let mut ck = Checkpoint::new();
        ck.push("a", &[1], vec![0.0]).unwrap();
        assert!(ck.push("a", &[1], vec![0.0]).is_err());
        let mut bytes = ck.encode();
        bytes[4] = 2;
        bytes.extend(&ck.encode()[8..]);
        assert!(Checkpoint::decode(&bytes, p())
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }

    #[test]
    fn model_round_trip() {
        let mut cfg = ModelConfig::desk();
        cfg.c_i = 8;
        cfg.c_d = 8;
        cfg.depths = vec![2, 2];
        cfg.heads = vec![2, 2];
        cfg.k = 2;
        let (_, store) = OdFormer::new(cfg.clone()).unwrap();
        let ck = checkpoint_from_store(&cfg, &store).unwrap();
        let bytes = ck.encode();
        let (model, restored) = model_from_checkpoint(&Checkpoint::decode(&bytes, p()).unwrap(), p()).unwrap();
        assert_eq!(model.config.c_i, 8);
        assert_eq!(model.config.depths, vec![2, 2]);
        for id in store.ids() {
            let a: Vec<f32> = store.value(id).data().iter().map(|&v| v as f32).collect();
            let b: Vec<f32> = restored.value(id).data().iter().map(|&v| v as f32).collect();
            assert_eq!(a, b, "{}", store.name(id));
        }
        assert_eq!(checkpoint_from_store(&cfg, &restored).unwrap().encode(), bytes);
    }

    #[test]
    fn missing_array() {
        let cfg = ModelConfig::desk();
        let (_, store) = OdFormer::new(cfg.clone()).unwrap();
        let full = checkpoint_from_store(&cfg, &store).unwrap();
        let mut partial = Checkpoint::new();
        for a in full.arrays().iter().take(5) {
            partial.push(a.name.clone(), &a.shape, a.data.clone()).unwrap();
        }
        assert!(model_from_checkpoint(&partial, p()).is_err());
    }
}

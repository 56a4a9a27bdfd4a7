//! `KGC1` checkpoint container.
//!
//! ```text
//! "KGC1"
//! u32 metadata length, metadata (UTF-8 JSON)
//! u32 entry count
//! per entry: u32 name length, name (UTF-8), u32 rank, u64 × rank extents,
//!            row-major f32 payload
//! ```
//! All integers and floats are little-endian. Parameters live under
//! `param/`, optimizer moments under `adam/m/` and `adam/v/`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::optim::AdamState;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KGC1";
const PARAM_NS: &str = "param/";
const ADAM_M_NS: &str = "adam/m/";
const ADAM_V_NS: &str = "adam/v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(store: &ParamStore, adam: Option<&AdamState>, metadata: serde_json::Value) -> Self {
        let mut entries: Vec<(String, Tensor)> = store
            .iter()
            .map(|(_, p)| (format!("{PARAM_NS}{}", p.name), p.value.clone()))
            .collect();
        let mut metadata = metadata;
        if let Some(state) = adam {
            for (i, (_, p)) in store.iter().enumerate() {
                let shape = p.value.shape().to_vec();
                entries.push((
                    format!("{ADAM_M_NS}{}", p.name),
                    Tensor::new(shape.clone(), state.m[i].clone()).expect("moment matches parameter"),
                ));
                entries.push((
                    format!("{ADAM_V_NS}{}", p.name),
                    Tensor::new(shape, state.v[i].clone()).expect("moment matches parameter"),
                ));
            }
            if let serde_json::Value::Object(map) = &mut metadata {
                map.insert("optimizer_step".into(), state.step.into());
            }
        }
        Checkpoint { metadata, entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy every parameter of `store` from the checkpoint.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{PARAM_NS}{}", store.param(id).name);
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::shape("restore_params", store.get(id).shape(), t.shape()));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn restore_adam(&self, store: &ParamStore) -> Result<Option<AdamState>> {
        let Some(step) = self.metadata.get("optimizer_step").and_then(|v| v.as_u64()) else {
            return Ok(None);
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, p) in store.iter() {
            for (ns, out) in [(ADAM_M_NS, &mut m), (ADAM_V_NS, &mut v)] {
                let name = format!("{ns}{}", p.name);
                let t = self
                    .get(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
                out.push(t.data().to_vec());
            }
        }
        Ok(Some(AdamState::from_parts(step, m, v)))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata = serde_json::from_slice(&meta)?;
        let count = read_u32(&mut r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut payload = vec![0u8; n * 4];
            r.read_exact(&mut payload)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

//! Versioned binary checkpoint format ("ckpt-v1"): a JSON metadata blob,
//! named parameter blobs with shapes, and optional optimizer state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::nn::optim::ParamStore;
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ckpt-v1\0";

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: &serde_json::Value,
    include_optimizer: bool,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let meta_bytes = serde_json::to_vec(meta)?;
    w.write_u32::<LittleEndian>(meta_bytes.len() as u32)?;
    w.write_all(&meta_bytes)?;
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name)?;
        let t = store.get(id);
        w.write_u8(t.shape.len() as u8)?;
        for &d in &t.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &x in &t.data {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    w.write_u8(include_optimizer as u8)?;
    if include_optimizer {
        w.write_u64::<LittleEndian>(store.step_count())?;
        for id in store.ids() {
            let (m, v) = store.opt_state(id);
            for &x in m {
                w.write_f64::<LittleEndian>(x)?;
            }
            for &x in v {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a ckpt-v1 file".into()));
    }
    let meta_len = r.read_u32::<LittleEndian>()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("invalid utf-8 parameter name".into()))?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for x in data.iter_mut() {
            *x = r.read_f64::<LittleEndian>()?;
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    let has_opt = r.read_u8()? != 0;
    if has_opt {
        let step = r.read_u64::<LittleEndian>()?;
        store.set_step(step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let n = store.get(id).len();
            let mut m = vec![0.0; n];
            for x in m.iter_mut() {
                *x = r.read_f64::<LittleEndian>()?;
            }
            let mut v = vec![0.0; n];
            for x in v.iter_mut() {
                *x = r.read_f64::<LittleEndian>()?;
            }
            store.set_opt_state(id, m, v)?;
        }
    }
    Ok((store, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn round_trip_with_optimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::randn(vec![3, 4], 0.5, &mut rng));
        store.add("a.b", Tensor::randn(vec![4], 0.5, &mut rng));
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = serde_json::json!({"kind": "test", "seed": 4});
        save_checkpoint(&path, &store, &meta, true).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(loaded_meta, meta);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}

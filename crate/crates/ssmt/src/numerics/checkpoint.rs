//! Checkpoint container: a small header with the model configuration as text
//! followed by named little-endian 64-bit float arrays. Round trips are
//! bit-exact, so resumed training replays the exact parameter state.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::optim::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SSMTCKPT";
const VERSION: u32 = 2;

pub fn save(store: &ParamStore, config_text: &str, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, config_text)?;

    let names: Vec<&String> = store.names().collect();
    w.write_all(&(names.len() as u32).to_le_bytes())?;
    for name in &names {
        write_str(&mut w, name)?;
        write_tensor(&mut w, store.get(name))?;
    }

    // Optimizer moments, so training can resume.
    let (m1, m2) = store.moments();
    w.write_all(&store.step().to_le_bytes())?;
    for name in &names {
        write_tensor(&mut w, &m1[*name])?;
        write_tensor(&mut w, &m2[*name])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, String)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_text = read_str(&mut r)?;

    let n = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    let mut names = Vec::with_capacity(n);
    for _ in 0..n {
        let name = read_str(&mut r)?;
        let t = read_tensor(&mut r)?;
        store.insert(&name, t);
        names.push(name);
    }

    let mut step_bytes = [0u8; 8];
    r.read_exact(&mut step_bytes)?;
    let step = u64::from_le_bytes(step_bytes);
    let mut m1 = BTreeMap::new();
    let mut m2 = BTreeMap::new();
    for name in &names {
        m1.insert(name.clone(), read_tensor(&mut r)?);
        m2.insert(name.clone(), read_tensor(&mut r)?);
    }
    store.restore_moments(m1, m2, step);
    Ok((store, config_text))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Data(format!("checkpoint string: {e}")))
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rows() as u32).to_le_bytes())?;
    w.write_all(&(t.cols() as u32).to_le_bytes())?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(rows, cols, data)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::optim::init_rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = init_rng(7);
        let mut store = ParamStore::new();
        store.insert_uniform("a.w", 3, 4, &mut rng);
        store.insert_uniform("b.w", 2, 2, &mut rng);
        save(&store, "dim = 4", &path).unwrap();
        let (loaded, cfg) = load(&path).unwrap();
        assert_eq!(cfg, "dim = 4");

        // Saving the loaded store again must produce identical bytes.
        let path2 = dir.path().join("model2.ckpt");
        save(&loaded, &cfg, &path2).unwrap();
        let (again, _) = load(&path2).unwrap();
        for name in loaded.names() {
            assert_eq!(loaded.get(name).data(), again.get(name).data());
        }
        let bytes1 = std::fs::read(&path2).unwrap();
        save(&again, &cfg, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }
}

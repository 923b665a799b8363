//! Flat binary checkpoint: magic "TSKM", a version word, the config record,
//! then named parameter blobs as little-endian 32-bit floats.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;

const MAGIC: &[u8; 4] = b"TSKM";
const VERSION: u32 = 1;

pub fn save(path: &Path, model: &Model<f32>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let config_json = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Schema(format!("serialize config: {e}")))?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&config_json).map_err(io_err)?;
    let params = model.named_params();
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io_err)?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &dim in &p.shape {
            w.write_all(&(dim as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in &p.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let bad = |what: &str| Error::Malformed {
        path: path.display().to_string(),
        what: what.to_string(),
    };
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(bad("not a TSKM checkpoint"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let config_len = read_u32(&mut r, path)? as usize;
    let mut config_json = vec![0u8; config_len];
    read_exact(&mut r, &mut config_json, path)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| bad(&format!("config record: {e}")))?;
    config.validate()?;

    // Materialize a model skeleton, then overwrite every blob by name.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model: Model<f32> = Model::new(config, &mut rng);
    let n_params = read_u32(&mut r, path)? as usize;
    let mut expected: std::collections::HashMap<String, usize> = model
        .named_params()
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();
    if n_params != expected.len() {
        return Err(bad(&format!(
            "checkpoint has {n_params} blobs, model expects {}",
            expected.len()
        )));
    }
    for _ in 0..n_params {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, path)?;
        let name = String::from_utf8(name).map_err(|_| bad("non-utf8 parameter name"))?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = vec![0f32; count];
        for v in data.iter_mut() {
            let mut buf = [0u8; 4];
            read_exact(&mut r, &mut buf, path)?;
            *v = f32::from_le_bytes(buf);
        }
        let idx = expected
            .remove(&name)
            .ok_or_else(|| bad(&format!("unexpected parameter '{name}'")))?;
        let mut params = model.named_params_mut();
        let p = &mut params[idx];
        if p.shape != shape {
            return Err(bad(&format!(
                "parameter '{name}' has shape {shape:?}, model expects {:?}",
                p.shape
            )));
        }
        p.data = data;
    }
    if !expected.is_empty() {
        return Err(bad("checkpoint is missing parameters"));
    }
    Ok(model)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path)?;
    Ok(u64::from_le_bytes(buf))
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tskm");
        let mut cfg = ModelConfig::desk();
        cfg.n_layers = 2;
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.d_ffn = 32;
        cfg.vocab_size = 64;
        cfg.max_len = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model: Model<f32> = Model::new(cfg, &mut rng);
        save(&path, &model).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(model.config, back.config);
        for (a, b) in model.named_params().iter().zip(back.named_params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::desk();
        cfg.n_layers = 1;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ffn = 16;
        cfg.vocab_size = 32;
        cfg.max_len = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model: Model<f32> = Model::new(cfg, &mut rng);
        let p1 = dir.path().join("a.tskm");
        let p2 = dir.path().join("b.tskm");
        save(&p1, &model).unwrap();
        save(&p2, &model).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tskm");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}

//! `UPRC` checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  b"UPRC"
//! u32    version (1)
//! u64    config hash (FNV-1a of the canonical config string + dim)
//! u32    config string length, then the canonical key=value config
//! u32    feature dimension D
//! u64    epochs done
//! u64    steps done
//! u64    adam step counter
//! u32    parameter blob count, then per blob:
//!          u32 name length, name bytes, u32 rows, u32 cols, f64 data
//! u32    adam-m blob count + blobs, u32 adam-v blob count + blobs
//! ```
//!
//! Noise and shuffle streams are derived from the recorded seed and the
//! epoch/step counters, so the counters themselves are the generator
//! state: reloading reproduces bit-identical subsequent training steps.

use crate::config::{fnv1a64, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::Tensor;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"UPRC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dim: usize,
    pub epochs_done: u64,
    pub steps_done: u64,
    pub params: ModelParams,
    pub adam_t: u64,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

/// Hash identifying a (config, dim) pair for compatibility checks.
pub fn config_hash(config: &TrainConfig, dim: usize) -> u64 {
    let mut bytes = config.to_kv_string().into_bytes();
    bytes.extend_from_slice(format!("dim={dim}\n").as_bytes());
    fnv1a64(&bytes)
}

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config, self.dim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash().to_le_bytes())?;
        let cfg = self.config.to_kv_string();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.epochs_done.to_le_bytes())?;
        w.write_all(&self.steps_done.to_le_bytes())?;
        w.write_all(&self.adam_t.to_le_bytes())?;

        let write_blobs = |w: &mut BufWriter<File>, blobs: Vec<(String, &Tensor)>| -> Result<()> {
            w.write_all(&(blobs.len() as u32).to_le_bytes())?;
            for (name, tensor) in blobs {
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(tensor.rows() as u32).to_le_bytes())?;
                w.write_all(&(tensor.cols() as u32).to_le_bytes())?;
                for &v in tensor.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Ok(())
        };
        write_blobs(&mut w, self.params.named_tensors())?;
        write_blobs(&mut w, self.adam_m.iter().map(|(k, v)| (k.clone(), v)).collect())?;
        write_blobs(&mut w, self.adam_v.iter().map(|(k, v)| (k.clone(), v)).collect())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Cursor::new(BufReader::new(File::open(path)?));

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic, offset: 0 });
        }
        let version = r.read_u32("version")?;
        if version != VERSION {
            return Err(Error::BadVersion { found: version, offset: 4 });
        }
        let stored_hash = r.read_u64("config hash")?;
        let cfg_len = r.read_u32("config length")? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes, "config")?;
        let cfg_str = String::from_utf8(cfg_bytes)
            .map_err(|_| Error::Corrupt { offset: 20, msg: "config is not utf-8".into() })?;
        let config = TrainConfig::from_kv_string(&cfg_str)?;
        let dim = r.read_u32("dim")? as usize;
        let epochs_done = r.read_u64("epochs")?;
        let steps_done = r.read_u64("steps")?;
        let adam_t = r.read_u64("adam t")?;

        if config_hash(&config, dim) != stored_hash {
            return Err(Error::Incompatible { msg: "config hash does not match checkpoint contents".into() });
        }

        let param_blobs = r.read_blobs("params")?;
        let adam_m = r.read_blobs("adam m")?;
        let adam_v = r.read_blobs("adam v")?;

        let mut params = ModelParams::zeros(dim, config.heads, config.mlp_hidden)?;
        let mut remaining: BTreeMap<String, Tensor> = param_blobs.into_iter().collect();
        let mut mismatch = None;
        params.visit_mut(&mut |name, tensor| {
            match remaining.remove(&name) {
                Some(loaded) if loaded.shape() == tensor.shape() => *tensor = loaded,
                Some(loaded) => {
                    mismatch.get_or_insert(format!(
                        "parameter {name}: shape {:?} vs expected {:?}",
                        loaded.shape(),
                        tensor.shape()
                    ));
                }
                None => {
                    mismatch.get_or_insert(format!("parameter {name} missing from checkpoint"));
                }
            };
        });
        if let Some(msg) = mismatch {
            return Err(Error::Incompatible { msg });
        }
        if let Some(extra) = remaining.keys().next() {
            return Err(Error::Incompatible { msg: format!("unexpected parameter {extra} in checkpoint") });
        }

        Ok(Self {
            config,
            dim,
            epochs_done,
            steps_done,
            params,
            adam_t,
            adam_m: adam_m.into_iter().collect(),
            adam_v: adam_v.into_iter().collect(),
        })
    }
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], context: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        offset: self.offset + filled as u64,
                        context: context.to_string(),
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, context: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, context)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self, context: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, context)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_blobs(&mut self, context: &str) -> Result<Vec<(String, Tensor)>> {
        let count = self.read_u32(context)? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = self.read_u32(context)? as usize;
            let mut name = vec![0u8; name_len];
            self.read_exact(&mut name, context)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Corrupt { offset: self.offset, msg: format!("{context}: bad blob name") })?;
            let rows = self.read_u32(&name)? as usize;
            let cols = self.read_u32(&name)? as usize;
            let mut bytes = vec![0u8; rows * cols * 8];
            self.read_exact(&mut bytes, &name)?;
            let data: Vec<f64> =
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
            out.push((name, Tensor::from_vec(rows, cols, data)));
        }
        Ok(out)
    }
}

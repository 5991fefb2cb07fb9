//! `UPRF` binary feature files and the split manifest.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic  b"UPRF"
//! u32    version (1)
//! u32    D (feature dimension)
//! u64    record count
//! per record:
//!   u64  pair id
//!   u32  N_v
//!   u32  N_t
//!   f32  N_v * D video values, row-major
//!   f32  N_t * D text values, row-major
//! ```
//!
//! The format is deliberately trivial to parse from any language, so
//! externally precomputed features can be dropped in. Read errors carry the
//! byte offset of the failure, and a truncated file never yields partial
//! samples.

use crate::error::{Error, Result};
use crate::synth::{Corpus, PairedSample};
use crate::tensor::TensorBase;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: [u8; 4] = *b"UPRF";
pub const VERSION: u32 = 1;

/// Write one split's samples. Every sample must match `dim`.
pub fn write_features(path: &Path, dim: usize, samples: &[PairedSample]) -> Result<()> {
    for s in samples {
        if s.video.cols() != dim || s.text.cols() != dim {
            return Err(Error::InvalidArg {
                op: "write_features",
                msg: format!(
                    "pair {} has dims video {} / text {}, expected {dim}",
                    s.pair_id,
                    s.video.cols(),
                    s.text.cols()
                ),
            });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        w.write_all(&s.pair_id.to_le_bytes())?;
        w.write_all(&(s.video.rows() as u32).to_le_bytes())?;
        w.write_all(&(s.text.rows() as u32).to_le_bytes())?;
        for &v in s.video.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in s.text.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
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

    fn read_f32_matrix(&mut self, rows: usize, cols: usize, context: &str) -> Result<TensorBase<f32>> {
        let mut bytes = vec![0u8; rows * cols * 4];
        let start = self.offset;
        self.read_exact(&mut bytes, context)?;
        let mut data = Vec::with_capacity(rows * cols);
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
            if !v.is_finite() {
                return Err(Error::Corrupt {
                    offset: start + (i as u64) * 4,
                    msg: format!("non-finite {context} value"),
                });
            }
            data.push(v);
        }
        Ok(TensorBase::from_vec(rows, cols, data))
    }
}

/// Load one split's samples. Loaded samples carry no concept labels.
pub fn load_features(path: &Path) -> Result<(usize, Vec<PairedSample>)> {
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic, offset: 0 });
    }
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(Error::BadVersion { found: version, offset: 4 });
    }
    let dim = r.read_u32("dimension")? as usize;
    if dim == 0 {
        return Err(Error::Corrupt { offset: 8, msg: "zero feature dimension".into() });
    }
    let count = r.read_u64("record count")?;

    let mut samples = Vec::new();
    for rec in 0..count {
        let ctx = format!("record {rec}");
        let pair_id = r.read_u64(&ctx)?;
        let header_offset = r.offset;
        let n_v = r.read_u32(&ctx)? as usize;
        let n_t = r.read_u32(&ctx)? as usize;
        if n_v == 0 || n_t == 0 {
            return Err(Error::Corrupt {
                offset: header_offset,
                msg: format!("record {rec} has empty token matrix ({n_v}x{n_t})"),
            });
        }
        if n_v > crate::synth::MAX_VIDEO_LEN || n_t > crate::synth::MAX_TEXT_LEN {
            return Err(Error::Corrupt {
                offset: header_offset,
                msg: format!("record {rec} exceeds length caps ({n_v}, {n_t})"),
            });
        }
        let video = r.read_f32_matrix(n_v, dim, "video")?;
        let text = r.read_f32_matrix(n_t, dim, "text")?;
        samples.push(PairedSample { pair_id, video, text, concepts: None });
    }

    // Anything after the declared records is corruption, not padding.
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::Corrupt { offset: r.offset, msg: "trailing bytes after final record".into() });
    }
    Ok((dim, samples))
}

/// Manifest file name used by `write_corpus`.
pub const MANIFEST_NAME: &str = "manifest.txt";

/// Write a corpus as one `UPRF` file per split plus a manifest of
/// tab-separated `split<TAB>file` lines.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (split, samples) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        let file = format!("{split}.uprf");
        write_features(&dir.join(&file), corpus.dim, samples)?;
        manifest.push_str(&format!("{split}\t{file}\n"));
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Load a corpus through its manifest. Paths resolve relative to the
/// manifest's directory; all splits must agree on the dimension.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let content = std::fs::read_to_string(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut train = None;
    let mut val = None;
    let mut test = None;
    let mut dim: Option<usize> = None;

    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((split, file)) = line.split_once('\t') else {
            return Err(Error::Manifest { msg: format!("line {}: expected `split<TAB>path`", lineno + 1) });
        };
        let (d, samples) = load_features(&base.join(file))?;
        match dim {
            None => dim = Some(d),
            Some(existing) if existing != d => {
                return Err(Error::Manifest {
                    msg: format!("split `{split}` has dim {d}, expected {existing}"),
                })
            }
            _ => {}
        }
        let slot = match split {
            "train" => &mut train,
            "val" => &mut val,
            "test" => &mut test,
            other => return Err(Error::Manifest { msg: format!("unknown split `{other}`") }),
        };
        if slot.replace(samples).is_some() {
            return Err(Error::Manifest { msg: format!("duplicate split `{split}`") });
        }
    }

    let dim = dim.ok_or_else(|| Error::Manifest { msg: "manifest lists no splits".into() })?;
    Ok(Corpus {
        dim,
        train: train.unwrap_or_default(),
        val: val.unwrap_or_default(),
        test: test.unwrap_or_default(),
    })
}

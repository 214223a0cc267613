//! Binary checkpoint: config text plus every weight tensor, little-endian.
//!
//! ```text
//! "GCONVCK1"  version:u32  config_len:u32  config_text  tensor_count:u32
//! per tensor, sorted by name:
//!   name_len:u32  name  rank:u32  extent:u64 × rank  f64 × Π extents
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GCONVCK1";
pub const VERSION: u32 = 1;
pub const DEFAULT_MAX_DECLARED_BYTES: u64 = 4 << 30;

/// Bytes taken by the header for a given config text.
pub fn header_len(config_text: &str) -> u64 {
    8 + 4 + 4 + config_text.len() as u64 + 4
}

/// Bytes taken by one tensor record.
pub fn record_len(name: &str, shape: &[usize]) -> u64 {
    let elements: usize = shape.iter().product();
    4 + name.len() as u64 + 4 + 8 * shape.len() as u64 + 8 * elements as u64
}

fn check_consistent(config: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    let expected: BTreeMap<String, Vec<usize>> = config.parameter_shapes().into_iter().collect();
    let actual = weights.named_tensors();
    if actual.len() != expected.len() {
        return Err(Error::Consistency {
            tensor: "*".into(),
            msg: format!("weights hold {} tensors, config expects {}", actual.len(), expected.len()),
        });
    }
    for (name, t) in actual {
        match expected.get(&name) {
            Some(s) if s.as_slice() == t.shape() => {}
            Some(s) => {
                return Err(Error::Consistency {
                    tensor: name,
                    msg: format!("shape {:?}, config expects {s:?}", t.shape()),
                });
            }
            None => return Err(Error::Consistency { tensor: name, msg: "not described by the config".into() }),
        }
    }
    Ok(())
}

/// Serializes to any writer; returns the byte count.
pub fn write_to<W: Write>(config: &ModelConfig, weights: &ModelWeights, out: &mut W) -> Result<u64> {
    check_consistent(config, weights)?;
    let io_err = |source| Error::Storage { path: "<stream>".into(), source };
    write_unchecked(config, weights, out).map_err(io_err)
}

fn write_unchecked<W: Write>(config: &ModelConfig, weights: &ModelWeights, out: &mut W) -> io::Result<u64> {
    let text = config.to_text();
    let mut tensors = weights.named_tensors();
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(text.len() as u32).to_le_bytes())?;
    out.write_all(text.as_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    let mut n = header_len(&text);
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        n += record_len(&name, t.shape());
    }
    out.flush()?;
    Ok(n)
}

pub fn to_bytes(config: &ModelConfig, weights: &ModelWeights) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_to(config, weights, &mut buf)?;
    Ok(buf)
}

/// Writes a checkpoint file; returns the byte count.
pub fn save(config: &ModelConfig, weights: &ModelWeights, path: &Path) -> Result<u64> {
    check_consistent(config, weights)?;
    let storage = |source| Error::Storage { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(storage)?;
    let mut w = BufWriter::new(file);
    write_unchecked(config, weights, &mut w).map_err(storage)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Largest byte length any single length field may declare.
    pub max_declared_bytes: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { max_declared_bytes: DEFAULT_MAX_DECLARED_BYTES }
    }
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::Corruption {
                        offset: start + got as u64,
                        msg: format!("file ends inside {what} ({} of {} bytes present)", got, buf.len()),
                    });
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(Error::Corruption {
                        offset: start + got as u64,
                        msg: format!("read error in {what}: {e}"),
                    });
                }
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0; 4];
        self.bytes(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0; 8];
        self.bytes(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Reads `len` bytes in bounded chunks so a lying length on a short
    /// file fails before the full buffer is allocated.
    fn vec(&mut self, len: u64, what: &str) -> Result<Vec<u8>> {
        const CHUNK: usize = 1 << 20;
        let mut out = Vec::with_capacity((len as usize).min(CHUNK));
        let mut remaining = len as usize;
        while remaining > 0 {
            let take = remaining.min(CHUNK);
            let at = out.len();
            out.resize(at + take, 0);
            self.bytes(&mut out[at..], what)?;
            remaining -= take;
        }
        Ok(out)
    }
}

fn declared(len: u64, what: &str, opts: &LoadOptions, offset: u64) -> Result<u64> {
    if len > opts.max_declared_bytes {
        return Err(Error::Format(format!(
            "{what} at byte {offset} declares {len} bytes, above the {} byte cap",
            opts.max_declared_bytes
        )));
    }
    Ok(len)
}

pub fn read_from<R: Read>(source: R, opts: &LoadOptions) -> Result<(ModelConfig, ModelWeights)> {
    let mut r = Cursor { inner: source, offset: 0 };
    let mut magic = [0; 8];
    r.bytes(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}, expected \"GCONVCK1\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let at = r.offset;
    let config_len = declared(r.u32("config length")? as u64, "config text", opts, at)?;
    let text = String::from_utf8(r.vec(config_len, "config text")?)
        .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    let config = ModelConfig::from_text(&text).map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    let count = r.u32("tensor count")?;

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let at = r.offset;
        let name_len = declared(r.u32("name length")? as u64, "tensor name", opts, at)?;
        let name = String::from_utf8(r.vec(name_len, "tensor name")?)
            .map_err(|_| Error::Format(format!("tensor name at byte {at} is not UTF-8")))?;
        let rank = r.u32("rank")? as usize;
        if !(1..=3).contains(&rank) {
            return Err(Error::Format(format!("tensor `{name}` has rank {rank}, expected 1 to 3")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")?);
        }
        let at = r.offset;
        let bytes = shape
            .iter()
            .try_fold(8u64, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` extents {shape:?} overflow")))?;
        declared(bytes, &format!("tensor `{name}`"), opts, at)?;
        let raw = r.vec(bytes, &format!("tensor `{name}` data"))?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let shape: Vec<usize> = shape.into_iter().map(|e| e as usize).collect();
        let t =
            Tensor::new(shape, data).map_err(|e| Error::Consistency { tensor: name.clone(), msg: e.to_string() })?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Consistency { tensor: name, msg: "stored twice".into() });
        }
    }
    let mut probe = [0u8; 1];
    let end = r.offset;
    if r.inner.read(&mut probe).map_err(|e| Error::Corruption { offset: end, msg: e.to_string() })? != 0 {
        return Err(Error::Corruption { offset: end, msg: "trailing bytes after the last tensor".into() });
    }
    let weights = ModelWeights::from_named(&config, tensors)?;
    Ok((config, weights))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    read_from(bytes, &LoadOptions::default())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    load_with(path, &LoadOptions::default())
}

pub fn load_with(path: &Path, opts: &LoadOptions) -> Result<(ModelConfig, ModelWeights)> {
    let file = File::open(path).map_err(|source| Error::Storage { path: path.to_path_buf(), source })?;
    read_from(BufReader::new(file), opts)
}

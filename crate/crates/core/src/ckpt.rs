//! Bit-exact checkpoint persistence, weight averaging, and top-k
//! retention.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic "W2VJ" | version u32 | step u64 | has_metric u8 | dev_metric f64
//! | n_entries u64 | entries... | crc32 u32
//! entry: name_len u32 | name utf-8 | dtype u8 | rank u32 | dims u64*rank
//!        | payload (LE scalars)
//! ```
//!
//! Entries are written in lexicographic name order; the trailing CRC32
//! covers every preceding byte. `load(save(x))` is bit-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"W2VJ";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub dev_metric: Option<f64>,
}

fn ck_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), msg.into()))
}

pub fn save<S: Scalar>(path: &Path, params: &ParameterSet<S>, meta: &CheckpointMeta) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&meta.step.to_le_bytes());
    buf.push(u8::from(meta.dev_metric.is_some()));
    buf.extend_from_slice(&meta.dev_metric.unwrap_or(0.0).to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(S::DTYPE.code());
        buf.extend_from_slice(&(tensor.dims().len() as u32).to_le_bytes());
        for &d in tensor.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match S::DTYPE {
            DType::F32 => {
                for &v in tensor.data() {
                    buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in tensor.data() {
                    buf.extend_from_slice(&v.to_f64().to_le_bytes());
                }
            }
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&buf);
    buf.extend_from_slice(&hasher.finalize().to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ck_err(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load<S: Scalar>(path: &Path) -> Result<(ParameterSet<S>, CheckpointMeta)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < MAGIC.len() + 4 + 4 {
        return Err(ck_err(path, "file too short"));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    if hasher.finalize() != stored_crc {
        return Err(ck_err(path, "checksum mismatch (corrupt or truncated file)"));
    }

    let mut r = Reader {
        buf: body,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(ck_err(path, "bad magic (not a checkpoint file)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }
    let step = r.u64()?;
    let has_metric = r.u8()? != 0;
    let metric = r.f64()?;
    let n_entries = r.u64()?;

    let mut params = ParameterSet::new();
    let mut prev_name = String::new();
    for _ in 0..n_entries {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ck_err(path, "entry name is not UTF-8"))?
            .to_string();
        if name <= prev_name && !prev_name.is_empty() {
            return Err(ck_err(path, "entries not in lexicographic order"));
        }
        let dtype = DType::from_code(r.u8()?)
            .ok_or_else(|| ck_err(path, format!("unknown dtype in entry `{name}`")))?;
        if dtype != S::DTYPE {
            return Err(ck_err(
                path,
                format!("dtype mismatch for `{name}`: file holds {dtype:?}, expected {:?}", S::DTYPE),
            ));
        }
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let count: usize = dims.iter().product();
        let data: Vec<S> = match dtype {
            DType::F32 => r
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| S::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| S::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        params.insert(&name, Tensor::param(&dims, data))?;
        prev_name = name;
    }
    if r.pos != body.len() {
        return Err(ck_err(path, "trailing bytes after entries"));
    }
    Ok((
        params,
        CheckpointMeta {
            step,
            dev_metric: has_metric.then_some(metric),
        },
    ))
}

/// Element-wise mean of several checkpoints, accumulated in f64 so the
/// result is independent of file order to machine precision.
pub fn average<S: Scalar>(paths: &[PathBuf]) -> Result<ParameterSet<S>> {
    if paths.is_empty() {
        return Err(Error::Checkpoint("average over zero checkpoints".into()));
    }
    let (first, _) = load::<S>(&paths[0])?;
    let names = first.names();
    let mut sums: Vec<(String, Vec<usize>, Vec<f64>)> = names
        .iter()
        .map(|n| {
            let t = first.get(n).unwrap();
            (
                n.clone(),
                t.dims().to_vec(),
                t.data().iter().map(|v| v.to_f64()).collect(),
            )
        })
        .collect();

    for path in &paths[1..] {
        let (ps, _) = load::<S>(path)?;
        if ps.names() != names {
            let theirs = ps.names();
            let offending = names
                .iter()
                .find(|n| !theirs.contains(n))
                .cloned()
                .or_else(|| theirs.iter().find(|n| !names.contains(n)).cloned())
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!(
                "{}: parameter set mismatch (first differing name `{offending}`)",
                path.display()
            )));
        }
        for (name, dims, acc) in sums.iter_mut() {
            let t = ps.get(name)?;
            if t.dims() != &dims[..] {
                return Err(Error::Checkpoint(format!(
                    "{}: shape mismatch for `{name}`",
                    path.display()
                )));
            }
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v.to_f64();
            }
        }
    }

    let n = paths.len() as f64;
    let mut out = ParameterSet::new();
    for (name, dims, acc) in sums {
        let data: Vec<S> = acc.iter().map(|&v| S::from_f64(v / n)).collect();
        out.insert(&name, Tensor::param(&dims, data))?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Top-k retention store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoreEntry {
    pub path: String,
    pub step: u64,
    pub dev_metric: f64,
}

#[derive(Debug, Serialize, Deserialize, Default)]
struct StoreIndex {
    entries: Vec<StoreEntry>,
}

struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Directory of the k best (lowest dev metric) checkpoints seen so far.
/// One writer at a time per directory, enforced with a lock file; ties on
/// the metric keep the earlier step.
pub struct CheckpointStore {
    dir: PathBuf,
    k: usize,
    entries: Vec<StoreEntry>,
    _lock: LockGuard,
}

impl CheckpointStore {
    pub fn open(dir: &Path, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Checkpoint("store must keep at least one checkpoint".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock_path = dir.join("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Checkpoint(format!(
                    "{}: store is locked by another writer (stale `lock` file?)",
                    dir.display()
                )));
            }
            Err(e) => return Err(Error::io(&lock_path, e)),
        }
        let lock = LockGuard { path: lock_path };
        let index_path = dir.join("top_k.json");
        let entries = if index_path.exists() {
            let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
            let idx: StoreIndex = serde_json::from_str(&text)
                .map_err(|e| ck_err(&index_path, format!("bad index: {e}")))?;
            idx.entries
        } else {
            Vec::new()
        };
        Ok(CheckpointStore {
            dir: dir.to_path_buf(),
            k,
            entries,
            _lock: lock,
        })
    }

    fn write_index(&self) -> Result<()> {
        let index_path = self.dir.join("top_k.json");
        let text = serde_json::to_string_pretty(&StoreIndex {
            entries: self.entries.clone(),
        })
        .expect("index serialization cannot fail");
        fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))
    }

    /// Offer a candidate; returns true when it was retained.
    pub fn add<S: Scalar>(
        &mut self,
        params: &ParameterSet<S>,
        step: u64,
        dev_metric: f64,
    ) -> Result<bool> {
        if !dev_metric.is_finite() {
            return Err(Error::Checkpoint(format!(
                "candidate at step {step} has a non-finite dev metric"
            )));
        }
        let file = format!("ckpt_step{step}.bin");
        let path = self.dir.join(&file);
        save(
            &path,
            params,
            &CheckpointMeta {
                step,
                dev_metric: Some(dev_metric),
            },
        )?;
        self.entries.push(StoreEntry {
            path: file,
            step,
            dev_metric,
        });
        self.entries.sort_by(|a, b| {
            a.dev_metric
                .partial_cmp(&b.dev_metric)
                .unwrap()
                .then(a.step.cmp(&b.step))
        });
        let mut retained = true;
        while self.entries.len() > self.k {
            let evicted = self.entries.pop().unwrap();
            let ep = self.dir.join(&evicted.path);
            let _ = fs::remove_file(&ep);
            if evicted.step == step {
                retained = false;
            }
        }
        self.write_index()?;
        Ok(retained)
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    /// Absolute paths of retained checkpoints, best metric first.
    pub fn paths(&self) -> Vec<PathBuf> {
        self.entries.iter().map(|e| self.dir.join(&e.path)).collect()
    }
}

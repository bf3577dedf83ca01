//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "NODK" | u32 version | u32 meta_len | meta (UTF-8 key=value lines)
//! u32 count | count x { u32 name_len | name | u32 rank | rank x u64 dim | f64 data }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{Model, StudentNet, StudentSpec, TeacherNet, TeacherSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::models::Classifier;

pub const MAGIC: &[u8; 4] = b"NODK";
pub const VERSION: u32 = 1;

/// Key of the model kind tag in the metadata block.
pub const KIND_KEY: &str = "kind";

pub fn encode(model: &Model, extra: &[(String, String)]) -> Vec<u8> {
    let mut meta = BTreeMap::new();
    meta.insert(KIND_KEY.to_string(), model.kind().to_string());
    for (k, v) in model.arch_meta().into_iter().chain(extra.iter().cloned()) {
        meta.insert(k, v);
    }
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointCorrupt(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. The architecture is rebuilt from the metadata and
/// every record must match its shape table.
pub fn decode(buf: &[u8]) -> Result<(Model, BTreeMap<String, String>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CheckpointCorrupt("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let text = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| Error::CheckpointCorrupt("metadata is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CheckpointCorrupt(format!("bad metadata line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let kind = meta
        .get(KIND_KEY)
        .ok_or_else(|| Error::CheckpointCorrupt("missing kind tag".into()))?;
    let mut model = match kind.as_str() {
        "teacher" => Model::Teacher(TeacherNet::build(TeacherSpec::from_meta(&meta)?)?),
        "student" => Model::Student(StudentNet::build(StudentSpec::from_meta(&meta)?)?),
        other => return Err(Error::CheckpointCorrupt(format!("unknown kind {other:?}"))),
    };

    let count = r.u32("record count")? as usize;
    let expected = model.params().len();
    if count != expected {
        return Err(Error::CheckpointCorrupt(format!(
            "{count} parameter records, architecture has {expected}"
        )));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::CheckpointCorrupt("parameter name is not UTF-8".into()))?;
        let want = model.params().get(i);
        if name != want.name {
            return Err(Error::CheckpointCorrupt(format!(
                "record {i} is {name:?}, expected {:?}",
                want.name
            )));
        }
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::CheckpointCorrupt(format!("rank {rank} of {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        if shape != want.value.shape() {
            return Err(Error::CheckpointShape {
                name: name.to_string(),
                found: shape,
                expected: want.value.shape().to_vec(),
            });
        }
        let n = want.value.numel();
        let raw = r.take(n * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(Tensor::from_vec(&shape, data));
    }
    if r.pos != buf.len() {
        return Err(Error::CheckpointCorrupt(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    model.params_mut().set_values(values);
    Ok((model, meta))
}

pub fn save_checkpoint(model: &Model, extra: &[(String, String)], path: &Path) -> Result<()> {
    write_atomic(path, &encode(model, extra))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    decode(&std::fs::read(path)?)
}

pub fn load_teacher(path: &Path) -> Result<(TeacherNet, BTreeMap<String, String>)> {
    match load_checkpoint(path)? {
        (Model::Teacher(t), meta) => Ok((t, meta)),
        (m, _) => Err(Error::CheckpointKind {
            found: m.kind().into(),
            expected: "teacher".into(),
        }),
    }
}

pub fn load_student(path: &Path) -> Result<(StudentNet, BTreeMap<String, String>)> {
    match load_checkpoint(path)? {
        (Model::Student(s), meta) => Ok((s, meta)),
        (m, _) => Err(Error::CheckpointKind {
            found: m.kind().into(),
            expected: "student".into(),
        }),
    }
}

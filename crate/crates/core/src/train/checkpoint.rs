//! Binary checkpoint format.
//!
//! ```text
//! "DITCKPT1"  u32 version  u64 step  u64 rng_key  u64 rng_counter
//! str config                      (TrainConfig text form)
//! table model  table codec
//! u64 adam_step  table adam_m  table adam_v
//! ```
//! `str` is a u64 byte length then UTF-8; a `table` is a u32 count of
//! `str name, u32 rank, u64 dims[rank], f64 values[prod dims]`. All
//! integers and floats are little-endian. Trailing bytes are an error.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result, ResultExt};
use crate::model::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DITCKPT1";
pub const FORMAT_VERSION: u32 = 1;

pub type Table = Vec<(String, Tensor)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng_state: (u64, u64),
    pub config: String,
    pub model: Table,
    pub codec: Table,
    pub adam_step: u64,
    pub adam_m: Table,
    pub adam_v: Table,
}

pub fn table_of(params: &ParamSet) -> Table {
    params
        .iter()
        .map(|(n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")))
        .collect()
}

/// Moment buffers named and shaped like `params`.
pub fn moment_table(params: &ParamSet, moments: &[Vec<f64>]) -> Result<Table> {
    params
        .iter()
        .zip(moments)
        .map(|((n, t), m)| Ok((n.to_string(), Tensor::new(t.shape(), m.clone())?)))
        .collect()
}

pub fn param_set(table: &Table) -> ParamSet {
    let mut ps = ParamSet::new();
    for (n, t) in table {
        ps.add(n.clone(), t.clone());
    }
    ps
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&self.rng_state.0.to_le_bytes());
        w.extend_from_slice(&self.rng_state.1.to_le_bytes());
        put_str(&mut w, &self.config);
        put_table(&mut w, &self.model);
        put_table(&mut w, &self.codec);
        w.extend_from_slice(&self.adam_step.to_le_bytes());
        put_table(&mut w, &self.adam_m);
        put_table(&mut w, &self.adam_v);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::parse(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let step = r.u64("step")?;
        let rng_state = (r.u64("rng key")?, r.u64("rng counter")?);
        let config = r.str("config")?;
        let model = r.table("model")?;
        let codec = r.table("codec")?;
        let adam_step = r.u64("optimizer step")?;
        let adam_m = r.table("adam_m")?;
        let adam_v = r.table("adam_v")?;
        if r.pos != bytes.len() {
            return Err(Error::parse(r.pos, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            step,
            rng_state,
            config,
            model,
            codec,
            adam_step,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes).context(|| format!("checkpoint {}", path.display()))
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u64).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_table(w: &mut Vec<u8>, table: &Table) {
    w.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, t) in table {
        put_str(w, name);
        w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            w.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            w.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if n > rest {
            return Err(Error::parse(
                self.bytes.len(),
                format!("truncated reading {what}: need {n} bytes, {rest} left"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| Error::parse(at, format!("{what} length {n} overflows")))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::parse(at, format!("{what} is not UTF-8")))
    }

    fn table(&mut self, what: &str) -> Result<Table> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = self.str(what)?;
            let rank = self.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            let mut numel: usize = 1;
            for _ in 0..rank {
                let at = self.pos;
                let d = self.len(&name)?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::parse(at, format!("shape of '{name}' overflows")))?;
                shape.push(d);
            }
            let bytes = numel
                .checked_mul(8)
                .ok_or_else(|| Error::parse(self.pos, format!("shape of '{name}' overflows")))?;
            let raw = self.take(bytes, &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push((name, Tensor::new(&shape, data)?));
        }
        Ok(out)
    }
}

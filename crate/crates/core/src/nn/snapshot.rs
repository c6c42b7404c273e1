//! Binary parameter snapshots.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "ESMMSNAP" version
//! method-tag role-tag            (length-prefixed UTF-8)
//! field_count vocab[field_count] embedding_dim
//! n_tables n_towers
//! per tower: table_index n_dims dims[n_dims]
//! lr beta1 beta2 eps             (f64)
//! parameters in ParamStore flat order (f64)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adam::AdamConfig;
use super::embedding::EmbeddingTable;
use super::mlp::MlpTower;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::feature::FieldSchema;

const MAGIC: &[u8; 8] = b"ESMMSNAP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotTag {
    pub method: String,
    pub role: String,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn write_snapshot(w: &mut impl Write, store: &ParamStore, tag: &SnapshotTag) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_str(w, &tag.method)?;
    put_str(w, &tag.role)?;
    let schema = store.schema();
    put_u32(w, schema.field_count() as u32)?;
    for &v in schema.vocab_sizes() {
        put_u32(w, v as u32)?;
    }
    put_u32(w, schema.embedding_dim() as u32)?;
    put_u32(w, store.tables().len() as u32)?;
    put_u32(w, store.towers().len() as u32)?;
    for (k, tower) in store.towers().iter().enumerate() {
        put_u32(w, store.tower_table_index(k) as u32)?;
        let dims = tower.dims();
        put_u32(w, dims.len() as u32)?;
        for d in dims {
            put_u32(w, d as u32)?;
        }
    }
    let c = store.adam().config;
    for x in [c.lr, c.beta1, c.beta2, c.eps] {
        w.write_all(&x.to_le_bytes())?;
    }
    for x in store.flat_params() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Config(format!("truncated snapshot: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Config(format!("truncated snapshot: {e}")))?;
        String::from_utf8(buf).map_err(|_| Error::Config("snapshot tag is not UTF-8".into()))
    }
}

pub fn read_snapshot(r: impl Read) -> Result<(ParamStore, SnapshotTag)> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Config("not a parameter snapshot".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Config(format!("unsupported snapshot version {version}")));
    }
    let tag = SnapshotTag {
        method: r.string()?,
        role: r.string()?,
    };
    let fields = r.u32()?;
    let vocab = (0..fields).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let dim = r.u32()?;
    let schema = FieldSchema::new(vocab, dim)?;
    let n_tables = r.u32()?;
    let n_towers = r.u32()?;
    let mut tower_table = Vec::with_capacity(n_towers);
    let mut towers = Vec::with_capacity(n_towers);
    for _ in 0..n_towers {
        tower_table.push(r.u32()?);
        let n_dims = r.u32()?;
        let dims = (0..n_dims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        towers.push(MlpTower::zeros(&dims)?);
    }
    let adam = AdamConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let tables = (0..n_tables).map(|_| EmbeddingTable::zeros(&schema)).collect();
    let mut store = ParamStore::from_parts(schema, tables, towers, tower_table, adam)?;
    let values = (0..store.num_params()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    store.set_flat_params(&values)?;
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| Error::Config(e.to_string()))? != 0 {
        return Err(Error::Config("trailing bytes after snapshot".into()));
    }
    Ok((store, tag))
}

pub fn save_snapshot(path: &Path, store: &ParamStore, tag: &SnapshotTag) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_snapshot(&mut w, store, tag)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: &Path) -> Result<(ParamStore, SnapshotTag)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(BufReader::new(f))
}

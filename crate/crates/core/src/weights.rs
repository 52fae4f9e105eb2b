//! Flat binary persistence for parameters and weight snapshots.
//!
//! Weights file, all integers little-endian:
//!
//! ```text
//! b"PRISMW01"
//! u32 n_tensors
//! n_tensors × { u32 name_len, name (UTF-8), u32 ndim, ndim × u64 dim }
//! payload: every tensor's values as f64 LE, in header order
//! ```
//!
//! Snapshot file:
//!
//! ```text
//! b"PRISMS01"
//! u32 count, u64 n_values
//! count × { u64 step, n_values × f64 LE }
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensorops::Tensor;
use crate::trainer::Snapshots;

const WEIGHTS_MAGIC: &[u8; 8] = b"PRISMW01";
const SNAPSHOT_MAGIC: &[u8; 8] = b"PRISMS01";

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(w: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.bad("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.bad("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn magic(&mut self, want: &[u8; 8]) -> Result<()> {
        if self.take(8)? != want {
            return Err(self.bad("bad magic"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.bad("trailing bytes"));
        }
        Ok(())
    }

    fn bad(&self, msg: &str) -> Error {
        Error::io(self.path, std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{msg} at byte {}", self.pos)))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open(path)?.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    put_u32(&mut out, tensors.len() as u32);
    for nt in tensors {
        put_u32(&mut out, nt.name.len() as u32);
        out.extend_from_slice(nt.name.as_bytes());
        put_u32(&mut out, nt.tensor.shape.len() as u32);
        for &d in &nt.tensor.shape {
            put_u64(&mut out, d as u64);
        }
    }
    for nt in tensors {
        put_f64s(&mut out, &nt.tensor.data);
    }
    write_all(path, &out)
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let buf = read_all(path)?;
    let mut c = Cursor { path, buf: &buf, pos: 0 };
    c.magic(WEIGHTS_MAGIC)?;
    let n = c.u32()? as usize;
    let mut header = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| c.bad("tensor name is not UTF-8"))?
            .to_string();
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        header.push((name, shape));
    }
    let mut out = Vec::with_capacity(header.len());
    for (name, shape) in header {
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| c.bad("shape overflow"))?;
        let data = c.f64s(count)?;
        out.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    c.finish()?;
    Ok(out)
}

pub fn write_params(path: &Path, params: &ParamSet) -> Result<()> {
    let named: Vec<NamedTensor> = params
        .names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| NamedTensor { name, tensor: t.clone() })
        .collect();
    write_tensors(path, &named)
}

/// Reads a weights file into the layout of `template`; names and shapes must
/// match exactly.
pub fn read_params(path: &Path, template: &ParamSet) -> Result<ParamSet> {
    let stored = read_tensors(path)?;
    let names = template.names();
    let ok = stored.len() == names.len()
        && stored
            .iter()
            .zip(names.iter().zip(template.tensors()))
            .all(|(s, (n, t))| &s.name == n && s.tensor.shape == t.shape);
    if !ok {
        return Err(Error::config(format!(
            "{} does not match the model's parameter layout",
            path.display()
        )));
    }
    let flat: Vec<f64> = stored.into_iter().flat_map(|s| s.tensor.data).collect();
    template.with_values(&flat)
}

pub fn write_snapshots(path: &Path, snaps: &Snapshots) -> Result<()> {
    let n_values = snaps.steps.values().next().map_or(0, Vec::len);
    if snaps.steps.values().any(|v| v.len() != n_values) {
        return Err(Error::contract("snapshots differ in length"));
    }
    let mut out = Vec::with_capacity(20 + snaps.steps.len() * (8 + 8 * n_values));
    out.extend_from_slice(SNAPSHOT_MAGIC);
    put_u32(&mut out, snaps.steps.len() as u32);
    put_u64(&mut out, n_values as u64);
    for (&step, values) in &snaps.steps {
        put_u64(&mut out, step as u64);
        put_f64s(&mut out, values);
    }
    write_all(path, &out)
}

pub fn read_snapshots(path: &Path) -> Result<Snapshots> {
    let buf = read_all(path)?;
    let mut c = Cursor { path, buf: &buf, pos: 0 };
    c.magic(SNAPSHOT_MAGIC)?;
    let count = c.u32()? as usize;
    let n_values = c.u64()? as usize;
    let mut steps = BTreeMap::new();
    for _ in 0..count {
        let step = c.u64()? as usize;
        steps.insert(step, c.f64s(n_values)?);
    }
    c.finish()?;
    Ok(Snapshots { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            seq_len: 4,
            vocab_size: 11,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn params_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut p = init_params(&tiny()).unwrap();
        p.lnf_b.data[0] = f64::NAN;
        p.lnf_b.data[1] = -0.0;
        write_params(&path, &p).unwrap();
        let q = read_params(&path, &init_params(&tiny()).unwrap()).unwrap();
        let bits = |s: &ParamSet| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }

    #[test]
    fn layout_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        write_params(&path, &init_params(&tiny()).unwrap()).unwrap();
        let other = init_params(&ModelConfig { d_ff: 32, ..tiny() }).unwrap();
        assert!(matches!(read_params(&path, &other), Err(Error::Config(_))));
    }

    #[test]
    fn truncated_and_corrupt_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        write_params(&path, &init_params(&tiny()).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Io { .. })));
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let t = NamedTensor {
            name: "ab".into(),
            tensor: Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(),
        };
        write_tensors(&path, &[t]).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert_eq!(&b[..8], b"PRISMW01");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..18], b"ab");
        assert_eq!(&b[18..22], &1u32.to_le_bytes());
        assert_eq!(&b[22..30], &2u64.to_le_bytes());
        assert_eq!(&b[30..38], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 46);
    }

    #[test]
    fn snapshots_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let mut s = Snapshots::default();
        s.steps.insert(0, vec![1.0, 2.0]);
        s.steps.insert(50, vec![3.0, f64::INFINITY]);
        write_snapshots(&path, &s).unwrap();
        assert_eq!(read_snapshots(&path).unwrap(), s);
        s.steps.insert(100, vec![1.0]);
        assert!(write_snapshots(&path, &s).is_err());
    }
}

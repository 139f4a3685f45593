//! Checkpoint serialization for parameter sets.
//!
//! Layout, all integers little-endian:
//! `magic "CKPT" | u32 version | u32 record count`, then per record
//! `u32 name length | name (UTF-8) | u32 rank | u32 dims... | f64 values...`.
//! Values are stored as 64-bit floats, so the round trip is bit-exact for
//! f64 parameters and lossless for f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::params::ParamSet;

const MAGIC: [u8; 4] = *b"CKPT";
const VERSION: u32 = 1;

pub fn save<T: Real>(path: &Path, params: &ParamSet<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &p.data {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::invalid(format!("{}: not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::invalid(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::invalid("checkpoint record name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        records.push(Record { name, shape, values });
    }
    Ok(records)
}

/// Loads a checkpoint into an existing parameter set. Every record must match
/// a registered parameter by name and shape, and vice versa.
pub fn load_into<T: Real>(path: &Path, params: &mut ParamSet<T>) -> Result<()> {
    let records = load(path)?;
    if records.len() != params.len() {
        return Err(Error::invalid(format!(
            "{}: checkpoint has {} records, model has {} parameters",
            path.display(),
            records.len(),
            params.len()
        )));
    }
    for rec in records {
        let idx = params.index_of(&rec.name).ok_or_else(|| {
            Error::invalid(format!("checkpoint record {:?} has no matching parameter", rec.name))
        })?;
        let p = params.get_mut(idx);
        if p.shape != rec.shape {
            return Err(Error::invalid(format!(
                "parameter {:?}: checkpoint shape {:?} != model shape {:?}",
                rec.name, rec.shape, p.shape
            )));
        }
        for (dst, src) in p.data.iter_mut().zip(&rec.values) {
            *dst = T::c(*src);
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::new(42);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let data_a: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
        let data_b: Vec<f64> = (0..7).map(|_| rng.uniform_in(-1e6, 1e6)).collect();
        ps.add("backbone.0.weight", &[2, 3, 2, 2], data_a.clone()).unwrap();
        ps.add("head.bias", &[7], data_b.clone()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &ps).unwrap();

        let mut restored: ParamSet<f64> = ParamSet::new();
        restored.add("backbone.0.weight", &[2, 3, 2, 2], vec![0.0; 24]).unwrap();
        restored.add("head.bias", &[7], vec![0.0; 7]).unwrap();
        load_into(&path, &mut restored).unwrap();

        for (orig, back) in data_a.iter().zip(&restored.get(0).data) {
            assert_eq!(orig.to_bits(), back.to_bits());
        }
        for (orig, back) in data_b.iter().zip(&restored.get(1).data) {
            assert_eq!(orig.to_bits(), back.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_magic_and_mismatched_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"none of this is a checkpoint").unwrap();
        assert!(load(&bad).is_err());

        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("w", &[2], vec![1.0, 2.0]).unwrap();
        let path = dir.path().join("ok.ckpt");
        save(&path, &ps).unwrap();

        let mut wrong_shape: ParamSet<f64> = ParamSet::new();
        wrong_shape.add("w", &[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(load_into(&path, &mut wrong_shape).is_err());

        let mut wrong_name: ParamSet<f64> = ParamSet::new();
        wrong_name.add("v", &[2], vec![0.0, 0.0]).unwrap();
        assert!(load_into(&path, &mut wrong_name).is_err());
    }

    #[test]
    fn record_order_matches_registration_order() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("z_last_alphabetically_first_registered", &[1], vec![1.0]).unwrap();
        ps.add("a", &[1], vec![2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("order.ckpt");
        save(&path, &ps).unwrap();
        let recs = load(&path).unwrap();
        assert_eq!(recs[0].name, "z_last_alphabetically_first_registered");
        assert_eq!(recs[1].name, "a");
    }
}

//! Checkpoint container: a magic header, a JSON metadata blob, and named
//! `f64` matrices, all little-endian. Save followed by load is bitwise
//! lossless, which the resumability guarantees lean on.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;

use super::ModelError;

const MAGIC: &[u8; 8] = b"MAVLCKP1";
const VERSION: u32 = 1;

/// A checkpoint's contents: caller-defined metadata plus named arrays in a
/// stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: IndexMap<String, Array2<f64>>,
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<(), ModelError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&checkpoint.meta)
            .map_err(|e| ModelError::Checkpoint(format!("meta serialization: {e}")))?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(checkpoint.arrays.len() as u64).to_le_bytes())?;
        for (name, array) in &checkpoint.arrays {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(array.nrows() as u64).to_le_bytes())?;
            w.write_all(&(array.ncols() as u64).to_le_bytes())?;
            for v in array.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let corrupt = |detail: &str| ModelError::Checkpoint(format!("{}: {detail}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut r).map_err(|_| corrupt("truncated version"))?;
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }

    let meta_len = read_u64(&mut r).map_err(|_| corrupt("truncated meta length"))? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(|_| corrupt("truncated meta"))?;
    let meta: serde_json::Value =
        serde_json::from_slice(&meta_bytes).map_err(|_| corrupt("malformed meta json"))?;

    let count = read_u64(&mut r).map_err(|_| corrupt("truncated array count"))? as usize;
    let mut arrays = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r).map_err(|_| corrupt("truncated name length"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| corrupt("truncated name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| corrupt("name not utf-8"))?;
        let rows = read_u64(&mut r).map_err(|_| corrupt("truncated rows"))? as usize;
        let cols = read_u64(&mut r).map_err(|_| corrupt("truncated cols"))? as usize;
        let mut data = vec![0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| corrupt("truncated payload"))?;
            *v = f64::from_le_bytes(buf);
        }
        arrays.insert(
            name,
            Array2::from_shape_vec((rows, cols), data).map_err(|_| corrupt("bad shape"))?,
        );
    }
    Ok(Checkpoint { meta, arrays })
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Checkpoint {
        let mut arrays = IndexMap::new();
        arrays.insert("a.w".to_string(), array![[1.5, -2.25], [0.0, f64::MIN_POSITIVE]]);
        arrays.insert("b".to_string(), array![[3.0]]);
        Checkpoint { meta: serde_json::json!({"epoch": 3, "note": "x"}), arrays }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample();
        save(&path, &ckpt).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(ckpt, back);

        // byte-for-byte stable when saved again
        save(&dir.path().join("m2.ckpt"), &back).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(dir.path().join("m2.ckpt")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(ModelError::Checkpoint(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'M';
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(ModelError::Checkpoint(_))));
    }
}

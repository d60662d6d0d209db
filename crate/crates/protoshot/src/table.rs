//! Binary embedding-table format ("PSHT").
//!
//! Layout: magic `PSHT`, u32 version, u32 dim M, u64 entry count, then per
//! entry `(u16 id length, id bytes, M little-endian f32)`. The same format
//! stores raw feature-vector datasets referenced from manifests.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TABLE_MAGIC: &[u8; 4] = b"PSHT";
pub const TABLE_VERSION: u32 = 1;

pub fn write_table(path: &Path, dim: usize, entries: &[(String, Vec<f32>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(TABLE_MAGIC).map_err(io)?;
    w.write_all(&TABLE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(entries.len() as u64).to_le_bytes()).map_err(io)?;
    for (id, vec) in entries {
        if vec.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "table entry '{}' has dim {}, expected {}",
                id,
                vec.len(),
                dim
            )));
        }
        let id_bytes = id.as_bytes();
        if id_bytes.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("id too long: {id}")));
        }
        w.write_all(&(id_bytes.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(id_bytes).map_err(io)?;
        for v in vec {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<(usize, Vec<(String, Vec<f32>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    fn take<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)
            .map_err(|_| Error::format(path, "truncated file"))?;
        Ok(buf)
    }

    let magic: [u8; 4] = take(&mut r, path)?;
    if &magic != TABLE_MAGIC {
        return Err(Error::format(path, "bad magic (expected PSHT)"));
    }
    let version = u32::from_le_bytes(take(&mut r, path)?);
    if version != TABLE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(take(&mut r, path)?) as usize;
    let count = u64::from_le_bytes(take(&mut r, path)?) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = u16::from_le_bytes(take(&mut r, path)?) as usize;
        let mut id_buf = vec![0u8; id_len];
        r.read_exact(&mut id_buf)
            .map_err(|_| Error::format(path, "truncated id"))?;
        let id = String::from_utf8(id_buf)
            .map_err(|_| Error::format(path, "non-utf8 id"))?;
        let mut vec = Vec::with_capacity(dim);
        for _ in 0..dim {
            vec.push(f32::from_le_bytes(take(&mut r, path)?));
        }
        entries.push((id, vec));
    }
    Ok((dim, entries))
}

pub fn read_table_map(path: &Path) -> Result<(usize, HashMap<String, Vec<f32>>)> {
    let (dim, entries) = read_table(path)?;
    let mut map = HashMap::with_capacity(entries.len());
    for (id, vec) in entries {
        if map.insert(id.clone(), vec).is_some() {
            return Err(Error::DuplicateSourceId(id));
        }
    }
    Ok((dim, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pst");
        let entries = vec![
            ("a".to_string(), vec![1.0f32, -2.5, 0.0]),
            ("b/x".to_string(), vec![0.5, 0.25, 4.0]),
        ];
        write_table(&path, 3, &entries).unwrap();
        let (dim, back) = read_table(&path).unwrap();
        assert_eq!(dim, 3);
        assert_eq!(back, entries);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pst");
        write_table(&path, 2, &[("a".into(), vec![1.0, 2.0])]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_table(&path).is_err());
    }

    #[test]
    fn dim_disagreement_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pst");
        assert!(write_table(&path, 3, &[("a".into(), vec![1.0, 2.0])]).is_err());
    }
}

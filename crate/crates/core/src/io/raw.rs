//! Toolkit raw volume format: a 32-byte header (magic, version, 3x extent,
//! 3x spacing) followed by little-endian 32-bit floats, z fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::Volume;

const MAGIC: &[u8; 4] = b"RVOL";
const VERSION: u32 = 1;

pub fn save_raw(volume: &Volume, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let shape = volume.shape();
    let spacing = volume.spacing.unwrap_or([0.0; 3]);
    let mut header = Vec::with_capacity(32);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    for a in 0..3 {
        header.extend_from_slice(&(shape[a] as u32).to_le_bytes());
    }
    for a in 0..3 {
        header.extend_from_slice(&(spacing[a] as f32).to_le_bytes());
    }
    debug_assert_eq!(header.len(), 32);
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(volume.len() * 4);
    for &v in volume.data.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<Volume> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 32];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic (expected RVOL)"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut shape = [0usize; 3];
    for a in 0..3 {
        shape[a] = u32::from_le_bytes(header[8 + 4 * a..12 + 4 * a].try_into().unwrap()) as usize;
    }
    let mut spacing = [0.0f64; 3];
    for a in 0..3 {
        spacing[a] =
            f32::from_le_bytes(header[20 + 4 * a..24 + 4 * a].try_into().unwrap()) as f64;
    }
    let n = shape.iter().product::<usize>();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let data = Array3::from_shape_vec((shape[0], shape[1], shape[2]), values)
        .map_err(|e| Error::format(path, format!("shape mismatch: {e}")))?;
    Ok(Volume {
        data,
        spacing: if spacing.iter().all(|&s| s > 0.0) {
            Some(spacing)
        } else {
            None
        },
        normalized: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rvol");
        std::fs::write(&path, b"RVOL junk").unwrap();
        assert!(load_raw(&path).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rvol");
        std::fs::write(&path, vec![0u8; 64]).unwrap();
        let err = load_raw(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}

//! Minimal NIfTI-1 reader/writer: single-file little-endian `.nii` and
//! `.nii.gz`, common scalar datatypes, scl_slope/scl_inter applied on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::bufread::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::Volume;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: f32 = 352.0;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

fn is_gz(path: &Path) -> bool {
    path.extension().map(|e| e == "gz").unwrap_or(false)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        let mut dec = MultiGzDecoder::new(BufReader::new(file));
        dec.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    } else {
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

fn le_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}

fn le_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn load_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, "file shorter than NIfTI-1 header"));
    }
    let sizeof_hdr = le_i32(&bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::format(
            path,
            format!("unsupported header (sizeof_hdr {sizeof_hdr}; big-endian files are not supported)"),
        ));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::format(path, "bad NIfTI magic"));
    }
    if magic == b"ni1\0" {
        return Err(Error::format(path, "two-file NIfTI (.hdr/.img) is not supported"));
    }
    let ndim = le_i16(&bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("bad dim[0] = {ndim}")));
    }
    let mut dim = [1usize; 7];
    for i in 0..ndim as usize {
        let d = le_i16(&bytes, 42 + 2 * i);
        if d < 1 {
            return Err(Error::format(path, format!("bad dim[{}] = {d}", i + 1)));
        }
        dim[i] = d as usize;
    }
    if ndim < 3 {
        return Err(Error::format(path, "expected a 3D volume"));
    }
    if dim[3..].iter().any(|&d| d != 1) {
        return Err(Error::format(path, "expected a single 3D volume (extra dims > 1)"));
    }
    let datatype = le_i16(&bytes, 70);
    let mut spacing = [0.0f64; 3];
    for a in 0..3 {
        spacing[a] = le_f32(&bytes, 76 + 4 * (a + 1)) as f64;
    }
    let vox_offset = le_f32(&bytes, 108) as usize;
    let mut slope = le_f32(&bytes, 112);
    let inter = le_f32(&bytes, 116);
    if slope == 0.0 {
        slope = 1.0;
    }
    let n = dim[0] * dim[1] * dim[2];
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::format(path, format!("unsupported datatype {other}")));
        }
    };
    if bytes.len() < vox_offset + n * elem {
        return Err(Error::format(path, "file truncated"));
    }
    let raw = &bytes[vox_offset..vox_offset + n * elem];
    let mut values = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => values.extend(raw.iter().map(|&b| b as f32)),
        DT_INT16 => values.extend(
            raw.chunks_exact(2)
                .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        DT_UINT16 => values.extend(
            raw.chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        DT_INT32 => values.extend(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        DT_FLOAT32 => values.extend(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        ),
        DT_FLOAT64 => values.extend(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        _ => unreachable!(),
    }
    if slope != 1.0 || inter != 0.0 {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    // NIfTI stores x fastest; rebuild as an Array3<[x, y, z]> in standard layout
    use ndarray::ShapeBuilder;
    let f_order = Array3::from_shape_vec((dim[0], dim[1], dim[2]).f(), values)
        .map_err(|e| Error::format(path, format!("shape mismatch: {e}")))?;
    let data = f_order.as_standard_layout().to_owned();
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

pub fn save_nifti(volume: &Volume, path: &Path) -> Result<()> {
    let shape = volume.shape();
    let mut header = vec![0u8; HEADER_SIZE + 4]; // header + 4 pad bytes to vox_offset
    header[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    // dim
    header[40..42].copy_from_slice(&3i16.to_le_bytes());
    for a in 0..3 {
        header[42 + 2 * a..44 + 2 * a].copy_from_slice(&(shape[a] as i16).to_le_bytes());
    }
    for i in 3..7 {
        header[42 + 2 * i..44 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    header[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    header[72..74].copy_from_slice(&32i16.to_le_bytes()); // bitpix
    let spacing = volume.spacing.unwrap_or([1.0; 3]);
    header[76..80].copy_from_slice(&1.0f32.to_le_bytes()); // pixdim[0]
    for a in 0..3 {
        header[80 + 4 * a..84 + 4 * a].copy_from_slice(&(spacing[a] as f32).to_le_bytes());
    }
    header[108..112].copy_from_slice(&VOX_OFFSET.to_le_bytes());
    header[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    header[116..120].copy_from_slice(&0.0f32.to_le_bytes()); // scl_inter
    // sform/qform off (codes 0); viewers fall back to pixdim
    header[344..348].copy_from_slice(b"n+1\0");

    let n = volume.len();
    let mut body = Vec::with_capacity(n * 4);
    // x fastest on disk
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                body.extend_from_slice(&volume.data[[x, y, z]].to_le_bytes());
            }
        }
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(&header).map_err(|e| Error::io(path, e))?;
        enc.write_all(&body).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&header).map_err(|e| Error::io(path, e))?;
        w.write_all(&body).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

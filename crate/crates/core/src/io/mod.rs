//! Volume file I/O: NIfTI-1 (.nii, .nii.gz) and the toolkit raw format.

mod nifti;
mod raw;

pub use nifti::{load_nifti, save_nifti};
pub use raw::{load_raw, save_raw};

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Load a volume, dispatching on the file extension. Axis order is
/// documented as (x, y, z) with x fastest on disk for NIfTI.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        load_nifti(path)
    } else if name.ends_with(".rvol") {
        load_raw(path)
    } else {
        Err(Error::format(
            path,
            "unknown volume format (expected .nii, .nii.gz, or .rvol)",
        ))
    }
}

/// Save a volume, dispatching on the file extension.
pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        save_nifti(volume, path)
    } else if name.ends_with(".rvol") {
        save_raw(volume, path)
    } else {
        Err(Error::format(
            path,
            "unknown volume format (expected .nii, .nii.gz, or .rvol)",
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn load_missing_file_is_io_error() {
        let err = load_volume(Path::new("/nonexistent/volume.nii")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn unknown_extension_rejected() {
        let err = load_volume(Path::new("/tmp/foo.dcm")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn round_trips_preserve_data_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::from_shape_fn((7, 6, 5), |(x, y, z)| {
            (x as f32 * 0.31 + y as f32 * 0.07 - z as f32 * 0.13).sin()
        });
        let vol = Volume {
            data,
            spacing: Some([1.0, 1.0, 2.5]),
            normalized: false,
        };
        for name in ["v.rvol", "v.nii", "v.nii.gz"] {
            let path = dir.path().join(name);
            save_volume(&vol, &path).unwrap();
            let back = load_volume(&path).unwrap();
            assert_eq!(back.data, vol.data, "{name}");
            let sp = back.spacing.unwrap();
            for a in 0..3 {
                assert!((sp[a] - vol.spacing.unwrap()[a]).abs() < 1e-5, "{name} axis {a}");
            }
        }
    }
}

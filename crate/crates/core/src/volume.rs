//! Volume container, intensity normalization, and informative-crop sampling.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_landmark, Landmark};

/// A 3D scalar grid indexed `[x, y, z]`, with optional voxel spacing in
/// mm/voxel and a normalization flag (values in [0,1] when set).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: Option<[f64; 3]>,
    pub normalized: bool,
}

impl Volume {
    pub fn new(data: Array3<f32>) -> Self {
        Self {
            data,
            spacing: None,
            normalized: false,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Where a crop lives in its source volume, plus the source-volume landmark
/// sampled for this crop event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropPlacement {
    /// Volume coordinates of crop voxel (0, 0, 0).
    pub offset: [usize; 3],
    /// Extents of the sampled region in volume voxels.
    pub extents: [usize; 3],
    pub source_volume_id: String,
    pub landmark: Landmark,
}

/// Clip to the given intensity percentiles, then map affinely to [0,1].
/// Constant volumes map to all zeros. Idempotent for fixed percentiles.
pub fn normalize(volume: &Volume, clip_lo_pct: f64, clip_hi_pct: f64) -> Result<Volume> {
    if volume.is_empty() {
        return Err(Error::invalid("cannot normalize an empty volume".to_string()));
    }
    if !(0.0..=100.0).contains(&clip_lo_pct)
        || !(0.0..=100.0).contains(&clip_hi_pct)
        || clip_lo_pct >= clip_hi_pct
    {
        return Err(Error::invalid(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got ({clip_lo_pct}, {clip_hi_pct})"
        )));
    }
    let mut sorted: Vec<f32> = volume.data.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    // floor for the low rank and ceil for the high rank keeps repeated
    // normalization a bit-exact no-op
    let lo_idx = ((clip_lo_pct / 100.0) * (n - 1) as f64).floor() as usize;
    let hi_idx = ((clip_hi_pct / 100.0) * (n - 1) as f64).ceil() as usize;
    let lo = sorted[lo_idx];
    let hi = sorted[hi_idx.min(n - 1)];
    let mut out = volume.data.clone();
    if hi <= lo {
        out.fill(0.0);
    } else {
        let range = hi - lo;
        out.mapv_inplace(|v| ((v.clamp(lo, hi) - lo) / range).clamp(0.0, 1.0));
    }
    Ok(Volume {
        data: out,
        spacing: volume.spacing,
        normalized: true,
    })
}

/// Crop sampler parameters. The background threshold and informative
/// fraction defaults exclude uninformative regions; rejection sampling is
/// bounded to guarantee termination.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSampler {
    pub background_threshold: f32,
    pub min_informative_fraction: f64,
    pub max_retries: usize,
    /// Landmark jitter fraction (resampled per crop-sampling event).
    pub eta: f64,
}

impl Default for CropSampler {
    fn default() -> Self {
        Self {
            background_threshold: 0.01,
            min_informative_fraction: 0.1,
            max_retries: 50,
            eta: 0.05,
        }
    }
}

fn informative_fraction(volume: &Volume, offset: [usize; 3], extents: [usize; 3], threshold: f32) -> f64 {
    let view = volume.data.slice(ndarray::s![
        offset[0]..offset[0] + extents[0],
        offset[1]..offset[1] + extents[1],
        offset[2]..offset[2] + extents[2]
    ]);
    let total = view.len();
    let informative = view.iter().filter(|&&v| v > threshold).count();
    informative as f64 / total as f64
}

/// Uniformly sample a crop placement, rejecting crops whose informative
/// fraction is below the sampler minimum; after `max_retries` rejections the
/// best candidate seen is returned. Deterministic given the RNG state.
pub fn sample_crop<R: Rng>(
    volume: &Volume,
    volume_id: &str,
    extents: [usize; 3],
    sampler: &CropSampler,
    rng: &mut R,
) -> Result<(Array3<f32>, CropPlacement)> {
    let shape = volume.shape();
    if !volume.normalized {
        return Err(Error::invalid("sample_crop requires a normalized volume".to_string()));
    }
    for a in 0..3 {
        if extents[a] == 0 || extents[a] > shape[a] {
            return Err(Error::invalid(format!(
                "crop extents {extents:?} exceed volume shape {shape:?}"
            )));
        }
    }
    let mut best: Option<([usize; 3], f64)> = None;
    let mut chosen = None;
    for _ in 0..sampler.max_retries.max(1) {
        let mut offset = [0usize; 3];
        for a in 0..3 {
            offset[a] = rng.random_range(0..=(shape[a] - extents[a]));
        }
        let frac = informative_fraction(volume, offset, extents, sampler.background_threshold);
        if frac >= sampler.min_informative_fraction {
            chosen = Some(offset);
            break;
        }
        if best.map(|(_, f)| frac > f).unwrap_or(true) {
            best = Some((offset, frac));
        }
    }
    let offset = chosen.unwrap_or_else(|| best.expect("at least one candidate").0);
    let landmark = make_landmark(shape, sampler.eta, rng)?;
    let crop = volume
        .data
        .slice(ndarray::s![
            offset[0]..offset[0] + extents[0],
            offset[1]..offset[1] + extents[1],
            offset[2]..offset[2] + extents[2]
        ])
        .to_owned();
    Ok((
        crop,
        CropPlacement {
            offset,
            extents,
            source_volume_id: volume_id.to_string(),
            landmark,
        },
    ))
}

/// Trilinear resize with corner alignment: corner voxel centers of the input
/// map exactly to corner voxel centers of the output.
pub fn trilinear_resize(data: &Array3<f32>, target: [usize; 3]) -> Array3<f32> {
    let dims = data.dim();
    let src = [dims.0, dims.1, dims.2];
    if src == target {
        return data.clone();
    }
    let scale = |a: usize| -> f64 {
        if target[a] <= 1 {
            0.0
        } else {
            (src[a] as f64 - 1.0) / (target[a] as f64 - 1.0)
        }
    };
    let s = [scale(0), scale(1), scale(2)];
    let mut out = Array3::<f32>::zeros((target[0], target[1], target[2]));
    for x in 0..target[0] {
        let fx = x as f64 * s[0];
        let x0 = fx.floor() as usize;
        let x1 = (x0 + 1).min(src[0] - 1);
        let tx = fx - x0 as f64;
        for y in 0..target[1] {
            let fy = y as f64 * s[1];
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(src[1] - 1);
            let ty = fy - y0 as f64;
            for z in 0..target[2] {
                let fz = z as f64 * s[2];
                let z0 = fz.floor() as usize;
                let z1 = (z0 + 1).min(src[2] - 1);
                let tz = fz - z0 as f64;
                let c = |xi: usize, yi: usize, zi: usize| data[[xi, yi, zi]] as f64;
                let v = c(x0, y0, z0) * (1.0 - tx) * (1.0 - ty) * (1.0 - tz)
                    + c(x1, y0, z0) * tx * (1.0 - ty) * (1.0 - tz)
                    + c(x0, y1, z0) * (1.0 - tx) * ty * (1.0 - tz)
                    + c(x1, y1, z0) * tx * ty * (1.0 - tz)
                    + c(x0, y0, z1) * (1.0 - tx) * (1.0 - ty) * tz
                    + c(x1, y0, z1) * tx * (1.0 - ty) * tz
                    + c(x0, y1, z1) * (1.0 - tx) * ty * tz
                    + c(x1, y1, z1) * tx * ty * tz;
                out[[x, y, z]] = v as f32;
            }
        }
    }
    out
}

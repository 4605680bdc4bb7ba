//! 3D Scharr edge extraction and boundary-target construction.
//!
//! Per axis, the filter is the derivative kernel (-1, 0, 1)/2 combined with
//! the smoothing kernel (3, 10, 3)/16 along the two perpendicular axes, with
//! edge replication at borders; a unit-slope ramp yields unit response.
//!
//! The evaluation groups the 9 smoothed central differences symmetrically
//! (center, opposite-edge pairs, antipodal-corner pairs) and sums the three
//! squared components in sorted order, so flip and 90-degree-rotation
//! equivariance hold bit-exactly, not just to rounding error.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Edge magnitude map with the same extents as its source crop.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub magnitude: Array3<f32>,
    pub normalized: bool,
}

#[inline]
fn clamped(v: i64, extent: usize) -> usize {
    v.clamp(0, extent as i64 - 1) as usize
}

/// Smoothed central difference along `axis` at (x, y, z) with perpendicular
/// offsets (du on axis u, dw on axis w).
#[inline]
fn central_diff(
    data: &Array3<f32>,
    ext: [usize; 3],
    axis: usize,
    u: usize,
    w: usize,
    p: [i64; 3],
    du: i64,
    dw: i64,
) -> f64 {
    let mut plus = p;
    plus[axis] += 1;
    plus[u] += du;
    plus[w] += dw;
    let mut minus = p;
    minus[axis] -= 1;
    minus[u] += du;
    minus[w] += dw;
    let a = data[[
        clamped(plus[0], ext[0]),
        clamped(plus[1], ext[1]),
        clamped(plus[2], ext[2]),
    ]] as f64;
    let b = data[[
        clamped(minus[0], ext[0]),
        clamped(minus[1], ext[1]),
        clamped(minus[2], ext[2]),
    ]] as f64;
    a - b
}

#[inline]
fn component(data: &Array3<f32>, ext: [usize; 3], axis: usize, p: [i64; 3]) -> f64 {
    let (u, w) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let d = |du: i64, dw: i64| central_diff(data, ext, axis, u, w, p, du, dw);
    let center = 100.0 * d(0, 0);
    let edges = (d(1, 0) + d(-1, 0)) + (d(0, 1) + d(0, -1));
    let corners = (d(1, 1) + d(-1, -1)) + (d(1, -1) + d(-1, 1));
    (center + 30.0 * edges + 9.0 * corners) / 512.0
}

/// Unnormalized Scharr gradient magnitude.
pub fn scharr3d(crop: &Array3<f32>) -> Result<EdgeMap> {
    let dims = crop.dim();
    let ext = [dims.0, dims.1, dims.2];
    if ext.iter().any(|&e| e < 3) {
        return Err(Error::invalid(format!(
            "scharr3d needs extents >= 3 per axis, got {ext:?}"
        )));
    }
    let mut magnitude = Array3::<f32>::zeros(dims);
    for x in 0..ext[0] {
        for y in 0..ext[1] {
            for z in 0..ext[2] {
                let p = [x as i64, y as i64, z as i64];
                let mut sq = [
                    component(crop, ext, 0, p).powi(2),
                    component(crop, ext, 1, p).powi(2),
                    component(crop, ext, 2, p).powi(2),
                ];
                // sorted summation makes the magnitude invariant under
                // component permutation
                sq.sort_by(|a, b| a.partial_cmp(b).unwrap());
                magnitude[[x, y, z]] = ((sq[0] + sq[1]) + sq[2]).sqrt() as f32;
            }
        }
    }
    Ok(EdgeMap {
        magnitude,
        normalized: false,
    })
}

/// Normalized boundary target: magnitude divided by max(per-crop maximum,
/// 1e-6), clamped to [0,1]. Constant crops map to all zeros.
pub fn boundary_target(crop: &Array3<f32>) -> Result<EdgeMap> {
    let edges = scharr3d(crop)?;
    let max = edges.magnitude.iter().copied().fold(0.0f32, f32::max);
    let denom = max.max(1e-6);
    let mut magnitude = edges.magnitude;
    magnitude.mapv_inplace(|v| (v / denom).clamp(0.0, 1.0));
    Ok(EdgeMap {
        magnitude,
        normalized: true,
    })
}

//! Spatial augmentations with invertible records, and intensity noising
//! applied to network inputs only.
//!
//! Spatial ops are exact voxel permutations (axis flips and 90-degree
//! rotations), so targets derived after the spatial stage can be mapped
//! back to volume coordinates without interpolation.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Volume axis, in (x, y, z) index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// Axis-aligned rotation plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Plane {
    Xy,
    Xz,
    Yz,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Xy, Plane::Xz, Plane::Yz];

    /// The two axis indices spanning the plane, ascending.
    pub fn axes(self) -> (usize, usize) {
        match self {
            Plane::Xy => (0, 1),
            Plane::Xz => (0, 2),
            Plane::Yz => (1, 2),
        }
    }
}

/// One primitive spatial operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialOp {
    Flip(Axis),
    /// `k` quarter turns (1..=3) in the given plane.
    Rot90 { plane: Plane, k: u8 },
}

/// Ordered list of primitive spatial ops. Applying the ops in order defines a
/// bijection on crop voxel coordinates; the record is sufficient to map crop
/// coordinates back to volume coordinates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub ops: Vec<SpatialOp>,
}

impl TransformRecord {
    pub fn identity() -> Self {
        Self { ops: Vec::new() }
    }

    pub fn from_ops(ops: Vec<SpatialOp>) -> Self {
        Self { ops }
    }

    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }

    /// Record applying `self` then `other`.
    pub fn then(&self, other: &TransformRecord) -> TransformRecord {
        let mut ops = self.ops.clone();
        ops.extend(other.ops.iter().copied());
        TransformRecord { ops }
    }
}

/// The 48-element cube-symmetry group element realized by a record, in
/// canonical form: `out[i] = flip[i] ? (out_extent[i]-1) - in[src[i]] : in[src[i]]`
/// with `out_extent[i] = in_extent[src[i]]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CoordMap {
    pub src: [usize; 3],
    pub flip: [bool; 3],
}

impl CoordMap {
    pub fn identity() -> Self {
        CoordMap {
            src: [0, 1, 2],
            flip: [false; 3],
        }
    }

    pub fn out_extents(&self, in_extents: [usize; 3]) -> [usize; 3] {
        [
            in_extents[self.src[0]],
            in_extents[self.src[1]],
            in_extents[self.src[2]],
        ]
    }

    /// Forward map of a (possibly fractional) voxel coordinate.
    pub fn map_point(&self, p: [f64; 3], in_extents: [usize; 3]) -> [f64; 3] {
        let out_e = self.out_extents(in_extents);
        let mut q = [0.0; 3];
        for i in 0..3 {
            let v = p[self.src[i]];
            q[i] = if self.flip[i] {
                (out_e[i] - 1) as f64 - v
            } else {
                v
            };
        }
        q
    }

    /// Pre-image of an output-frame coordinate.
    pub fn invert_point(&self, q: [f64; 3], in_extents: [usize; 3]) -> [f64; 3] {
        let out_e = self.out_extents(in_extents);
        let mut p = [0.0; 3];
        for i in 0..3 {
            p[self.src[i]] = if self.flip[i] {
                (out_e[i] - 1) as f64 - q[i]
            } else {
                q[i]
            };
        }
        p
    }
}

/// Resolve a record into its canonical coordinate map, validating each
/// rotation against the extents it would act on.
pub fn coord_map(record: &TransformRecord, in_extents: [usize; 3]) -> Result<CoordMap> {
    let mut map = CoordMap::identity();
    for op in &record.ops {
        match *op {
            SpatialOp::Flip(axis) => {
                map.flip[axis.index()] ^= true;
            }
            SpatialOp::Rot90 { plane, k } => {
                if !(1..=3).contains(&k) {
                    return Err(Error::invalid(format!("rot90 k must be 1..=3, got {k}")));
                }
                let (a, b) = plane.axes();
                let cur = map.out_extents(in_extents);
                if cur[a] != cur[b] {
                    return Err(Error::invalid(format!(
                        "rot90 in plane {plane:?} requires equal extents, got {} and {}",
                        cur[a], cur[b]
                    )));
                }
                for _ in 0..k {
                    // quarter turn: (u, v) -> (extent-1-v, u)
                    let sa = map.src[a];
                    let fa = map.flip[a];
                    map.src[a] = map.src[b];
                    map.flip[a] = !map.flip[b];
                    map.src[b] = sa;
                    map.flip[b] = fa;
                }
            }
        }
    }
    Ok(map)
}

/// Apply the record to a crop, permuting voxel values.
pub fn apply_spatial<T: Copy + Default>(
    data: &Array3<T>,
    record: &TransformRecord,
) -> Result<Array3<T>> {
    let dims = data.dim();
    let in_e = [dims.0, dims.1, dims.2];
    let map = coord_map(record, in_e)?;
    let out_e = map.out_extents(in_e);
    let mut out = Array3::<T>::default((out_e[0], out_e[1], out_e[2]));
    for x in 0..out_e[0] {
        for y in 0..out_e[1] {
            for z in 0..out_e[2] {
                let q = [x, y, z];
                let mut p = [0usize; 3];
                for i in 0..3 {
                    p[map.src[i]] = if map.flip[i] { out_e[i] - 1 - q[i] } else { q[i] };
                }
                out[[x, y, z]] = data[[p[0], p[1], p[2]]];
            }
        }
    }
    Ok(out)
}

/// Map a point of the transformed crop back to pre-transform coordinates.
///
/// `extents` are the pre-transform crop extents. The returned point satisfies
/// `map_point(invert_point(q)) == q` exactly for the supported group.
pub fn invert_point(
    record: &TransformRecord,
    point: [f64; 3],
    extents: [usize; 3],
) -> Result<[f64; 3]> {
    let map = coord_map(record, extents)?;
    let out_e = map.out_extents(extents);
    for i in 0..3 {
        if !(point[i] >= -1e-9 && point[i] <= (out_e[i] - 1) as f64 + 1e-9) {
            return Err(Error::invalid(format!(
                "point {point:?} outside transformed crop extents {out_e:?}"
            )));
        }
    }
    Ok(map.invert_point(point, extents))
}

/// Forward-map a point through the record (test/debug aid).
pub fn map_point(
    record: &TransformRecord,
    point: [f64; 3],
    extents: [usize; 3],
) -> Result<[f64; 3]> {
    Ok(coord_map(record, extents)?.map_point(point, extents))
}

/// Configuration for sampling spatial augmentations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialAugmentConfig {
    /// Independent per-axis flip probability.
    pub flip_prob: f64,
    /// Probability of one 90-degree rotation (uniform plane and k).
    pub rot90_prob: f64,
}

impl Default for SpatialAugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rot90_prob: 0.5,
        }
    }
}

/// Sample a spatial transform: independent Bernoulli flips per axis, then at
/// most one Rot90 with uniform plane and k.
pub fn sample_spatial<R: Rng>(rng: &mut R, cfg: &SpatialAugmentConfig) -> TransformRecord {
    let mut ops = Vec::new();
    for axis in Axis::ALL {
        if rng.random::<f64>() < cfg.flip_prob {
            ops.push(SpatialOp::Flip(axis));
        }
    }
    if rng.random::<f64>() < cfg.rot90_prob {
        let plane = Plane::ALL[rng.random_range(0..3)];
        let k = rng.random_range(1..=3u8);
        ops.push(SpatialOp::Rot90 { plane, k });
    }
    TransformRecord { ops }
}

/// One record per element of the 48-element cube symmetry group, found by
/// breadth-first composition of the primitive generators.
pub fn enumerate_cube_group() -> Vec<TransformRecord> {
    use std::collections::HashMap;
    let e = [2usize, 2, 2];
    let mut seen: HashMap<CoordMap, TransformRecord> = HashMap::new();
    let identity = TransformRecord::identity();
    seen.insert(CoordMap::identity(), identity.clone());
    let mut frontier = vec![identity];
    let mut gens = Vec::new();
    for axis in Axis::ALL {
        gens.push(SpatialOp::Flip(axis));
    }
    for plane in Plane::ALL {
        gens.push(SpatialOp::Rot90 { plane, k: 1 });
    }
    while !frontier.is_empty() && seen.len() < 48 {
        let mut next = Vec::new();
        for rec in &frontier {
            for g in &gens {
                let mut ops = rec.ops.clone();
                ops.push(*g);
                let cand = TransformRecord { ops };
                let key = coord_map(&cand, e).expect("cubic extents");
                if !seen.contains_key(&key) {
                    seen.insert(key, cand.clone());
                    next.push(cand);
                }
            }
        }
        frontier = next;
    }
    let mut out: Vec<TransformRecord> = seen.into_values().collect();
    // Stable order: by op count, then debug repr.
    out.sort_by(|a, b| {
        (a.ops.len(), format!("{a:?}")).cmp(&(b.ops.len(), format!("{b:?}")))
    });
    out
}

/// Configuration for intensity noising of network inputs.
///
/// Defaults follow the Models Genesis augmentation suite: a monotone
/// intensity remap, local pixel shuffling, and mutually exclusive
/// in-painting / out-painting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityNoiseConfig {
    pub intensity_shift_prob: f64,
    /// Total control points of the monotone remap curve, endpoints included.
    pub shift_control_points: usize,
    pub shuffle_prob: f64,
    /// Maximum shuffle block extent per axis.
    pub shuffle_block_extents: [usize; 3],
    /// Number of shuffle blocks; derived from crop/block volume when absent.
    pub shuffle_block_count: Option<usize>,
    pub inpaint_prob: f64,
    pub inpaint_box_count: (usize, usize),
    /// Absolute box extent range; derived as extent/6..extent/3 when absent.
    pub inpaint_box_size: Option<(usize, usize)>,
    pub outpaint_prob: f64,
    pub outpaint_box_count: (usize, usize),
    /// Absolute box extent range; derived as 3*extent/7..4*extent/7 when absent.
    pub outpaint_box_size: Option<(usize, usize)>,
}

impl Default for IntensityNoiseConfig {
    fn default() -> Self {
        Self {
            intensity_shift_prob: 0.9,
            shift_control_points: 4,
            shuffle_prob: 0.5,
            shuffle_block_extents: [8, 8, 8],
            shuffle_block_count: None,
            inpaint_prob: 0.72,
            inpaint_box_count: (3, 5),
            inpaint_box_size: None,
            outpaint_prob: 0.18,
            outpaint_box_count: (4, 6),
            outpaint_box_size: None,
        }
    }
}

impl IntensityNoiseConfig {
    /// Everything off: `apply_intensity` becomes the identity.
    pub fn disabled() -> Self {
        Self {
            intensity_shift_prob: 0.0,
            shuffle_prob: 0.0,
            inpaint_prob: 0.0,
            outpaint_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("intensity_shift_prob", self.intensity_shift_prob),
            ("shuffle_prob", self.shuffle_prob),
            ("inpaint_prob", self.inpaint_prob),
            ("outpaint_prob", self.outpaint_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.inpaint_prob + self.outpaint_prob > 1.0 + 1e-12 {
            return Err(Error::invalid(
                "inpaint_prob + outpaint_prob must not exceed 1".to_string(),
            ));
        }
        if self.shift_control_points < 2 {
            return Err(Error::invalid("shift_control_points must be >= 2".to_string()));
        }
        if self.shuffle_block_extents.iter().any(|&e| e == 0) {
            return Err(Error::invalid("shuffle block extents must be positive".to_string()));
        }
        Ok(())
    }
}

/// Monotone intensity remap through random control points (Bezier-style).
/// Endpoints are pinned at (0,0) and (1,1); interior control coordinates are
/// sorted so both x(t) and y(t) are non-decreasing.
fn monotone_curve_lut<R: Rng>(rng: &mut R, control_points: usize, samples: usize) -> (Vec<f64>, Vec<f64>) {
    let interior = control_points.saturating_sub(2);
    let mut cx = vec![0.0];
    let mut cy = vec![0.0];
    let mut ix: Vec<f64> = (0..interior).map(|_| rng.random::<f64>()).collect();
    let mut iy: Vec<f64> = (0..interior).map(|_| rng.random::<f64>()).collect();
    ix.sort_by(|a, b| a.partial_cmp(b).unwrap());
    iy.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cx.extend(ix);
    cy.extend(iy);
    cx.push(1.0);
    cy.push(1.0);
    // de Casteljau evaluation of the Bezier curve through the control polygon
    let eval = |ctrl: &[f64], t: f64| -> f64 {
        let mut pts = ctrl.to_vec();
        for level in (1..pts.len()).rev() {
            for i in 0..level {
                pts[i] = pts[i] * (1.0 - t) + pts[i + 1] * t;
            }
        }
        pts[0]
    };
    let mut xs = Vec::with_capacity(samples);
    let mut ys = Vec::with_capacity(samples);
    for s in 0..samples {
        let t = s as f64 / (samples - 1) as f64;
        xs.push(eval(&cx, t));
        ys.push(eval(&cy, t));
    }
    (xs, ys)
}

fn curve_lookup(xs: &[f64], ys: &[f64], v: f64) -> f64 {
    let idx = xs.partition_point(|&x| x < v);
    if idx == 0 {
        return ys[0];
    }
    if idx >= xs.len() {
        return *ys.last().unwrap();
    }
    let (x0, x1) = (xs[idx - 1], xs[idx]);
    let (y0, y1) = (ys[idx - 1], ys[idx]);
    if x1 <= x0 {
        return y0;
    }
    y0 + (y1 - y0) * ((v - x0) / (x1 - x0))
}

fn sample_box<R: Rng>(
    rng: &mut R,
    extents: [usize; 3],
    size_range: (usize, usize),
) -> ([usize; 3], [usize; 3]) {
    let mut size = [0usize; 3];
    let mut pos = [0usize; 3];
    for a in 0..3 {
        let hi = size_range.1.min(extents[a]).max(1);
        let lo = size_range.0.clamp(1, hi);
        size[a] = rng.random_range(lo..=hi);
        pos[a] = rng.random_range(0..=(extents[a] - size[a]));
    }
    (pos, size)
}

/// Apply intensity noising to a normalized crop, in order: monotone intensity
/// remap, local pixel shuffle, then in-painting or out-painting (mutually
/// exclusive). Output stays in [0,1].
pub fn apply_intensity<R: Rng>(
    crop: &Array3<f32>,
    cfg: &IntensityNoiseConfig,
    rng: &mut R,
) -> Result<Array3<f32>> {
    cfg.validate()?;
    let dims = crop.dim();
    let ext = [dims.0, dims.1, dims.2];
    if crop.iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&(v as f64))) {
        return Err(Error::invalid("apply_intensity expects a crop normalized to [0,1]".to_string()));
    }
    let mut out = crop.clone();

    if rng.random::<f64>() < cfg.intensity_shift_prob {
        let (xs, ys) = monotone_curve_lut(rng, cfg.shift_control_points, 256);
        out.mapv_inplace(|v| curve_lookup(&xs, &ys, v as f64).clamp(0.0, 1.0) as f32);
    }

    if rng.random::<f64>() < cfg.shuffle_prob {
        let block = [
            cfg.shuffle_block_extents[0].min(ext[0]),
            cfg.shuffle_block_extents[1].min(ext[1]),
            cfg.shuffle_block_extents[2].min(ext[2]),
        ];
        let block_vol = block.iter().product::<usize>().max(1);
        let crop_vol = ext.iter().product::<usize>();
        let count = cfg
            .shuffle_block_count
            .unwrap_or_else(|| (2 * crop_vol / block_vol).max(1));
        let mut values = Vec::new();
        for _ in 0..count {
            let (pos, size) = sample_box(rng, ext, (2, block.iter().copied().max().unwrap()));
            values.clear();
            for x in pos[0]..pos[0] + size[0] {
                for y in pos[1]..pos[1] + size[1] {
                    for z in pos[2]..pos[2] + size[2] {
                        values.push(out[[x, y, z]]);
                    }
                }
            }
            values.shuffle(rng);
            let mut it = values.iter();
            for x in pos[0]..pos[0] + size[0] {
                for y in pos[1]..pos[1] + size[1] {
                    for z in pos[2]..pos[2] + size[2] {
                        out[[x, y, z]] = *it.next().unwrap();
                    }
                }
            }
        }
    }

    let paint_draw = rng.random::<f64>();
    if paint_draw < cfg.inpaint_prob {
        let size_range = cfg
            .inpaint_box_size
            .unwrap_or((ext.iter().copied().min().unwrap() / 6, ext.iter().copied().min().unwrap() / 3));
        let n = rng.random_range(cfg.inpaint_box_count.0..=cfg.inpaint_box_count.1.max(cfg.inpaint_box_count.0));
        for _ in 0..n {
            let (pos, size) = sample_box(rng, ext, size_range);
            for x in pos[0]..pos[0] + size[0] {
                for y in pos[1]..pos[1] + size[1] {
                    for z in pos[2]..pos[2] + size[2] {
                        out[[x, y, z]] = rng.random::<f32>();
                    }
                }
            }
        }
    } else if paint_draw < cfg.inpaint_prob + cfg.outpaint_prob {
        let size_range = cfg.outpaint_box_size.unwrap_or((
            3 * ext.iter().copied().min().unwrap() / 7,
            4 * ext.iter().copied().min().unwrap() / 7,
        ));
        let kept = out.clone();
        out.mapv_inplace(|_| 0.0);
        let mut noise = Array3::<f32>::zeros(dims);
        noise.mapv_inplace(|_| 0.0);
        for v in noise.iter_mut() {
            *v = rng.random::<f32>();
        }
        out.assign(&noise);
        let n = rng.random_range(cfg.outpaint_box_count.0..=cfg.outpaint_box_count.1.max(cfg.outpaint_box_count.0));
        for _ in 0..n {
            let (pos, size) = sample_box(rng, ext, size_range);
            for x in pos[0]..pos[0] + size[0] {
                for y in pos[1]..pos[1] + size[1] {
                    for z in pos[2]..pos[2] + size[2] {
                        out[[x, y, z]] = kept[[x, y, z]];
                    }
                }
            }
        }
    }

    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

//! Reference landmarks, origin points, spherical-coordinate vector targets,
//! and the origin-index correspondence under spatial augmentation.
//!
//! All coordinates are voxel coordinates of the (resampled) source volume;
//! vector directions are expressed in the volume frame while origin indices
//! follow the crop frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{coord_map, invert_point, TransformRecord};
use crate::error::{Error, Result};
use crate::volume::CropPlacement;

/// A per-volume reference point that every predicted vector terminates at.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    /// Position in volume voxel coordinates (x, y, z).
    pub position: [f64; 3],
    /// The sampled jitter offset; `position = base + jitter_applied`.
    pub jitter_applied: [f64; 3],
}

/// Canonical crop-local origin point layouts. Index `m = 0` is always the
/// crop center; corners follow the bit order `m = 1 + bx + 2*by + 4*bz`
/// where bit 0 selects the minimum face and bit 1 the maximum face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OriginLayout {
    CenterOnly,
    CenterPlusCorners,
    /// First `k` corners in bit order; supported k: 1, 4, 8.
    CenterPlusKCorners(usize),
}

impl OriginLayout {
    pub fn point_count(self) -> usize {
        match self {
            OriginLayout::CenterOnly => 1,
            OriginLayout::CenterPlusCorners => 9,
            OriginLayout::CenterPlusKCorners(k) => 1 + k,
        }
    }

    /// Layout for a given vector count n (one of 1, 2, 5, 9).
    pub fn for_point_count(n: usize) -> Result<Self> {
        match n {
            1 => Ok(OriginLayout::CenterOnly),
            2 => Ok(OriginLayout::CenterPlusKCorners(1)),
            5 => Ok(OriginLayout::CenterPlusKCorners(4)),
            9 => Ok(OriginLayout::CenterPlusCorners),
            _ => Err(Error::invalid(format!(
                "unsupported origin point count {n}; supported: 1, 2, 5, 9"
            ))),
        }
    }
}

/// Ordered crop-local origin points for one layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginPointSet {
    pub points: Vec<[f64; 3]>,
    pub layout: OriginLayout,
    /// Crop extents the points were built for.
    pub extents: [usize; 3],
}

/// One normalized spherical target (r/R, theta/pi, phi/pi).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalTarget {
    pub r_norm: f64,
    pub theta_norm: f64,
    pub phi_norm: f64,
}

/// Normalized spherical targets indexed by origin-point id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpTargetSet {
    pub targets: Vec<SphericalTarget>,
    /// Normalizing radius in voxel units.
    pub radius: f64,
}

impl VpTargetSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn permuted(&self, perm: &IndexPermutation) -> VpTargetSet {
        VpTargetSet {
            targets: perm.mapping.iter().map(|&j| self.targets[j]).collect(),
            radius: self.radius,
        }
    }
}

/// A bijection on origin-point indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexPermutation {
    /// `mapping[m]` is the canonical index of the untransformed crop that
    /// point `m` of the transformed crop maps back to.
    pub mapping: Vec<usize>,
}

impl IndexPermutation {
    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn is_bijective(&self) -> bool {
        let n = self.mapping.len();
        let mut seen = vec![false; n];
        for &m in &self.mapping {
            if m >= n || seen[m] {
                return false;
            }
            seen[m] = true;
        }
        true
    }
}

/// Cartesian delta to spherical coordinates.
///
/// Returns `(r, theta, phi)` with `theta` in `[0, pi]` and `phi` in
/// `[-pi, pi]` (two-argument arctangent). Singularity defaults: `theta = 0`
/// when `r = 0`, `phi = 0` when `x = y = 0`.
pub fn to_spherical(delta: [f64; 3]) -> Result<(f64, f64, f64)> {
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite delta {delta:?}")));
    }
    let [x, y, z] = delta;
    let r = (x * x + y * y + z * z).sqrt();
    let theta = if r == 0.0 {
        0.0
    } else {
        (z / r).clamp(-1.0, 1.0).acos()
    };
    let phi = if x == 0.0 && y == 0.0 { 0.0 } else { y.atan2(x) };
    Ok((r, theta, phi))
}

/// Inverse of [`to_spherical`].
pub fn from_spherical(r: f64, theta: f64, phi: f64) -> [f64; 3] {
    [
        r * theta.sin() * phi.cos(),
        r * theta.sin() * phi.sin(),
        r * theta.cos(),
    ]
}

/// Half the space diagonal of the volume, in voxel units: the radius of the
/// sphere circumscribing the volume.
pub fn circumscribing_radius(volume_shape: [usize; 3]) -> Result<f64> {
    if volume_shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!(
            "volume extents must be >= 1, got {volume_shape:?}"
        )));
    }
    let [dx, dy, dz] = volume_shape.map(|d| d as f64);
    Ok((dx * dx + dy * dy + dz * dz).sqrt() / 2.0)
}

/// Jittered volume-center landmark. Each jitter component is drawn uniformly
/// from `[-eta*D, +eta*D]` for the extent `D` along that axis.
pub fn make_landmark<R: Rng>(
    volume_shape: [usize; 3],
    eta: f64,
    rng: &mut R,
) -> Result<Landmark> {
    if !(0.0..0.5).contains(&eta) {
        return Err(Error::invalid(format!("eta must be in [0, 0.5), got {eta}")));
    }
    if volume_shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid("volume extents must be >= 1".to_string()));
    }
    let mut position = [0.0; 3];
    let mut jitter = [0.0; 3];
    for a in 0..3 {
        let base = (volume_shape[a] as f64 - 1.0) / 2.0;
        let bound = eta * volume_shape[a] as f64;
        let j = if bound > 0.0 {
            rng.random_range(-bound..=bound)
        } else {
            0.0
        };
        jitter[a] = j;
        position[a] = base + j;
    }
    Ok(Landmark {
        position,
        jitter_applied: jitter,
    })
}

fn corner_point(extents: [usize; 3], bits: usize) -> [f64; 3] {
    let mut p = [0.0; 3];
    for a in 0..3 {
        p[a] = if (bits >> a) & 1 == 1 {
            (extents[a] - 1) as f64
        } else {
            0.0
        };
    }
    p
}

/// Crop-local origin points: the crop center (possibly fractional) followed
/// by corner voxel centers in the fixed bit order.
pub fn make_origin_points(
    crop_extents: [usize; 3],
    layout: OriginLayout,
) -> Result<OriginPointSet> {
    let corners = match layout {
        OriginLayout::CenterOnly => 0,
        OriginLayout::CenterPlusCorners => 8,
        OriginLayout::CenterPlusKCorners(k) => {
            if ![1, 4, 8].contains(&k) {
                return Err(Error::invalid(format!(
                    "unsupported corner count {k}; supported: 1, 4, 8"
                )));
            }
            k
        }
    };
    if corners > 0 && crop_extents.iter().any(|&e| e < 2) {
        return Err(Error::invalid(format!(
            "corner layouts need extents >= 2 per axis, got {crop_extents:?}"
        )));
    }
    if crop_extents.iter().any(|&e| e == 0) {
        return Err(Error::invalid("crop extents must be >= 1".to_string()));
    }
    let mut points = Vec::with_capacity(1 + corners);
    points.push([
        (crop_extents[0] as f64 - 1.0) / 2.0,
        (crop_extents[1] as f64 - 1.0) / 2.0,
        (crop_extents[2] as f64 - 1.0) / 2.0,
    ]);
    for bits in 0..corners {
        points.push(corner_point(crop_extents, bits));
    }
    Ok(OriginPointSet {
        points,
        layout,
        extents: crop_extents,
    })
}

/// Normalized spherical targets for every origin point of a crop.
///
/// Each crop-local point is mapped through the inverse of the spatial
/// transform to pre-augmentation crop coordinates, offset by the crop
/// placement into volume coordinates, and the delta to the landmark is
/// converted to normalized spherical coordinates. When the sampled placement
/// extents differ from the origin-point extents (scale-jittered crops), the
/// pre-augmentation coordinates are rescaled so corners map to corners.
pub fn vp_targets(
    placement: &CropPlacement,
    transform: &TransformRecord,
    origins: &OriginPointSet,
    landmark: &Landmark,
    radius: f64,
) -> Result<VpTargetSet> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::invalid(format!("radius must be positive, got {radius}")));
    }
    // Rotations that exchange unequal axes are outside the supported set for
    // this crop geometry.
    coord_map(transform, origins.extents).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::UnsupportedTransform(msg),
        other => other,
    })?;
    let mut targets = Vec::with_capacity(origins.points.len());
    for &p in &origins.points {
        let pre = invert_point(transform, p, origins.extents)?;
        let mut world = [0.0; 3];
        for a in 0..3 {
            let scale = if placement.extents[a] == origins.extents[a] {
                1.0
            } else if origins.extents[a] > 1 {
                (placement.extents[a] as f64 - 1.0) / (origins.extents[a] as f64 - 1.0)
            } else {
                0.0
            };
            world[a] = placement.offset[a] as f64 + pre[a] * scale;
        }
        let delta = [
            landmark.position[0] - world[0],
            landmark.position[1] - world[1],
            landmark.position[2] - world[2],
        ];
        let (r, theta, phi) = to_spherical(delta)?;
        targets.push(SphericalTarget {
            r_norm: (r / radius).clamp(0.0, 1.0),
            theta_norm: theta / std::f64::consts::PI,
            phi_norm: phi / std::f64::consts::PI,
        });
    }
    Ok(VpTargetSet { targets, radius })
}

/// Index permutation realized by a spatial transform on the full
/// center-plus-corners layout: canonical point `m` of the transformed crop
/// maps back to canonical point `mapping[m]` of the untransformed crop.
pub fn permutation_for(
    transform: &TransformRecord,
    layout: OriginLayout,
) -> Result<IndexPermutation> {
    if layout != OriginLayout::CenterPlusCorners {
        return Err(Error::invalid(
            "corner permutations are only defined for the full corner layout".to_string(),
        ));
    }
    // Permutations are extent-independent on cubic crops.
    let map = coord_map(transform, [2, 2, 2]).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::UnsupportedTransform(msg),
        other => other,
    })?;
    let mut mapping = vec![0usize; 9];
    for bits in 0..8usize {
        // pre-image bit on source axis src[i] is the output bit on axis i,
        // toggled when that axis is mirrored
        let mut pre_bits = 0usize;
        for i in 0..3 {
            let b = (bits >> i) & 1;
            let b = if map.flip[i] { b ^ 1 } else { b };
            pre_bits |= b << map.src[i];
        }
        mapping[1 + bits] = 1 + pre_bits;
    }
    Ok(IndexPermutation { mapping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{enumerate_cube_group, map_point, Axis, SpatialOp};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn placement(offset: [usize; 3], extents: [usize; 3]) -> CropPlacement {
        CropPlacement {
            offset,
            extents,
            source_volume_id: "test".to_string(),
            landmark: Landmark {
                position: [0.0; 3],
                jitter_applied: [0.0; 3],
            },
        }
    }

    #[test]
    fn spherical_axis_and_quadrant_examples() {
        // +z axis: arccos(1) = 0, phi defaults to 0
        let (r, t, p) = to_spherical([0.0, 0.0, 5.0]).unwrap();
        assert_eq!((r, t, p), (5.0, 0.0, 0.0));

        // independent scalar arithmetic: r = 40*sqrt(3), theta = arccos(1/sqrt(3)), phi = pi/4
        let (r, t, p) = to_spherical([40.0, 40.0, 40.0]).unwrap();
        assert_abs_diff_eq!(r, 40.0 * 3.0f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(r, 69.2820, epsilon = 1e-4);
        assert_abs_diff_eq!(t, (1.0 / 3.0f64.sqrt()).acos(), epsilon = 1e-12);
        assert_abs_diff_eq!(t, 0.955317, epsilon = 1e-6);
        assert_abs_diff_eq!(p, std::f64::consts::FRAC_PI_4, epsilon = 1e-12);

        // atan2(0, -1) = pi
        let (r, t, p) = to_spherical([-1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t, 1.570796, epsilon = 1e-6);
        assert_abs_diff_eq!(p, 3.141593, epsilon = 1e-6);

        assert!(to_spherical([f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn circumscribing_radius_examples() {
        assert_abs_diff_eq!(
            circumscribing_radius([100, 100, 100]).unwrap(),
            100.0 * 3.0f64.sqrt() / 2.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(circumscribing_radius([100, 100, 100]).unwrap(), 86.6025, epsilon = 1e-4);
        assert_abs_diff_eq!(circumscribing_radius([96, 96, 96]).unwrap(), 83.1384, epsilon = 1e-4);
        assert_abs_diff_eq!(circumscribing_radius([1, 1, 1]).unwrap(), 0.8660, epsilon = 1e-4);
        assert!(circumscribing_radius([0, 1, 1]).is_err());
    }

    #[test]
    fn landmark_center_and_jitter_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lm = make_landmark([100, 100, 100], 0.0, &mut rng).unwrap();
        assert_eq!(lm.position, [49.5, 49.5, 49.5]);
        assert_eq!(lm.jitter_applied, [0.0, 0.0, 0.0]);

        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lm = make_landmark([100, 100, 100], 0.05, &mut rng).unwrap();
            for a in 0..3 {
                assert!(lm.position[a] >= 44.5 && lm.position[a] <= 54.5);
                assert_abs_diff_eq!(lm.position[a], 49.5 + lm.jitter_applied[a], epsilon = 1e-12);
            }
        }

        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(
            make_landmark([64, 48, 32], 0.05, &mut a).unwrap(),
            make_landmark([64, 48, 32], 0.05, &mut b).unwrap()
        );

        assert!(make_landmark([100, 100, 100], 0.5, &mut rng).is_err());
        assert!(make_landmark([100, 100, 100], -0.1, &mut rng).is_err());
    }

    #[test]
    fn origin_points_bit_order() {
        let set = make_origin_points([96, 96, 96], OriginLayout::CenterPlusCorners).unwrap();
        assert_eq!(set.points.len(), 9);
        assert_eq!(set.points[0], [47.5, 47.5, 47.5]);
        // bit order: m = 1 + bx + 2*by + 4*bz
        assert_eq!(set.points[1], [0.0, 0.0, 0.0]);
        assert_eq!(set.points[2], [95.0, 0.0, 0.0]);
        assert_eq!(set.points[3], [0.0, 95.0, 0.0]);
        assert_eq!(set.points[8], [95.0, 95.0, 95.0]);

        let set = make_origin_points([2, 2, 2], OriginLayout::CenterOnly).unwrap();
        assert_eq!(set.points, vec![[0.5, 0.5, 0.5]]);

        let set = make_origin_points([96, 96, 96], OriginLayout::CenterPlusKCorners(1)).unwrap();
        assert_eq!(set.points.len(), 2);
        assert_eq!(set.points[1], [0.0, 0.0, 0.0]);

        assert!(make_origin_points([96, 96, 96], OriginLayout::CenterPlusKCorners(3)).is_err());
        assert!(make_origin_points([1, 4, 4], OriginLayout::CenterPlusCorners).is_err());
    }

    #[test]
    fn vp_targets_identity_example() {
        // delta (40,40,40): r_norm = 0.8, theta_norm = arccos(1/sqrt(3))/pi, phi_norm = 1/4
        let lm = Landmark {
            position: [50.0, 50.0, 50.0],
            jitter_applied: [0.0; 3],
        };
        let origins = OriginPointSet {
            points: vec![[10.0, 10.0, 10.0]],
            layout: OriginLayout::CenterOnly,
            extents: [100, 100, 100],
        };
        let ts = vp_targets(
            &placement([0, 0, 0], [100, 100, 100]),
            &TransformRecord::identity(),
            &origins,
            &lm,
            86.6025,
        )
        .unwrap();
        let t = ts.targets[0];
        assert_abs_diff_eq!(t.r_norm, 0.8, epsilon = 1e-6);
        assert_abs_diff_eq!(t.theta_norm, 0.304086, epsilon = 1e-6);
        assert_abs_diff_eq!(t.phi_norm, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn vp_targets_zero_vector_defaults() {
        let lm = Landmark {
            position: [10.0, 10.0, 10.0],
            jitter_applied: [0.0; 3],
        };
        let origins = OriginPointSet {
            points: vec![[10.0, 10.0, 10.0]],
            layout: OriginLayout::CenterOnly,
            extents: [32, 32, 32],
        };
        let ts = vp_targets(
            &placement([0, 0, 0], [32, 32, 32]),
            &TransformRecord::identity(),
            &origins,
            &lm,
            50.0,
        )
        .unwrap();
        assert_eq!(ts.targets[0], SphericalTarget { r_norm: 0.0, theta_norm: 0.0, phi_norm: 0.0 });
    }

    #[test]
    fn permutation_examples() {
        let flip_x = TransformRecord::from_ops(vec![SpatialOp::Flip(Axis::X)]);
        let perm = permutation_for(&flip_x, OriginLayout::CenterPlusCorners).unwrap();
        // (0)(1 2)(3 4)(5 6)(7 8)
        assert_eq!(perm.mapping, vec![0, 2, 1, 4, 3, 6, 5, 8, 7]);

        let ident = permutation_for(&TransformRecord::identity(), OriginLayout::CenterPlusCorners)
            .unwrap();
        assert_eq!(ident.mapping, (0..9).collect::<Vec<_>>());

        let twice = TransformRecord::from_ops(vec![
            SpatialOp::Flip(Axis::X),
            SpatialOp::Flip(Axis::X),
        ]);
        assert_eq!(
            permutation_for(&twice, OriginLayout::CenterPlusCorners).unwrap(),
            ident
        );

        assert!(permutation_for(&flip_x, OriginLayout::CenterOnly).is_err());
    }

    #[test]
    fn permutation_soundness_exhaustive() {
        // For every group element and corner, map the corner through the
        // transform's inverse and re-identify the nearest canonical point.
        let extents = [6usize, 6, 6];
        let origins = make_origin_points(extents, OriginLayout::CenterPlusCorners).unwrap();
        for rec in enumerate_cube_group() {
            let perm = permutation_for(&rec, OriginLayout::CenterPlusCorners).unwrap();
            assert!(perm.is_bijective());
            assert_eq!(perm.mapping[0], 0);
            for m in 0..9 {
                let pre = invert_point(&rec, origins.points[m], extents).unwrap();
                let nearest = origins
                    .points
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da: f64 = a.iter().zip(&pre).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = b.iter().zip(&pre).map(|(x, y)| (x - y).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                assert_eq!(perm.mapping[m], nearest, "transform {rec:?}, point {m}");
            }
        }
    }

    #[test]
    fn permutation_composition_law() {
        let group = enumerate_cube_group();
        for t1 in group.iter().take(8) {
            for t2 in group.iter().take(8) {
                let combined = t1.then(t2);
                let pc = permutation_for(&combined, OriginLayout::CenterPlusCorners).unwrap();
                let p1 = permutation_for(t1, OriginLayout::CenterPlusCorners).unwrap();
                let p2 = permutation_for(t2, OriginLayout::CenterPlusCorners).unwrap();
                // mapping of (t1 then t2) is p1 composed after p2
                let composed: Vec<usize> = (0..9).map(|m| p1.mapping[p2.mapping[m]]).collect();
                assert_eq!(pc.mapping, composed);
            }
        }
    }

    #[test]
    fn vp_targets_equivariance_flip_x() {
        // brute-force oracle via permutation of the identity targets
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lm = make_landmark([100, 100, 100], 0.05, &mut rng).unwrap();
        let extents = [32, 32, 32];
        let origins = make_origin_points(extents, OriginLayout::CenterPlusCorners).unwrap();
        let pl = CropPlacement {
            offset: [12, 20, 40],
            extents,
            source_volume_id: "v".to_string(),
            landmark: lm,
        };
        let radius = circumscribing_radius([100, 100, 100]).unwrap();
        let base = vp_targets(&pl, &TransformRecord::identity(), &origins, &lm, radius).unwrap();
        let flip = TransformRecord::from_ops(vec![SpatialOp::Flip(Axis::X)]);
        let flipped = vp_targets(&pl, &flip, &origins, &lm, radius).unwrap();
        let perm = permutation_for(&flip, OriginLayout::CenterPlusCorners).unwrap();
        assert_eq!(flipped, base.permuted(&perm));
    }

    #[test]
    fn vp_targets_scale_jitter_maps_corners() {
        // origins on a 16^3 network crop, sampled region 31^3: corner must map
        // to the far corner of the sampled region.
        let lm = Landmark {
            position: [50.0, 50.0, 50.0],
            jitter_applied: [0.0; 3],
        };
        let origins = make_origin_points([16, 16, 16], OriginLayout::CenterPlusCorners).unwrap();
        let pl = placement([10, 10, 10], [31, 31, 31]);
        let radius = 100.0;
        let ts = vp_targets(&pl, &TransformRecord::identity(), &origins, &lm, radius).unwrap();
        // corner m=8 at (15,15,15) scales to world (10+30, 10+30, 10+30) = (40,40,40)
        let (r, _, _) = to_spherical([10.0, 10.0, 10.0]).unwrap();
        assert_abs_diff_eq!(ts.targets[8].r_norm, r / radius, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn spherical_round_trip(
            x in -100.0f64..100.0,
            y in -100.0f64..100.0,
            z in -100.0f64..100.0,
        ) {
            let (r, t, p) = to_spherical([x, y, z]).unwrap();
            prop_assert!((0.0..=std::f64::consts::PI).contains(&t));
            prop_assert!((-std::f64::consts::PI..=std::f64::consts::PI).contains(&p));
            if r > 1e-6 {
                let back = from_spherical(r, t, p);
                for a in 0..3 {
                    let orig = [x, y, z][a];
                    prop_assert!((back[a] - orig).abs() <= 1e-9 * r.max(1.0));
                }
            }
        }

        #[test]
        fn targets_in_range_for_in_volume_crops(
            seed in 0u64..1000,
            off in 0usize..32,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [64usize, 64, 64];
            let lm = make_landmark(shape, 0.05, &mut rng).unwrap();
            let extents = [32usize, 32, 32];
            let origins = make_origin_points(extents, OriginLayout::CenterPlusCorners).unwrap();
            let pl = CropPlacement {
                offset: [off, off / 2, off / 3],
                extents,
                source_volume_id: "p".to_string(),
                landmark: lm,
            };
            let radius = circumscribing_radius(shape).unwrap();
            let ts = vp_targets(&pl, &TransformRecord::identity(), &origins, &lm, radius).unwrap();
            for t in &ts.targets {
                prop_assert!((0.0..=1.0).contains(&t.r_norm));
                prop_assert!((0.0..=1.0).contains(&t.theta_norm));
                prop_assert!((-1.0..=1.0).contains(&t.phi_norm));
            }
        }
    }

    #[test]
    fn forward_map_of_inverse_is_identity_for_origin_points() {
        let extents = [8usize, 8, 8];
        let origins = make_origin_points(extents, OriginLayout::CenterPlusCorners).unwrap();
        for rec in enumerate_cube_group() {
            for &p in &origins.points {
                let pre = invert_point(&rec, p, extents).unwrap();
                let fwd = map_point(&rec, pre, extents).unwrap();
                assert_eq!(fwd, p);
            }
        }
    }
}

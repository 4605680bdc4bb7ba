//! Deterministic synthetic phantoms: soft-edged ellipsoid "organs" in
//! structured positions on a low-intensity noisy background, with a matching
//! label map. Phantoms stand in for medical volumes at desk scale.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// One ellipsoidal organ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    /// Distinct positive label id; overlaps resolve by higher id winning.
    pub label: u8,
    /// Base center offset from the volume center, in voxels.
    pub center_offset: [f64; 3],
    /// Ellipsoid radii per axis, in voxels.
    pub radii: [f64; 3],
    /// Interior intensity in [0,1].
    pub intensity: f32,
    /// Std-dev of the Gaussian positional noise added to the base center.
    pub position_noise: f64,
}

/// Full phantom description; identical specs generate identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub shape: [usize; 3],
    pub organs: Vec<OrganSpec>,
}

/// Fraction of the ellipsoid radius over which intensity ramps to zero
/// outside the labeled boundary.
const EDGE_WIDTH: f64 = 0.15;
/// Peak amplitude of the in-organ texture noise.
const TEXTURE_AMPLITUDE: f32 = 0.02;
/// Background intensity range; stays below the default informative
/// threshold of 0.01.
const BACKGROUND_BASE: f32 = 0.003;
const BACKGROUND_SPAN: f32 = 0.005;

impl PhantomSpec {
    /// Six organs in structured positions (offsets and radii scale with the
    /// volume), so position, scale, and orientation priors exist to learn.
    pub fn default_organs(shape: [usize; 3], position_noise: f64) -> Vec<OrganSpec> {
        let s = shape.iter().copied().min().unwrap_or(48) as f64;
        let u = s / 48.0;
        vec![
            OrganSpec {
                label: 1,
                center_offset: [0.0, 0.0, 0.0],
                radii: [17.0 * u, 15.0 * u, 13.5 * u],
                intensity: 0.35,
                position_noise,
            },
            OrganSpec {
                label: 2,
                center_offset: [-8.0 * u, -4.0 * u, 1.0 * u],
                radii: [5.0 * u, 5.5 * u, 5.0 * u],
                intensity: 0.75,
                position_noise,
            },
            OrganSpec {
                label: 3,
                center_offset: [8.0 * u, -4.0 * u, -1.0 * u],
                radii: [5.0 * u, 4.5 * u, 5.0 * u],
                intensity: 0.55,
                position_noise,
            },
            OrganSpec {
                label: 4,
                center_offset: [0.0, 7.0 * u, 4.0 * u],
                radii: [2.8 * u, 2.8 * u, 7.5 * u],
                intensity: 0.9,
                position_noise,
            },
            OrganSpec {
                label: 5,
                center_offset: [3.5 * u, 3.0 * u, -6.0 * u],
                radii: [2.5 * u, 2.5 * u, 2.5 * u],
                intensity: 0.65,
                position_noise,
            },
            OrganSpec {
                label: 6,
                center_offset: [-3.0 * u, 6.0 * u, -4.5 * u],
                radii: [6.5 * u, 2.2 * u, 3.5 * u],
                intensity: 0.45,
                position_noise,
            },
        ]
    }

    pub fn with_default_organs(seed: u64, shape: [usize; 3], position_noise: f64) -> Self {
        Self {
            seed,
            shape,
            organs: Self::default_organs(shape, position_noise),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("phantom shape must be positive".to_string()));
        }
        let mut labels = std::collections::HashSet::new();
        for organ in &self.organs {
            if organ.label == 0 {
                return Err(Error::invalid("organ labels must be positive".to_string()));
            }
            if !labels.insert(organ.label) {
                return Err(Error::invalid(format!("duplicate organ label {}", organ.label)));
            }
            for a in 0..3 {
                if organ.radii[a] <= 0.0 {
                    return Err(Error::invalid(format!(
                        "organ {} has non-positive radius on axis {a}",
                        organ.label
                    )));
                }
                let half = self.shape[a] as f64 / 2.0;
                if organ.center_offset[a].abs() + organ.radii[a] > half {
                    return Err(Error::invalid(format!(
                        "organ {} does not fit inside the volume on axis {a} at zero noise",
                        organ.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of distinct label ids including background.
    pub fn num_classes(&self) -> usize {
        1 + self.organs.iter().map(|o| o.label as usize).max().unwrap_or(0)
    }
}

/// Render the phantom and its label map. Organs are processed in ascending
/// label order so higher ids win on overlap; deterministic given the seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, Array3<u8>)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");

    let mut data = Array3::<f32>::zeros((nx, ny, nz));
    for v in data.iter_mut() {
        *v = BACKGROUND_BASE + BACKGROUND_SPAN * rng.random::<f32>();
    }
    let mut labels = Array3::<u8>::zeros((nx, ny, nz));

    let vol_center = [
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    ];

    let mut organs = spec.organs.clone();
    organs.sort_by_key(|o| o.label);
    for organ in &organs {
        let mut center = [0.0f64; 3];
        for a in 0..3 {
            let noise = if organ.position_noise > 0.0 {
                organ.position_noise * normal.sample(&mut rng)
            } else {
                // preserve the rng stream layout across noise settings
                let _ = normal.sample(&mut rng);
                0.0
            };
            center[a] = vol_center[a] + organ.center_offset[a] + noise;
        }
        let reach = 1.0 + EDGE_WIDTH;
        let lo = |a: usize| ((center[a] - organ.radii[a] * reach).floor().max(0.0)) as usize;
        let hi = |a: usize| {
            ((center[a] + organ.radii[a] * reach).ceil() as usize).min(spec.shape[a] - 1)
        };
        for x in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for z in lo(2)..=hi(2) {
                    let d = (((x as f64 - center[0]) / organ.radii[0]).powi(2)
                        + ((y as f64 - center[1]) / organ.radii[1]).powi(2)
                        + ((z as f64 - center[2]) / organ.radii[2]).powi(2))
                    .sqrt();
                    if d <= 1.0 {
                        let texture = TEXTURE_AMPLITUDE * (rng.random::<f32>() * 2.0 - 1.0);
                        data[[x, y, z]] = (organ.intensity + texture).clamp(0.0, 1.0);
                        labels[[x, y, z]] = organ.label;
                    } else if d <= reach {
                        // soft shell: ramp to zero without claiming the label
                        let t = ((reach - d) / EDGE_WIDTH).clamp(0.0, 1.0) as f32;
                        let shell = organ.intensity * t * t * (3.0 - 2.0 * t);
                        let cur = data[[x, y, z]];
                        if shell > cur {
                            data[[x, y, z]] = shell;
                        }
                    }
                }
            }
        }
    }

    Ok((
        Volume {
            data,
            spacing: Some([1.0, 1.0, 1.0]),
            normalized: true,
        },
        labels,
    ))
}

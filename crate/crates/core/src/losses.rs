//! The vector-prediction loss, the boundary-focused reconstruction loss, and
//! the combined objective, with analytic gradients with respect to logits.
//!
//! All loss math runs in f64 so finite-difference gradient checks are
//! meaningful. Radial and polar logits pass through a sigmoid, azimuthal
//! logits through tanh; the azimuth term takes the minimum over the target
//! and its +/-2 wrap candidates (normalized units, i.e. phi/pi shifted by
//! +/-2pi/pi) so angles that are physically close stay close in the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VpTargetSet;

/// Raw pre-activation logits for n vectors: per vector (r_hat, theta_hat,
/// phi_hat).
#[derive(Clone, Debug, PartialEq)]
pub struct VpLogits {
    pub logits: Vec<[f64; 3]>,
}

/// Dense pre-sigmoid logits for the voxel and boundary reconstruction heads,
/// stored flattened with their common extents.
#[derive(Clone, Debug, PartialEq)]
pub struct BfrLogits {
    pub voxel: Vec<f64>,
    pub boundary: Vec<f64>,
    pub extents: [usize; 3],
}

/// Loss values and per-term diagnostics for one crop (or a batch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_vp: f64,
    pub l_bfr: f64,
    pub l_total: f64,
    pub r_mae: f64,
    pub theta_mae: f64,
    pub phi_mae: f64,
    pub voxel_mae: f64,
    pub boundary_mae: f64,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn wrap_to_unit(phi_norm: f64) -> f64 {
    // map into [-1, 1): wrap-equivalent targets give identical candidates
    let r = (phi_norm + 1.0).rem_euclid(2.0) - 1.0;
    if r.is_nan() {
        phi_norm
    } else {
        r
    }
}

/// The azimuth term: minimum absolute deviation over the three wrap
/// candidates. Ties break toward the first candidate in the listed order
/// (target, target-2, target+2) for deterministic gradients.
#[inline]
fn phi_term(phi_norm: f64, tanh_phi: f64) -> (f64, f64) {
    let base = wrap_to_unit(phi_norm);
    let candidates = [base, base - 2.0, base + 2.0];
    let mut best = candidates[0];
    let mut best_val = (candidates[0] - tanh_phi).abs();
    for &c in &candidates[1..] {
        let v = (c - tanh_phi).abs();
        if v < best_val {
            best_val = v;
            best = c;
        }
    }
    (best_val, best)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-component diagnostics of the VP loss (mean absolute deviations).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VpDiagnostics {
    pub r_mae: f64,
    pub theta_mae: f64,
    pub phi_mae: f64,
}

/// Mean over vectors of the three per-component absolute deviations.
pub fn vp_loss(logits: &VpLogits, targets: &VpTargetSet) -> Result<f64> {
    vp_loss_grad(logits, targets).map(|(l, _, _)| l)
}

/// VP loss with analytic gradients with respect to the raw logits.
pub fn vp_loss_grad(
    logits: &VpLogits,
    targets: &VpTargetSet,
) -> Result<(f64, Vec<[f64; 3]>, VpDiagnostics)> {
    let n = targets.len();
    if logits.logits.len() != n {
        return Err(Error::invalid(format!(
            "logit count {} does not match target count {}",
            logits.logits.len(),
            n
        )));
    }
    if n == 0 {
        return Ok((0.0, Vec::new(), VpDiagnostics::default()));
    }
    if logits.logits.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite VP logits".to_string()));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(n);
    let mut diag = VpDiagnostics::default();
    for (lg, t) in logits.logits.iter().zip(&targets.targets) {
        let sr = sigmoid(lg[0]);
        let st = sigmoid(lg[1]);
        let tp = lg[2].tanh();
        let dr = t.r_norm - sr;
        let dt = t.theta_norm - st;
        let (dp_abs, cand) = phi_term(t.phi_norm, tp);
        loss += dr.abs() + dt.abs() + dp_abs;
        diag.r_mae += dr.abs() * inv_n;
        diag.theta_mae += dt.abs() * inv_n;
        diag.phi_mae += dp_abs * inv_n;
        grads.push([
            -sign(dr) * sr * (1.0 - sr) * inv_n,
            -sign(dt) * st * (1.0 - st) * inv_n,
            -sign(cand - tp) * (1.0 - tp * tp) * inv_n,
        ]);
    }
    Ok((loss * inv_n, grads, diag))
}

/// Per-term diagnostics of the BFR loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BfrDiagnostics {
    pub voxel_mae: f64,
    pub boundary_mae: f64,
}

/// Mean absolute voxel deviation plus `alpha` times the mean absolute
/// boundary deviation, both against sigmoid-activated logits.
pub fn bfr_loss(
    logits: &BfrLogits,
    voxel_target: &[f64],
    boundary_target: &[f64],
    alpha: f64,
) -> Result<f64> {
    bfr_loss_grad(logits, voxel_target, boundary_target, alpha).map(|r| r.0)
}

/// BFR loss with analytic gradients with respect to the raw logits.
#[allow(clippy::type_complexity)]
pub fn bfr_loss_grad(
    logits: &BfrLogits,
    voxel_target: &[f64],
    boundary_target: &[f64],
    alpha: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, BfrDiagnostics)> {
    let n = logits.extents.iter().product::<usize>();
    if n == 0 {
        return Err(Error::invalid("empty BFR extents".to_string()));
    }
    if logits.voxel.len() != n
        || logits.boundary.len() != n
        || voxel_target.len() != n
        || boundary_target.len() != n
    {
        return Err(Error::invalid(format!(
            "BFR extent mismatch: extents {:?} ({n} voxels) vs logits {}/{} and targets {}/{}",
            logits.extents,
            logits.voxel.len(),
            logits.boundary.len(),
            voxel_target.len(),
            boundary_target.len()
        )));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    let inv_n = 1.0 / n as f64;
    let mut voxel_sum = 0.0;
    let mut boundary_sum = 0.0;
    let mut dv = Vec::with_capacity(n);
    let mut db = Vec::with_capacity(n);
    for i in 0..n {
        let sv = sigmoid(logits.voxel[i]);
        let d = voxel_target[i] - sv;
        voxel_sum += d.abs();
        dv.push(-sign(d) * sv * (1.0 - sv) * inv_n);

        let sb = sigmoid(logits.boundary[i]);
        let e = boundary_target[i] - sb;
        boundary_sum += e.abs();
        db.push(-alpha * sign(e) * sb * (1.0 - sb) * inv_n);
    }
    let voxel_mae = voxel_sum * inv_n;
    let boundary_mae = boundary_sum * inv_n;
    Ok((
        voxel_mae + alpha * boundary_mae,
        dv,
        db,
        BfrDiagnostics {
            voxel_mae,
            boundary_mae,
        },
    ))
}

/// The overall objective: `lambda * l_bfr + (1 - lambda) * l_vp`.
pub fn total_loss(l_vp: f64, l_bfr: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must be in [0,1], got {lambda}")));
    }
    Ok(lambda * l_bfr + (1.0 - lambda) * l_vp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SphericalTarget;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn targets_of(list: &[(f64, f64, f64)]) -> VpTargetSet {
        VpTargetSet {
            targets: list
                .iter()
                .map(|&(r, t, p)| SphericalTarget {
                    r_norm: r,
                    theta_norm: t,
                    phi_norm: p,
                })
                .collect(),
            radius: 1.0,
        }
    }

    #[test]
    fn vp_loss_zero_at_exact_inversion() {
        let targets = targets_of(&[(0.3, 0.6, 0.25), (0.9, 0.2, -0.7)]);
        let logits = VpLogits {
            logits: targets
                .targets
                .iter()
                .map(|t| [logit(t.r_norm), logit(t.theta_norm), t.phi_norm.atanh()])
                .collect(),
        };
        let loss = vp_loss(&logits, &targets).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn vp_loss_zero_logits_example() {
        // |0.8-0.5| + |0.304086...-0.5| + |0.25-0| with exact theta_norm
        let theta_norm = (1.0 / 3.0f64.sqrt()).acos() / std::f64::consts::PI;
        let targets = targets_of(&[(0.8, theta_norm, 0.25)]);
        let logits = VpLogits {
            logits: vec![[0.0, 0.0, 0.0]],
        };
        let loss = vp_loss(&logits, &targets).unwrap();
        assert!((loss - 0.745913).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn vp_loss_wrap_case() {
        // target phi = 179 deg; prediction at -179 deg equivalent:
        // min(1.988889, 0.011111, 3.988889)
        let phi_norm = 179.0 / 180.0;
        let targets = targets_of(&[(0.5, 0.5, phi_norm)]);
        let logits = VpLogits {
            logits: vec![[0.0, 0.0, (-phi_norm as f64).atanh()]],
        };
        // r and theta targets sit exactly at sigma(0), so only the wrap term remains
        let loss = vp_loss(&logits, &targets).unwrap();
        assert!((loss - 0.011111).abs() < 1e-6, "wrap term {loss}");
    }

    #[test]
    fn vp_loss_wrap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let phi: f64 = rng.random_range(-1.0..1.0);
            let lg = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let base = vp_loss(
                &VpLogits { logits: vec![lg] },
                &targets_of(&[(0.5, 0.5, phi)]),
            )
            .unwrap();
            for shift in [-2.0, 2.0] {
                let shifted = vp_loss(
                    &VpLogits { logits: vec![lg] },
                    &targets_of(&[(0.5, 0.5, phi + shift)]),
                )
                .unwrap();
                assert!((base - shifted).abs() < 1e-9, "phi {phi} shift {shift}");
            }
        }
    }

    #[test]
    fn vp_loss_bounded_by_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..500 {
            let targets = targets_of(&[(
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(-1.0..1.0),
            )]);
            let logits = VpLogits {
                logits: vec![[
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                ]],
            };
            let loss = vp_loss(&logits, &targets).unwrap();
            assert!((0.0..=4.0).contains(&loss), "loss {loss}");
        }
    }

    #[test]
    fn vp_loss_count_mismatch_rejected() {
        let targets = targets_of(&[(0.5, 0.5, 0.0)]);
        let logits = VpLogits {
            logits: vec![[0.0; 3], [0.0; 3]],
        };
        assert!(vp_loss(&logits, &targets).is_err());
    }

    fn bfr_fixture(extents: [usize; 3], fill_logit: f64) -> BfrLogits {
        let n = extents.iter().product();
        BfrLogits {
            voxel: vec![fill_logit; n],
            boundary: vec![fill_logit; n],
            extents,
        }
    }

    #[test]
    fn bfr_loss_zero_at_exact_inversion() {
        let ext = [4usize, 4, 4];
        let n: usize = ext.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let vt: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let bt: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let logits = BfrLogits {
            voxel: vt.iter().map(|&t| logit(t)).collect(),
            boundary: bt.iter().map(|&t| logit(t)).collect(),
            extents: ext,
        };
        let loss = bfr_loss(&logits, &vt, &bt, 5.0).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn bfr_voxel_term_uniform_deviation() {
        // target 1.0, sigma(0) = 0.5, boundary zeroed (targets at sigma(0))
        let ext = [4usize, 4, 4];
        let n: usize = ext.iter().product();
        let logits = bfr_fixture(ext, 0.0);
        let loss = bfr_loss(&logits, &vec![1.0; n], &vec![0.5; n], 5.0).unwrap();
        assert!((loss - 0.5).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn bfr_alpha_linearity() {
        // uniform boundary deviation 0.1: alpha=5 -> 0.5, alpha=1 -> 0.1
        let ext = [4usize, 4, 4];
        let n: usize = ext.iter().product();
        let logits = bfr_fixture(ext, 0.0);
        let vt = vec![0.5; n];
        let bt = vec![0.6; n];
        let l5 = bfr_loss(&logits, &vt, &bt, 5.0).unwrap();
        let l1 = bfr_loss(&logits, &vt, &bt, 1.0).unwrap();
        assert!((l5 - 0.5).abs() < 1e-12, "alpha=5: {l5}");
        assert!((l1 - 0.1).abs() < 1e-12, "alpha=1: {l1}");
    }

    #[test]
    fn bfr_extent_mismatch_rejected() {
        let logits = bfr_fixture([4, 4, 4], 0.0);
        assert!(bfr_loss(&logits, &vec![0.5; 10], &vec![0.5; 64], 5.0).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.4, 0.6, 0.5).unwrap(), 0.5);
        assert_eq!(total_loss(0.4, 0.6, 1.0).unwrap(), 0.6);
        assert_eq!(total_loss(0.4, 0.6, 0.0).unwrap(), 0.4);
        let combined = total_loss(0.745913, 0.0, 0.5).unwrap();
        assert!((combined - 0.372957).abs() < 1e-6);
        assert!(total_loss(0.1, 0.1, 1.5).is_err());
        assert!(total_loss(0.1, 0.1, -0.1).is_err());
    }

    /// Central-difference gradient check on the total loss, away from kinks
    /// and wrap-candidate ties.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let step = 1e-4;
        let margin = 1e-3;
        for _ in 0..100 {
            // sample a clear-of-kinks instance
            let n = 3usize;
            let mut t = Vec::new();
            let mut lg = Vec::new();
            for _ in 0..n {
                loop {
                    let tr = rng.random_range(0.05..0.95);
                    let tt = rng.random_range(0.05..0.95);
                    let tp: f64 = rng.random_range(-0.95..0.95);
                    let l: [f64; 3] = [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-1.5..1.5),
                    ];
                    let th = l[2].tanh();
                    let clear = (tr - sigmoid(l[0])).abs() > margin
                        && (tt - sigmoid(l[1])).abs() > margin
                        && (tp - th).abs() > margin
                        && ((tp - 2.0 - th).abs() - (tp - th).abs()).abs() > margin
                        && ((tp + 2.0 - th).abs() - (tp - th).abs()).abs() > margin;
                    if clear {
                        t.push((tr, tt, tp));
                        lg.push(l);
                        break;
                    }
                }
            }
            let targets = targets_of(&t);
            let ext = [3usize, 3, 3];
            let nv: usize = ext.iter().product();
            let mut vt = Vec::new();
            let mut bt = Vec::new();
            let mut vl = Vec::new();
            let mut bl = Vec::new();
            for _ in 0..nv {
                loop {
                    let tv = rng.random_range(0.05..0.95);
                    let l: f64 = rng.random_range(-2.0..2.0);
                    if (tv - sigmoid(l)).abs() > margin {
                        vt.push(tv);
                        vl.push(l);
                        break;
                    }
                }
                loop {
                    let tb = rng.random_range(0.05..0.95);
                    let l: f64 = rng.random_range(-2.0..2.0);
                    if (tb - sigmoid(l)).abs() > margin {
                        bt.push(tb);
                        bl.push(l);
                        break;
                    }
                }
            }
            let lambda = rng.random_range(0.1..0.9);
            let alpha = rng.random_range(0.5..6.0);

            let eval = |vp: &[[f64; 3]], voxel: &[f64], boundary: &[f64]| -> f64 {
                let lv = vp_loss(&VpLogits { logits: vp.to_vec() }, &targets).unwrap();
                let lb = bfr_loss(
                    &BfrLogits {
                        voxel: voxel.to_vec(),
                        boundary: boundary.to_vec(),
                        extents: ext,
                    },
                    &vt,
                    &bt,
                    alpha,
                )
                .unwrap();
                total_loss(lv, lb, lambda).unwrap()
            };

            let (_, vp_g, _) = vp_loss_grad(&VpLogits { logits: lg.clone() }, &targets).unwrap();
            let (_, dv, db, _) = bfr_loss_grad(
                &BfrLogits {
                    voxel: vl.clone(),
                    boundary: bl.clone(),
                    extents: ext,
                },
                &vt,
                &bt,
                alpha,
            )
            .unwrap();

            let check = |analytic: f64, numeric: f64| {
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                let rel = (analytic - numeric).abs() / denom;
                assert!(rel < 1e-4, "analytic {analytic}, numeric {numeric}, rel {rel}");
            };

            // VP logits (scaled by 1 - lambda in the total objective)
            for m in 0..n {
                for c in 0..3 {
                    let mut plus = lg.clone();
                    plus[m][c] += step;
                    let mut minus = lg.clone();
                    minus[m][c] -= step;
                    let numeric = (eval(&plus, &vl, &bl) - eval(&minus, &vl, &bl)) / (2.0 * step);
                    check((1.0 - lambda) * vp_g[m][c], numeric);
                }
            }
            // a few random BFR logits (scaled by lambda)
            for _ in 0..4 {
                let i = rng.random_range(0..nv);
                let mut plus = vl.clone();
                plus[i] += step;
                let mut minus = vl.clone();
                minus[i] -= step;
                let numeric = (eval(&lg, &plus, &bl) - eval(&lg, &minus, &bl)) / (2.0 * step);
                check(lambda * dv[i], numeric);

                let mut plus = bl.clone();
                plus[i] += step;
                let mut minus = bl.clone();
                minus[i] -= step;
                let numeric = (eval(&lg, &vl, &plus) - eval(&lg, &vl, &minus)) / (2.0 * step);
                check(lambda * db[i], numeric);
            }
        }
    }

    #[test]
    fn loss_terms_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..100 {
            let targets = targets_of(&[(
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(-1.0..1.0),
            )]);
            let logits = VpLogits {
                logits: vec![[
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ]],
            };
            assert!(vp_loss(&logits, &targets).unwrap() >= 0.0);
        }
    }
}

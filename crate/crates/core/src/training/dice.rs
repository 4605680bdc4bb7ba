//! Dice-Sørensen overlap between label maps.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Per-class and mean Dice over foreground classes. Classes absent from
/// both prediction and target are excluded from the mean (`None` per class);
/// when no foreground class is present anywhere the mean is 1.0 (identical
/// all-background labelings agree vacuously).
#[derive(Clone, Debug, PartialEq)]
pub struct DiceScore {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn dice_score(
    prediction: &Array3<u8>,
    target: &Array3<u8>,
    num_classes: usize,
) -> Result<DiceScore> {
    if prediction.dim() != target.dim() {
        return Err(Error::invalid(format!(
            "extent mismatch: prediction {:?} vs target {:?}",
            prediction.dim(),
            target.dim()
        )));
    }
    if num_classes < 2 {
        return Err(Error::invalid("num_classes must be >= 2".to_string()));
    }
    let mut pred_count = vec![0u64; num_classes];
    let mut targ_count = vec![0u64; num_classes];
    let mut inter_count = vec![0u64; num_classes];
    for (&p, &t) in prediction.iter().zip(target.iter()) {
        let (p, t) = (p as usize, t as usize);
        if p >= num_classes || t >= num_classes {
            return Err(Error::invalid(format!(
                "label out of range: prediction {p}, target {t}, classes {num_classes}"
            )));
        }
        pred_count[p] += 1;
        targ_count[t] += 1;
        if p == t {
            inter_count[p] += 1;
        }
    }
    let mut per_class = vec![None; num_classes];
    let mut sum = 0.0;
    let mut included = 0usize;
    for c in 1..num_classes {
        let denom = pred_count[c] + targ_count[c];
        if denom == 0 {
            continue;
        }
        let d = 2.0 * inter_count[c] as f64 / denom as f64;
        per_class[c] = Some(d);
        sum += d;
        included += 1;
    }
    let mean = if included == 0 { 1.0 } else { sum / included as f64 };
    Ok(DiceScore { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(vals: &[u8], n: usize) -> Array3<u8> {
        Array3::from_shape_vec((n, n, n), vals.to_vec()).unwrap()
    }

    #[test]
    fn identical_masks_score_one() {
        let a = labels(&[0, 1, 2, 1, 0, 2, 1, 2], 2);
        let d = dice_score(&a, &a, 3).unwrap();
        assert_eq!(d.mean, 1.0);
        assert_eq!(d.per_class[1], Some(1.0));
        assert_eq!(d.per_class[2], Some(1.0));
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = labels(&[1, 1, 0, 0, 0, 0, 0, 0], 2);
        let b = labels(&[0, 0, 1, 1, 0, 0, 0, 0], 2);
        let d = dice_score(&a, &b, 2).unwrap();
        assert_eq!(d.mean, 0.0);
    }

    #[test]
    fn half_overlap_scores_half() {
        // |P| = 100, |T| = 100, overlap 50 -> 2*50/200 = 0.5
        let mut p = Array3::<u8>::zeros((10, 10, 10));
        let mut t = Array3::<u8>::zeros((10, 10, 10));
        for i in 0..100usize {
            p[[i / 100, (i / 10) % 10, i % 10]] = 1;
        }
        for i in 50..150usize {
            t[[i / 100, (i / 10) % 10, i % 10]] = 1;
        }
        let d = dice_score(&p, &t, 2).unwrap();
        assert_eq!(d.mean, 0.5);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let a = labels(&[0, 1, 1, 0, 0, 0, 0, 0], 2);
        let b = labels(&[0, 1, 0, 0, 0, 0, 0, 0], 2);
        // class 2 exists in neither: excluded, not zero
        let d = dice_score(&a, &b, 3).unwrap();
        assert_eq!(d.per_class[2], None);
        assert!((d.mean - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bounds_and_errors() {
        let a = labels(&[0; 8], 2);
        let d = dice_score(&a, &a, 4).unwrap();
        assert_eq!(d.mean, 1.0);

        let b = labels(&[0; 27], 3);
        assert!(dice_score(&a, &b, 2).is_err());
        let c = labels(&[9; 8], 2);
        assert!(dice_score(&a, &c, 2).is_err());
    }
}

//! Datasets: deterministic phantom collections and on-disk volume/label
//! directories with a 6:2:2 train/validation/test split.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::load_volume;
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::training::seeds;
use crate::volume::{normalize, Volume};

#[derive(Clone, Debug)]
pub struct LabeledVolume {
    pub id: String,
    pub volume: Volume,
    pub labels: Option<Array3<u8>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<LabeledVolume>,
    pub val: Vec<LabeledVolume>,
    pub test: Vec<LabeledVolume>,
    /// Label classes including background.
    pub num_classes: usize,
}

impl Dataset {
    pub fn summary(&self) -> String {
        format!(
            "{} train / {} val / {} test volumes, {} classes",
            self.train.len(),
            self.val.len(),
            self.test.len(),
            self.num_classes
        )
    }
}

/// Phantom dataset parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomDatasetConfig {
    pub seed: u64,
    pub shape: [usize; 3],
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Std-dev of per-volume organ position noise, in voxels.
    pub position_noise: f64,
}

impl Default for PhantomDatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            shape: [48, 48, 48],
            train: 12,
            val: 3,
            test: 3,
            position_noise: 1.5,
        }
    }
}

const SPLIT_TRAIN: u64 = 101;
const SPLIT_VAL: u64 = 102;
const SPLIT_TEST: u64 = 103;

fn phantom_split(cfg: &PhantomDatasetConfig, tag: u64, name: &str, count: usize) -> Result<Vec<LabeledVolume>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let spec = PhantomSpec::with_default_organs(
            seeds::mix(&[cfg.seed, tag, i as u64]),
            cfg.shape,
            cfg.position_noise,
        );
        let (volume, labels) = generate_phantom(&spec)?;
        out.push(LabeledVolume {
            id: format!("phantom-{name}-{i:03}"),
            volume,
            labels: Some(labels),
        });
    }
    Ok(out)
}

/// Deterministic phantom dataset; per-volume seeds derive from the base
/// seed, the split, and the index.
pub fn phantom_dataset(cfg: &PhantomDatasetConfig) -> Result<Dataset> {
    if cfg.train == 0 {
        return Err(Error::invalid("phantom dataset needs at least one training volume".to_string()));
    }
    let spec = PhantomSpec::with_default_organs(0, cfg.shape, cfg.position_noise);
    spec.validate()?;
    Ok(Dataset {
        train: phantom_split(cfg, SPLIT_TRAIN, "train", cfg.train)?,
        val: phantom_split(cfg, SPLIT_VAL, "val", cfg.val)?,
        test: phantom_split(cfg, SPLIT_TEST, "test", cfg.test)?,
        num_classes: spec.num_classes(),
    })
}

fn stem_of(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.trim_end_matches(".nii.gz")
        .trim_end_matches(".nii")
        .trim_end_matches(".rvol")
        .to_string()
}

/// Load a dataset from `dir` with an `images/` subdirectory and an optional
/// `labels/` subdirectory holding files with matching stems. Volumes are
/// normalized to [0,1] with the given clipping percentiles. The split is
/// 6:2:2 over the stem-sorted list unless `train.txt`/`val.txt`/`test.txt`
/// name the stems explicitly.
pub fn load_dataset(dir: &Path, clip_lo_pct: f64, clip_hi_pct: f64) -> Result<Dataset> {
    let images_dir = dir.join("images");
    let labels_dir = dir.join("labels");
    if !images_dir.is_dir() {
        return Err(Error::format(dir, "dataset directory must contain images/"));
    }
    let mut stems: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
        let path = entry.path();
        if path.is_file() {
            stems.push((stem_of(&path), path));
        }
    }
    stems.sort_by(|a, b| a.0.cmp(&b.0));
    if stems.is_empty() {
        return Err(Error::format(&images_dir, "no volumes found"));
    }

    let read_split = |name: &str| -> Result<Option<Vec<String>>> {
        let path = dir.join(name);
        if !path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(
            text.lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect(),
        ))
    };

    let load_one = |stem: &str, path: &Path| -> Result<LabeledVolume> {
        let raw = load_volume(path)?;
        let volume = normalize(&raw, clip_lo_pct, clip_hi_pct)?;
        let mut labels = None;
        if labels_dir.is_dir() {
            for ext in ["nii.gz", "nii", "rvol"] {
                let lp = labels_dir.join(format!("{stem}.{ext}"));
                if lp.is_file() {
                    let lv = load_volume(&lp)?;
                    if lv.shape() != volume.shape() {
                        return Err(Error::format(
                            &lp,
                            format!("label shape {:?} != image shape {:?}", lv.shape(), volume.shape()),
                        ));
                    }
                    labels = Some(lv.data.mapv(|v| v.round().clamp(0.0, 255.0) as u8));
                    break;
                }
            }
        }
        Ok(LabeledVolume {
            id: stem.to_string(),
            volume,
            labels,
        })
    };

    let (train_stems, val_stems, test_stems) = match (
        read_split("train.txt")?,
        read_split("val.txt")?,
        read_split("test.txt")?,
    ) {
        (Some(tr), Some(va), Some(te)) => (tr, va, te),
        _ => {
            // 6:2:2 by sorted order
            let n = stems.len();
            let n_train = (n * 6) / 10;
            let n_val = (n * 2) / 10;
            let all: Vec<String> = stems.iter().map(|(s, _)| s.clone()).collect();
            (
                all[..n_train.max(1)].to_vec(),
                all[n_train.max(1)..(n_train.max(1) + n_val)].to_vec(),
                all[(n_train.max(1) + n_val)..].to_vec(),
            )
        }
    };

    let by_stem: std::collections::HashMap<&str, &std::path::PathBuf> =
        stems.iter().map(|(s, p)| (s.as_str(), p)).collect();
    let load_list = |names: &[String]| -> Result<Vec<LabeledVolume>> {
        names
            .iter()
            .map(|s| {
                let path = by_stem.get(s.as_str()).ok_or_else(|| {
                    Error::format(dir, format!("split names unknown volume `{s}`"))
                })?;
                load_one(s, path)
            })
            .collect()
    };
    let train = load_list(&train_stems)?;
    let val = load_list(&val_stems)?;
    let test = load_list(&test_stems)?;
    let num_classes = train
        .iter()
        .chain(&val)
        .chain(&test)
        .filter_map(|v| v.labels.as_ref())
        .map(|l| l.iter().copied().max().unwrap_or(0) as usize + 1)
        .max()
        .unwrap_or(2);
    Ok(Dataset {
        train,
        val,
        test,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::save_volume;

    #[test]
    fn phantom_dataset_is_deterministic_and_structured() {
        let cfg = PhantomDatasetConfig {
            train: 3,
            val: 1,
            test: 1,
            shape: [32, 32, 32],
            ..PhantomDatasetConfig::default()
        };
        let a = phantom_dataset(&cfg).unwrap();
        let b = phantom_dataset(&cfg).unwrap();
        assert_eq!(a.train.len(), 3);
        assert_eq!(a.num_classes, 7);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.volume.data, y.volume.data);
        }
        // distinct volumes across indices and splits
        assert_ne!(a.train[0].volume.data, a.train[1].volume.data);
        assert_ne!(a.train[0].volume.data, a.val[0].volume.data);
    }

    #[test]
    fn disk_dataset_round_trip_with_split_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("labels")).unwrap();
        let cfg = PhantomDatasetConfig {
            train: 2,
            val: 1,
            test: 1,
            shape: [24, 24, 24],
            ..PhantomDatasetConfig::default()
        };
        let ds = phantom_dataset(&cfg).unwrap();
        let mut names = Vec::new();
        for v in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            let img = dir.path().join("images").join(format!("{}.rvol", v.id));
            save_volume(&v.volume, &img).unwrap();
            let lab_vol = Volume::new(v.labels.as_ref().unwrap().mapv(|l| l as f32));
            let lab = dir.path().join("labels").join(format!("{}.rvol", v.id));
            save_volume(&lab_vol, &lab).unwrap();
            names.push(v.id.clone());
        }
        std::fs::write(dir.path().join("train.txt"), format!("{}\n{}\n", names[0], names[1])).unwrap();
        std::fs::write(dir.path().join("val.txt"), format!("{}\n", names[2])).unwrap();
        std::fs::write(dir.path().join("test.txt"), format!("{}\n", names[3])).unwrap();

        let loaded = load_dataset(dir.path(), 0.0, 100.0).unwrap();
        assert_eq!(loaded.train.len(), 2);
        assert_eq!(loaded.val.len(), 1);
        assert_eq!(loaded.test.len(), 1);
        assert_eq!(loaded.num_classes, 7);
        assert!(loaded.train[0].volume.normalized);
        assert_eq!(
            loaded.train[0].labels.as_ref().unwrap(),
            ds.train[0].labels.as_ref().unwrap()
        );
    }

    #[test]
    fn missing_images_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), 0.0, 100.0).is_err());
    }
}

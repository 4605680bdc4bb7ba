//! Ablation grid over the reconstruction and vector-prediction components:
//! pretrain + fine-tune per cell with shared seeds, emitting a CSV table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{IntensityNoiseConfig, SpatialAugmentConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::finetune::{run_finetune, FinetuneConfig};
use crate::training::pretrain::{run_pretrain, PretrainConfig};

/// One ablation configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    /// Objective mix; 1.0 disables VP entirely.
    pub lambda: f64,
    /// Boundary term scale; 0.0 disables boundary reconstruction.
    pub alpha: f64,
    pub n_vectors: usize,
}

impl AblationCell {
    pub fn new(name: &str, lambda: f64, alpha: f64, n_vectors: usize) -> Self {
        Self {
            name: name.to_string(),
            lambda,
            alpha,
            n_vectors,
        }
    }
}

/// The six-cell grid mirroring the paper's component ablation: voxel
/// reconstruction only, plus boundary reconstruction, plus the center
/// vector, then 1, 4, and 8 corner vectors.
pub fn table2_cells() -> Vec<AblationCell> {
    vec![
        AblationCell::new("voxel", 1.0, 0.0, 0),
        AblationCell::new("voxel+boundary", 1.0, 5.0, 0),
        AblationCell::new("+center_vector", 0.5, 5.0, 1),
        AblationCell::new("+1_corner", 0.5, 5.0, 2),
        AblationCell::new("+4_corners", 0.5, 5.0, 5),
        AblationCell::new("+8_corners", 0.5, 5.0, 9),
    ]
}

/// The four-cell subset used by the acceptance gate.
pub fn acceptance_cells() -> Vec<AblationCell> {
    vec![
        AblationCell::new("voxel", 1.0, 0.0, 0),
        AblationCell::new("voxel+boundary", 1.0, 5.0, 0),
        AblationCell::new("+center_vector", 0.5, 5.0, 1),
        AblationCell::new("+9_vectors", 0.5, 5.0, 9),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub per_seed_dice: Vec<f64>,
    pub mean_dice: f64,
    pub std_dice: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub finetune_seeds: Vec<u64>,
}

impl AblationTable {
    /// Deterministic CSV rendering, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,lambda,alpha,n_vectors");
        for s in &self.finetune_seeds {
            out.push_str(&format!(",dice_seed_{s}"));
        }
        out.push_str(",mean_dice,std_dice\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                row.cell.name, row.cell.lambda, row.cell.alpha, row.cell.n_vectors
            ));
            for d in &row.per_seed_dice {
                out.push_str(&format!(",{d:.6}"));
            }
            out.push_str(&format!(",{:.6},{:.6}\n", row.mean_dice, row.std_dice));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Run the grid: per cell, one pretraining run (shared pretrain seed) and
/// one fine-tuning run per seed (shared seed list across cells).
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    cells: &[AblationCell],
    net_cfg: &NetworkConfig,
    pre_cfg: &PretrainConfig,
    spatial_cfg: &SpatialAugmentConfig,
    intensity_cfg: &IntensityNoiseConfig,
    ft_cfg: &FinetuneConfig,
    dataset: &Dataset,
    finetune_seeds: &[u64],
    mut on_progress: impl FnMut(&str),
) -> Result<AblationTable> {
    if cells.is_empty() || finetune_seeds.is_empty() {
        return Err(Error::invalid("ablation needs cells and seeds".to_string()));
    }
    let mut rows = Vec::new();
    for cell in cells {
        on_progress(&format!("cell `{}`: pretraining", cell.name));
        let cell_net = NetworkConfig {
            n_vectors: cell.n_vectors,
            seg_classes: None,
            ..net_cfg.clone()
        };
        let cell_pre = PretrainConfig {
            lambda: cell.lambda,
            alpha: cell.alpha,
            ..pre_cfg.clone()
        };
        let trainer = run_pretrain(
            cell_net,
            &cell_pre,
            spatial_cfg,
            intensity_cfg,
            &dataset.train,
            |_| Ok(()),
            |_, _| Ok(()),
        )?;
        let pretrained: Vec<(String, crate::nn::Tensor<f32>)> = trainer
            .net
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();

        let ft_net = NetworkConfig {
            n_vectors: cell.n_vectors,
            seg_classes: Some(dataset.num_classes),
            ..net_cfg.clone()
        };
        let mut per_seed = Vec::new();
        for &seed in finetune_seeds {
            on_progress(&format!("cell `{}`: fine-tuning seed {seed}", cell.name));
            let outcome = run_finetune(
                Some(&pretrained),
                &ft_net,
                &FinetuneConfig {
                    seed,
                    ..ft_cfg.clone()
                },
                dataset,
                seed,
                |_| Ok(()),
            )?;
            per_seed.push(outcome.best_val_dice);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        let var = per_seed
            .iter()
            .map(|d| (d - mean) * (d - mean))
            .sum::<f64>()
            / per_seed.len() as f64;
        rows.push(AblationRow {
            cell: cell.clone(),
            per_seed_dice: per_seed,
            mean_dice: mean,
            std_dice: var.sqrt(),
        });
    }
    Ok(AblationTable {
        rows,
        finetune_seeds: finetune_seeds.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table2_grid_has_six_deterministically_ordered_cells() {
        let cells = table2_cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0].name, "voxel");
        assert_eq!(cells[0].n_vectors, 0);
        assert_eq!(cells[5].n_vectors, 9);
        // voxel-only cell is the plain-reconstruction control
        assert_eq!(cells[0].lambda, 1.0);
        assert_eq!(cells[0].alpha, 0.0);
    }

    #[test]
    fn csv_rendering_is_deterministic() {
        let table = AblationTable {
            rows: vec![AblationRow {
                cell: AblationCell::new("voxel", 1.0, 0.0, 0),
                per_seed_dice: vec![0.5, 0.6],
                mean_dice: 0.55,
                std_dice: 0.05,
            }],
            finetune_seeds: vec![1, 2],
        };
        let a = table.to_csv();
        let b = table.to_csv();
        assert_eq!(a, b);
        assert!(a.starts_with("cell,lambda,alpha,n_vectors,dice_seed_1,dice_seed_2"));
        assert!(a.contains("voxel,1,0,0,0.500000,0.600000,0.550000,0.050000"));
    }
}

//! The pretraining loop: crop -> spatial augmentation -> target computation
//! -> intensity noising -> forward -> combined loss -> update.
//!
//! All targets (voxel reconstruction, boundary, vector prediction) derive
//! from the post-spatial, pre-intensity crop; intensity noise touches the
//! network input only.

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_intensity, apply_spatial, sample_spatial, IntensityNoiseConfig, SpatialAugmentConfig,
    TransformRecord,
};
use crate::boundary::boundary_target;
use crate::dataset::LabeledVolume;
use crate::error::{Error, Result};
use crate::geometry::{circumscribing_radius, make_origin_points, vp_targets, OriginLayout, VpTargetSet};
use crate::losses::{bfr_loss_grad, total_loss, vp_loss_grad, BfrLogits, LossBreakdown, VpLogits};
use crate::network::{NetworkConfig, VectorPoseNet};
use crate::nn::adamw::{AdamW, AdamWConfig};
use crate::nn::Tensor;
use crate::training::metrics::PretrainRecord;
use crate::training::seeds::{self, stream};
use crate::volume::{sample_crop, trilinear_resize, CropPlacement, CropSampler, Volume};

/// Pretraining hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub crop_extents: [usize; 3],
    /// Crops sampled per volume per epoch.
    pub crops_per_volume: usize,
    /// Landmark jitter fraction.
    pub eta: f64,
    /// Boundary-term scale.
    pub alpha: f64,
    /// Objective mix: lambda * bfr + (1 - lambda) * vp.
    pub lambda: f64,
    pub seed: u64,
    pub deterministic: bool,
    /// Checkpoint every N epochs (a final checkpoint is always written).
    pub checkpoint_every: usize,
    /// Optional multiplicative crop-scale jitter range (off by default).
    pub scale_jitter: Option<(f64, f64)>,
    pub background_threshold: f32,
    pub min_informative_fraction: f64,
    pub sample_retries: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 12,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            crop_extents: [96, 96, 96],
            crops_per_volume: 16,
            eta: 0.05,
            alpha: 5.0,
            lambda: 0.5,
            seed: 0,
            deterministic: false,
            checkpoint_every: 50,
            scale_jitter: None,
            background_threshold: 0.01,
            min_informative_fraction: 0.1,
            sample_retries: 50,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.crops_per_volume == 0 {
            return Err(Error::config(
                "pretrain.epochs",
                "epochs, batch_size, and crops_per_volume must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(
                "pretrain.lambda",
                format!("must be in [0,1], got {}", self.lambda),
            ));
        }
        if !(0.0..0.5).contains(&self.eta) {
            return Err(Error::config(
                "pretrain.eta",
                format!("must be in [0, 0.5), got {}", self.eta),
            ));
        }
        if self.alpha < 0.0 {
            return Err(Error::config("pretrain.alpha", "must be >= 0"));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config(
                "pretrain.learning_rate",
                "learning rate must be positive and weight decay non-negative",
            ));
        }
        if let Some((lo, hi)) = self.scale_jitter {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::config("pretrain.scale_jitter", "need 0 < lo <= hi"));
            }
        }
        Ok(())
    }

    pub fn sampler(&self) -> CropSampler {
        CropSampler {
            background_threshold: self.background_threshold,
            min_informative_fraction: self.min_informative_fraction,
            max_retries: self.sample_retries,
            eta: self.eta,
        }
    }
}

/// One training example: the noised input, the clean (post-spatial) crop and
/// its derived targets, and the geometry needed to recompute them.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub input: Array3<f32>,
    pub clean: Array3<f32>,
    pub boundary: Array3<f32>,
    pub vp: VpTargetSet,
    pub placement: CropPlacement,
    pub record: TransformRecord,
    /// Seed that generated this example, for divergence reports.
    pub seed: u64,
}

/// Deterministically build one example from a volume and a seed bundle.
#[allow(clippy::too_many_arguments)]
pub fn build_example(
    volume: &Volume,
    volume_id: &str,
    cfg: &PretrainConfig,
    n_vectors: usize,
    spatial_cfg: &SpatialAugmentConfig,
    intensity_cfg: &IntensityNoiseConfig,
    base_seed: u64,
    coords: [u64; 2],
) -> Result<TrainExample> {
    let crop_seed = seeds::mix(&[base_seed, stream::CROP, coords[0], coords[1]]);
    let mut crop_rng = seeds::rng_for(base_seed, stream::CROP, &coords);
    let sampler = cfg.sampler();
    let shape = volume.shape();

    let mut sampled_extents = cfg.crop_extents;
    if let Some((lo, hi)) = cfg.scale_jitter {
        use rand::Rng;
        let s: f64 = crop_rng.random_range(lo..=hi);
        for a in 0..3 {
            let scaled = ((cfg.crop_extents[a] as f64) * s).round() as usize;
            sampled_extents[a] = scaled.clamp(2, shape[a]);
        }
    }
    let (raw_crop, placement) =
        sample_crop(volume, volume_id, sampled_extents, &sampler, &mut crop_rng)?;
    let data = if sampled_extents != cfg.crop_extents {
        trilinear_resize(&raw_crop, cfg.crop_extents)
    } else {
        raw_crop
    };

    let mut ts_rng = seeds::rng_for(base_seed, stream::SPATIAL, &coords);
    let record = sample_spatial(&mut ts_rng, spatial_cfg);
    let clean = apply_spatial(&data, &record)?;

    let vp = if n_vectors > 0 {
        let layout = OriginLayout::for_point_count(n_vectors)?;
        let origins = make_origin_points(cfg.crop_extents, layout)?;
        let radius = circumscribing_radius(shape)?;
        vp_targets(&placement, &record, &origins, &placement.landmark, radius)?
    } else {
        VpTargetSet {
            targets: Vec::new(),
            radius: circumscribing_radius(shape)?,
        }
    };

    let boundary = boundary_target(&clean)?.magnitude;

    let mut ti_rng = seeds::rng_for(base_seed, stream::INTENSITY, &coords);
    let input = apply_intensity(&clean, intensity_cfg, &mut ti_rng)?;

    Ok(TrainExample {
        input,
        clean,
        boundary,
        vp,
        placement,
        record,
        seed: crop_seed,
    })
}

/// Network, optimizer, and counters for one pretraining run.
pub struct Trainer {
    pub net: VectorPoseNet,
    pub optim: AdamW,
    pub epoch: usize,
    pub global_step: usize,
    pub base_seed: u64,
    pub lambda: f64,
    pub alpha: f64,
}

impl Trainer {
    pub fn new(net_cfg: NetworkConfig, cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = VectorPoseNet::new(net_cfg, seeds::mix(&[cfg.seed, stream::INIT]))?;
        let optim = AdamW::new(
            &net.params,
            AdamWConfig {
                learning_rate: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
        );
        Ok(Self {
            net,
            optim,
            epoch: 0,
            global_step: 0,
            base_seed: cfg.seed,
            lambda: cfg.lambda,
            alpha: cfg.alpha,
        })
    }

    /// One optimizer update on a batch of examples.
    pub fn step(&mut self, batch: &[TrainExample]) -> Result<LossBreakdown> {
        let bsz = batch.len();
        assert!(bsz > 0, "empty batch");
        let ext = {
            let d = batch[0].input.dim();
            [d.0, d.1, d.2]
        };
        let vol = ext.iter().product::<usize>();
        let n_vectors = self.net.cfg.n_vectors;

        let mut input = Tensor::<f32>::zeros(&[bsz, 1, ext[0], ext[1], ext[2]]);
        for (i, ex) in batch.iter().enumerate() {
            let slab = &mut input.data_mut()[i * vol..(i + 1) * vol];
            for (dst, src) in slab.iter_mut().zip(ex.input.iter()) {
                *dst = *src;
            }
        }

        let (vp_logits, bfr_logits, tape) = self.net.forward_pretrain(&input, true)?;
        let tape = tape.expect("training tape");

        let mut d_vp = Tensor::<f32>::zeros(vp_logits.shape());
        let mut d_bfr = Tensor::<f32>::zeros(bfr_logits.shape());
        let inv_b = 1.0 / bsz as f64;
        let vp_scale = (1.0 - self.lambda) * inv_b;
        let bfr_scale = self.lambda * inv_b;

        let mut agg = LossBreakdown::default();
        for (i, ex) in batch.iter().enumerate() {
            // vector-prediction term
            let l_vp_i = if n_vectors > 0 {
                let logits = VpLogits {
                    logits: (0..n_vectors)
                        .map(|m| {
                            let at = (i * n_vectors + m) * 3;
                            [
                                vp_logits.data()[at] as f64,
                                vp_logits.data()[at + 1] as f64,
                                vp_logits.data()[at + 2] as f64,
                            ]
                        })
                        .collect(),
                };
                let (l, grads, diag) = vp_loss_grad(&logits, &ex.vp)?;
                for (m, g) in grads.iter().enumerate() {
                    let at = (i * n_vectors + m) * 3;
                    for c in 0..3 {
                        d_vp.data_mut()[at + c] = (g[c] * vp_scale) as f32;
                    }
                }
                agg.r_mae += diag.r_mae * inv_b;
                agg.theta_mae += diag.theta_mae * inv_b;
                agg.phi_mae += diag.phi_mae * inv_b;
                l
            } else {
                0.0
            };

            // reconstruction terms: channel 0 voxel, channel 1 boundary
            let base = i * 2 * vol;
            let logits = BfrLogits {
                voxel: bfr_logits.data()[base..base + vol]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
                boundary: bfr_logits.data()[base + vol..base + 2 * vol]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
                extents: ext,
            };
            let voxel_target: Vec<f64> = ex.clean.iter().map(|&v| v as f64).collect();
            let boundary_tgt: Vec<f64> = ex.boundary.iter().map(|&v| v as f64).collect();
            let (l_bfr_i, dv, db, bdiag) =
                bfr_loss_grad(&logits, &voxel_target, &boundary_tgt, self.alpha)?;
            for (j, g) in dv.iter().enumerate() {
                d_bfr.data_mut()[base + j] = (g * bfr_scale) as f32;
            }
            for (j, g) in db.iter().enumerate() {
                d_bfr.data_mut()[base + vol + j] = (g * bfr_scale) as f32;
            }
            agg.voxel_mae += bdiag.voxel_mae * inv_b;
            agg.boundary_mae += bdiag.boundary_mae * inv_b;
            agg.l_vp += l_vp_i * inv_b;
            agg.l_bfr += l_bfr_i * inv_b;
        }
        agg.l_total = total_loss(agg.l_vp, agg.l_bfr, self.lambda)?;

        if !agg.l_total.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                step: self.global_step,
                batch_seed: batch[0].seed,
            });
        }

        let grads = self.net.backward_pretrain(&tape, &d_vp, &d_bfr);
        if !grads.all_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                step: self.global_step,
                batch_seed: batch[0].seed,
            });
        }
        self.optim.apply(&mut self.net.params, &grads);
        self.global_step += 1;
        Ok(agg)
    }
}

/// Deterministic epoch schedule: every volume contributes
/// `crops_per_volume` jobs, shuffled by an epoch-seeded stream.
pub fn epoch_jobs(n_volumes: usize, crops_per_volume: usize, base_seed: u64, epoch: usize) -> Vec<(usize, u64)> {
    use rand::seq::SliceRandom;
    let mut jobs: Vec<(usize, u64)> = (0..n_volumes)
        .flat_map(|v| (0..crops_per_volume).map(move |c| (v, (v * crops_per_volume + c) as u64)))
        .collect();
    let mut rng = seeds::rng_for(base_seed, stream::EPOCH_ORDER, &[epoch as u64]);
    jobs.shuffle(&mut rng);
    jobs
}

/// Build the examples for one epoch's jobs (data workers run concurrently;
/// results are collected in job order so the schedule is scheduling-independent).
pub fn build_epoch_examples(
    volumes: &[LabeledVolume],
    jobs: &[(usize, u64)],
    cfg: &PretrainConfig,
    n_vectors: usize,
    spatial_cfg: &SpatialAugmentConfig,
    intensity_cfg: &IntensityNoiseConfig,
    epoch: usize,
) -> Result<Vec<TrainExample>> {
    jobs.par_iter()
        .map(|&(v, job)| {
            build_example(
                &volumes[v].volume,
                &volumes[v].id,
                cfg,
                n_vectors,
                spatial_cfg,
                intensity_cfg,
                cfg.seed,
                [epoch as u64, job],
            )
        })
        .collect()
}

/// Full pretraining run over the dataset's training volumes.
#[allow(clippy::too_many_arguments)]
pub fn run_pretrain(
    net_cfg: NetworkConfig,
    cfg: &PretrainConfig,
    spatial_cfg: &SpatialAugmentConfig,
    intensity_cfg: &IntensityNoiseConfig,
    volumes: &[LabeledVolume],
    mut on_record: impl FnMut(&PretrainRecord) -> Result<()>,
    mut on_epoch_end: impl FnMut(&Trainer, usize) -> Result<()>,
) -> Result<Trainer> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::invalid("pretraining needs at least one volume".to_string()));
    }
    let mut trainer = Trainer::new(net_cfg, cfg)?;
    let n_vectors = trainer.net.cfg.n_vectors;
    for epoch in 0..cfg.epochs {
        trainer.epoch = epoch;
        let jobs = epoch_jobs(volumes.len(), cfg.crops_per_volume, cfg.seed, epoch);
        let examples =
            build_epoch_examples(volumes, &jobs, cfg, n_vectors, spatial_cfg, intensity_cfg, epoch)?;
        for batch in examples.chunks(cfg.batch_size) {
            let start = std::time::Instant::now();
            let breakdown = trainer.step(batch)?;
            let wall = if cfg.deterministic {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            };
            on_record(&PretrainRecord {
                kind: "pretrain".to_string(),
                epoch,
                step: trainer.global_step,
                l_total: breakdown.l_total,
                l_vp: breakdown.l_vp,
                l_bfr: breakdown.l_bfr,
                r_mae: breakdown.r_mae,
                theta_mae: breakdown.theta_mae,
                phi_mae: breakdown.phi_mae,
                voxel_mae: breakdown.voxel_mae,
                boundary_mae: breakdown.boundary_mae,
                wall_s: wall,
            })?;
        }
        on_epoch_end(&trainer, epoch)?;
    }
    Ok(trainer)
}

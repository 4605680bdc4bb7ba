//! Supervised fine-tuning of the transferred encoder-decoder with a fresh
//! segmentation head: voxel-wise cross-entropy plus soft Dice, per-epoch
//! validation Dice, best-epoch checkpointing, and a Random-Init control.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_spatial, SpatialOp, TransformRecord};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{transfer_weights, NetworkConfig, TransferManifest, VectorPoseNet};
use crate::nn::adamw::{AdamW, AdamWConfig};
use crate::nn::{ParamSet, Tensor};
use crate::training::dice::{dice_score, DiceScore};
use crate::training::metrics::FinetuneRecord;
use crate::training::seeds::{self, stream};
use crate::volume::{sample_crop, CropSampler};

/// Intensity and spatial augmentation for fine-tuning (random flipping,
/// brightness, gamma, blurring).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneAugment {
    pub flip_prob: f64,
    pub brightness_prob: f64,
    pub brightness_delta: f64,
    pub gamma_prob: f64,
    pub gamma_range: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for FinetuneAugment {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness_prob: 0.3,
            brightness_delta: 0.15,
            gamma_prob: 0.3,
            gamma_range: (0.7, 1.5),
            blur_prob: 0.2,
            blur_sigma: (0.5, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub crop_extents: [usize; 3],
    pub crops_per_volume: usize,
    /// Fraction of training volumes used (floor applied to the count).
    pub label_fraction: f64,
    pub runs: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub augment: FinetuneAugment,
    pub background_threshold: f32,
    pub min_informative_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            crop_extents: [64, 128, 128],
            crops_per_volume: 4,
            label_fraction: 1.0,
            runs: 8,
            seed: 0,
            deterministic: false,
            augment: FinetuneAugment::default(),
            background_threshold: 0.01,
            min_informative_fraction: 0.1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.runs == 0 {
            return Err(Error::config(
                "finetune.epochs",
                "epochs, batch_size, and runs must be positive",
            ));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::config(
                "finetune.label_fraction",
                format!("must be in (0,1], got {}", self.label_fraction),
            ));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("finetune.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Soft-Dice + cross-entropy segmentation loss with analytic logit
/// gradients. Probability sums run over the whole batch per class.
pub fn seg_loss_grad(
    logits: &Tensor<f32>,
    labels: &[&Array3<u8>],
) -> Result<(f64, Tensor<f32>)> {
    let [bsz, classes, d, h, w] = logits.dim5();
    let n = d * h * w;
    if labels.len() != bsz {
        return Err(Error::invalid("label batch size mismatch".to_string()));
    }
    let eps = 1e-5;
    let ld = logits.data();
    let mut probs = vec![0.0f32; bsz * classes * n];
    let mut ce = 0.0f64;
    let mut class_p = vec![0.0f64; classes];
    let mut class_t = vec![0.0f64; classes];
    let mut class_i = vec![0.0f64; classes];
    let total_vox = (bsz * n) as f64;

    for b in 0..bsz {
        let lab = labels[b];
        if lab.dim() != (d, h, w) {
            return Err(Error::invalid("label extents mismatch".to_string()));
        }
        let lab_flat = lab.as_slice().expect("standard layout labels");
        for i in 0..n {
            let t = lab_flat[i] as usize;
            if t >= classes {
                return Err(Error::invalid(format!(
                    "label {t} out of range for {classes} classes"
                )));
            }
            // softmax over classes at this voxel
            let mut maxv = f32::NEG_INFINITY;
            for c in 0..classes {
                maxv = maxv.max(ld[(b * classes + c) * n + i]);
            }
            let mut denom = 0.0f64;
            for c in 0..classes {
                denom += ((ld[(b * classes + c) * n + i] - maxv) as f64).exp();
            }
            for c in 0..classes {
                let p = ((ld[(b * classes + c) * n + i] - maxv) as f64).exp() / denom;
                probs[(b * classes + c) * n + i] = p as f32;
                class_p[c] += p;
                if c == t {
                    class_t[c] += 1.0;
                    class_i[c] += p;
                    ce -= p.max(1e-12).ln();
                }
            }
        }
    }
    let ce = ce / total_vox;

    // soft dice over foreground classes
    let foreground = (classes - 1) as f64;
    let mut dice_sum = 0.0;
    let mut dice_c = vec![0.0f64; classes];
    for c in 1..classes {
        let dcv = (2.0 * class_i[c] + eps) / (class_p[c] + class_t[c] + eps);
        dice_c[c] = dcv;
        dice_sum += dcv;
    }
    let dice_loss = 1.0 - dice_sum / foreground;
    let loss = ce + dice_loss;

    let mut dlogits = Tensor::<f32>::zeros(logits.shape());
    let dld = dlogits.data_mut();
    for b in 0..bsz {
        let lab = labels[b];
        let lab_flat = lab.as_slice().expect("standard layout labels");
        for i in 0..n {
            let t = lab_flat[i] as usize;
            // dL_dice/dp per class at this voxel, then through softmax
            let mut gdotp = 0.0f64;
            let mut g = vec![0.0f64; classes];
            for c in 1..classes {
                let denom = class_p[c] + class_t[c] + eps;
                let tv = if c == t { 1.0 } else { 0.0 };
                g[c] = -(2.0 * tv - dice_c[c]) / denom / foreground;
            }
            for c in 0..classes {
                gdotp += g[c] * probs[(b * classes + c) * n + i] as f64;
            }
            for c in 0..classes {
                let p = probs[(b * classes + c) * n + i] as f64;
                let dz_dice = p * (g[c] - gdotp);
                let y = if c == t { 1.0 } else { 0.0 };
                let dz_ce = (p - y) / total_vox;
                dld[(b * classes + c) * n + i] = (dz_ce + dz_dice) as f32;
            }
        }
    }
    Ok((loss, dlogits))
}

fn gaussian_blur(crop: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let radius = ((2.0 * sigma).ceil() as usize).clamp(1, 3);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0f64;
    for i in 0..=2 * radius {
        let x = i as f64 - radius as f64;
        let wgt = (-x * x / (2.0 * sigma * sigma)).exp();
        kernel.push(wgt);
        sum += wgt;
    }
    for k in &mut kernel {
        *k /= sum;
    }
    let dims = crop.dim();
    let ext = [dims.0, dims.1, dims.2];
    let mut cur = crop.clone();
    for axis in 0..3 {
        let mut next = Array3::<f32>::zeros(dims);
        for x in 0..ext[0] {
            for y in 0..ext[1] {
                for z in 0..ext[2] {
                    let mut acc = 0.0f64;
                    for (ki, kw) in kernel.iter().enumerate() {
                        let off = ki as i64 - radius as i64;
                        let mut p = [x as i64, y as i64, z as i64];
                        p[axis] = (p[axis] + off).clamp(0, ext[axis] as i64 - 1);
                        acc += kw * cur[[p[0] as usize, p[1] as usize, p[2] as usize]] as f64;
                    }
                    next[[x, y, z]] = acc as f32;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Flip-only spatial record plus image intensity transforms.
fn augment_pair<R: Rng>(
    image: &Array3<f32>,
    labels: &Array3<u8>,
    aug: &FinetuneAugment,
    rng: &mut R,
) -> Result<(Array3<f32>, Array3<u8>)> {
    let mut ops = Vec::new();
    for axis in crate::augment::Axis::ALL {
        if rng.random::<f64>() < aug.flip_prob {
            ops.push(SpatialOp::Flip(axis));
        }
    }
    let record = TransformRecord::from_ops(ops);
    let mut img = apply_spatial(image, &record)?;
    let lab = apply_spatial(labels, &record)?;
    if rng.random::<f64>() < aug.brightness_prob {
        let delta = rng.random_range(-aug.brightness_delta..=aug.brightness_delta) as f32;
        img.mapv_inplace(|v| (v + delta).clamp(0.0, 1.0));
    }
    if rng.random::<f64>() < aug.gamma_prob {
        let gamma = rng.random_range(aug.gamma_range.0..=aug.gamma_range.1) as f32;
        img.mapv_inplace(|v| v.max(0.0).powf(gamma).clamp(0.0, 1.0));
    }
    if rng.random::<f64>() < aug.blur_prob {
        let sigma = rng.random_range(aug.blur_sigma.0..=aug.blur_sigma.1);
        img = gaussian_blur(&img, sigma);
    }
    Ok((img, lab))
}

/// Argmax segmentation of a full volume, padding to the network stride and
/// cropping the prediction back.
pub fn predict_labels(net: &VectorPoseNet, data: &Array3<f32>) -> Result<Array3<u8>> {
    let dims = data.dim();
    let ext = [dims.0, dims.1, dims.2];
    let stride = net.cfg.total_stride();
    let padded: [usize; 3] = [
        ext[0].div_ceil(stride) * stride,
        ext[1].div_ceil(stride) * stride,
        ext[2].div_ceil(stride) * stride,
    ];
    let mut input = Tensor::<f32>::zeros(&[1, 1, padded[0], padded[1], padded[2]]);
    {
        let buf = input.data_mut();
        for x in 0..ext[0] {
            for y in 0..ext[1] {
                for z in 0..ext[2] {
                    buf[(x * padded[1] + y) * padded[2] + z] = data[[x, y, z]];
                }
            }
        }
    }
    let (logits, _) = net.forward_segment(&input, false)?;
    let [_, classes, pd, ph, pw] = logits.dim5();
    let ld = logits.data();
    let mut out = Array3::<u8>::zeros(dims);
    for x in 0..ext[0] {
        for y in 0..ext[1] {
            for z in 0..ext[2] {
                let at = (x * ph + y) * pw + z;
                let mut best_c = 0usize;
                let mut best = f32::NEG_INFINITY;
                for c in 0..classes {
                    let v = ld[c * pd * ph * pw + at];
                    if v > best {
                        best = v;
                        best_c = c;
                    }
                }
                out[[x, y, z]] = best_c as u8;
            }
        }
    }
    Ok(out)
}

/// Mean foreground Dice of a network over a list of labeled volumes, plus
/// the per-class breakdown averaged over volumes.
pub fn evaluate_split(
    net: &VectorPoseNet,
    volumes: &[crate::dataset::LabeledVolume],
    num_classes: usize,
) -> Result<(f64, Vec<Option<f64>>)> {
    let mut mean = 0.0;
    let mut counted = 0usize;
    let mut class_sum = vec![0.0f64; num_classes];
    let mut class_n = vec![0usize; num_classes];
    for v in volumes {
        let labels = v
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("volume {} has no labels", v.id)))?;
        let pred = predict_labels(net, &v.volume.data)?;
        let score: DiceScore = dice_score(&pred, labels, num_classes)?;
        mean += score.mean;
        counted += 1;
        for (c, d) in score.per_class.iter().enumerate() {
            if let Some(d) = d {
                class_sum[c] += d;
                class_n[c] += 1;
            }
        }
    }
    if counted == 0 {
        return Err(Error::invalid("evaluation split is empty".to_string()));
    }
    let per_class = (0..num_classes)
        .map(|c| {
            if class_n[c] > 0 {
                Some(class_sum[c] / class_n[c] as f64)
            } else {
                None
            }
        })
        .collect();
    Ok((mean / counted as f64, per_class))
}

/// Outcome of one fine-tuning run.
pub struct FinetuneOutcome {
    pub net: VectorPoseNet,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub test_dice: Option<f64>,
    pub manifest: Option<TransferManifest>,
    pub records: Vec<FinetuneRecord>,
}

fn param_set_from_pairs(pairs: &[(String, Tensor<f32>)]) -> ParamSet {
    let mut ps = ParamSet::new();
    for (name, tensor) in pairs {
        let decay = tensor.shape().len() >= 2;
        ps.add(name.clone(), tensor.clone(), decay);
    }
    ps
}

/// One fine-tuning run. `pretrained` carries the pretrained parameter
/// tensors (encoder and decoder are transferred, heads are fresh); `None`
/// trains from random initialization.
pub fn run_finetune(
    pretrained: Option<&[(String, Tensor<f32>)]>,
    net_cfg: &NetworkConfig,
    cfg: &FinetuneConfig,
    dataset: &Dataset,
    run_seed: u64,
    mut on_record: impl FnMut(&FinetuneRecord) -> Result<()>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let num_classes = net_cfg
        .seg_classes
        .ok_or_else(|| Error::config("network.seg_classes", "required for fine-tuning"))?;
    if num_classes < dataset.num_classes {
        return Err(Error::config(
            "network.seg_classes",
            format!(
                "dataset has {} classes but network is configured for {}",
                dataset.num_classes, num_classes
            ),
        ));
    }

    // label-fraction subset: floor(fraction * train count), shuffled per run
    let k = (cfg.label_fraction * dataset.train.len() as f64).floor() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "label fraction {} of {} training volumes selects zero volumes",
            cfg.label_fraction,
            dataset.train.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = seeds::rng_for(run_seed, stream::SUBSET, &[]);
        order.shuffle(&mut rng);
    }
    let subset: Vec<usize> = order.into_iter().take(k).collect();
    for &v in &subset {
        if dataset.train[v].labels.is_none() {
            return Err(Error::invalid(format!(
                "training volume {} has no labels",
                dataset.train[v].id
            )));
        }
    }

    let init_seed = seeds::mix(&[run_seed, stream::INIT]);
    let (mut net, manifest) = match pretrained {
        Some(pairs) => {
            let source = param_set_from_pairs(pairs);
            let (net, manifest) = transfer_weights(&source, net_cfg.clone(), init_seed)?;
            (net, Some(manifest))
        }
        None => (VectorPoseNet::new(net_cfg.clone(), init_seed)?, None),
    };
    let mut optim = AdamW::new(
        &net.params,
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );

    let sampler = CropSampler {
        background_threshold: cfg.background_threshold,
        min_informative_fraction: cfg.min_informative_fraction,
        max_retries: 50,
        eta: 0.0,
    };

    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<ParamSet> = None;
    let mut records = Vec::new();

    for epoch in 0..cfg.epochs {
        let start = std::time::Instant::now();
        // deterministic epoch schedule over the labeled subset
        let mut jobs: Vec<(usize, u64)> = subset
            .iter()
            .enumerate()
            .flat_map(|(si, &v)| {
                (0..cfg.crops_per_volume)
                    .map(move |c| (v, (si * cfg.crops_per_volume + c) as u64))
            })
            .collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = seeds::rng_for(run_seed, stream::EPOCH_ORDER, &[epoch as u64]);
            jobs.shuffle(&mut rng);
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in jobs.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &(v, job) in chunk {
                let vol = &dataset.train[v];
                let mut rng =
                    seeds::rng_for(run_seed, stream::CROP, &[epoch as u64, job]);
                let (img, placement) =
                    sample_crop(&vol.volume, &vol.id, cfg.crop_extents, &sampler, &mut rng)?;
                let lab = vol.labels.as_ref().unwrap().slice(ndarray::s![
                    placement.offset[0]..placement.offset[0] + placement.extents[0],
                    placement.offset[1]..placement.offset[1] + placement.extents[1],
                    placement.offset[2]..placement.offset[2] + placement.extents[2]
                ]);
                let mut aug_rng =
                    seeds::rng_for(run_seed, stream::FINETUNE_AUG, &[epoch as u64, job]);
                let (img, lab) =
                    augment_pair(&img, &lab.to_owned(), &cfg.augment, &mut aug_rng)?;
                images.push(img);
                labels.push(lab);
            }
            let ext = cfg.crop_extents;
            let vol_n = ext.iter().product::<usize>();
            let mut input = Tensor::<f32>::zeros(&[images.len(), 1, ext[0], ext[1], ext[2]]);
            for (i, img) in images.iter().enumerate() {
                let slab = &mut input.data_mut()[i * vol_n..(i + 1) * vol_n];
                for (dst, src) in slab.iter_mut().zip(img.iter()) {
                    *dst = *src;
                }
            }
            let (logits, tape) = net.forward_segment(&input, true)?;
            let label_refs: Vec<&Array3<u8>> = labels.iter().collect();
            let (loss, dlogits) = seg_loss_grad(&logits, &label_refs)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: batches,
                    batch_seed: run_seed,
                });
            }
            let grads = net.backward_segment(&tape.unwrap(), &dlogits);
            optim.apply(&mut net.params, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;

        let (val_dice, per_class) = evaluate_split(&net, &dataset.val, num_classes)?;
        if val_dice > best_val {
            best_val = val_dice;
            best_epoch = epoch;
            best_params = Some(net.params.clone());
        }
        let wall = if cfg.deterministic {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        };
        let record = FinetuneRecord {
            kind: "finetune".to_string(),
            run_seed,
            epoch,
            train_loss,
            val_dice_mean: val_dice,
            val_dice_per_class: per_class,
            best_so_far: best_val,
            wall_s: wall,
        };
        on_record(&record)?;
        records.push(record);
    }

    // retain the best-epoch parameters
    if let Some(best) = best_params {
        net.params = best;
    }
    let test_dice = if dataset.test.is_empty() {
        None
    } else {
        Some(evaluate_split(&net, &dataset.test, num_classes)?.0)
    };
    Ok(FinetuneOutcome {
        net,
        best_epoch,
        best_val_dice: best_val,
        test_dice,
        manifest,
        records,
    })
}

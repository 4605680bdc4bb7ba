//! The encoder-decoder-heads network: a configurable reference
//! implementation with a desk-scale TINY variant and a 3D ResNet-50 variant,
//! a light decoder with trilinear upsampling and additive fusion, a pooled
//! MLP head for vector prediction, and dense 1x1x1 heads for reconstruction
//! and segmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{
    conv3d_backward, conv3d_forward, global_avg_pool_backward, global_avg_pool_forward,
    group_norm_backward, group_norm_forward, linear_backward, linear_forward,
    maxpool3d_backward, maxpool3d_forward, relu_backward, relu_forward,
    upsample_trilinear_backward, upsample_trilinear_forward, GroupNormCache,
};
use crate::nn::params::Initializer;
use crate::nn::{GradSet, ParamId, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Tiny,
    Resnet50_3d,
}

/// Network hyperparameters. The decoder always restores full input
/// resolution; the VP head consumes pooled features from the deepest encoder
/// stage unless `vp_from_decoder` selects the decoder reading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoder: EncoderVariant,
    pub base_channels: usize,
    pub vp_hidden: usize,
    pub n_vectors: usize,
    pub bfr_channels: usize,
    pub seg_classes: Option<usize>,
    pub vp_from_decoder: bool,
    pub group_norm_groups: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderVariant::Tiny,
            base_channels: 8,
            vp_hidden: 256,
            n_vectors: 9,
            bfr_channels: 2,
            seg_classes: None,
            vp_from_decoder: false,
            group_norm_groups: 4,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be positive".to_string()));
        }
        if ![0, 1, 2, 5, 9].contains(&self.n_vectors) {
            return Err(Error::invalid(format!(
                "n_vectors must be one of 0, 1, 2, 5, 9, got {}",
                self.n_vectors
            )));
        }
        if self.bfr_channels != 2 {
            return Err(Error::invalid("bfr_channels must be 2 (voxel + boundary)".to_string()));
        }
        if self.vp_hidden == 0 || self.group_norm_groups == 0 {
            return Err(Error::invalid("vp_hidden and group_norm_groups must be positive".to_string()));
        }
        if let Some(c) = self.seg_classes {
            if c < 2 {
                return Err(Error::invalid("seg_classes must be >= 2".to_string()));
            }
        }
        Ok(())
    }

    /// Encoder pyramid strides relative to the input.
    pub fn pyramid_strides(&self) -> Vec<usize> {
        match self.encoder {
            EncoderVariant::Tiny => vec![2, 4, 8, 16],
            EncoderVariant::Resnet50_3d => vec![2, 4, 8, 16, 32],
        }
    }

    /// Encoder pyramid channel counts.
    pub fn pyramid_channels(&self) -> Vec<usize> {
        let b = self.base_channels;
        match self.encoder {
            EncoderVariant::Tiny => vec![b, 2 * b, 4 * b, 8 * b],
            EncoderVariant::Resnet50_3d => vec![b, 4 * b, 8 * b, 16 * b, 32 * b],
        }
    }

    /// Decoder channels at each pyramid level.
    pub fn decoder_channels(&self) -> Vec<usize> {
        self.pyramid_channels()
            .iter()
            .map(|&c| (c / 2).max(4))
            .collect()
    }

    pub fn total_stride(&self) -> usize {
        *self.pyramid_strides().last().unwrap()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != 1 {
            return Err(Error::invalid(format!(
                "expected input of shape [B, 1, D, H, W], got {shape:?}"
            )));
        }
        let stride = self.total_stride();
        for &e in &shape[2..] {
            if e == 0 || e % stride != 0 {
                return Err(Error::invalid(format!(
                    "input extents {:?} must be divisible by the total stride {stride}",
                    &shape[2..]
                )));
            }
        }
        Ok(())
    }

    /// Pretraining output shapes for a given input shape, without running
    /// the network: ([B, n, 3], [B, 2, D, H, W]).
    pub fn pretrain_output_shapes(
        &self,
        input: [usize; 5],
    ) -> Result<([usize; 3], [usize; 5])> {
        self.validate()?;
        self.check_input(&input)?;
        Ok((
            [input[0], self.n_vectors, 3],
            [input[0], self.bfr_channels, input[2], input[3], input[4]],
        ))
    }

    /// Segmentation output shape: [B, C, D, H, W].
    pub fn segment_output_shape(&self, input: [usize; 5]) -> Result<[usize; 5]> {
        self.validate()?;
        self.check_input(&input)?;
        let c = self
            .seg_classes
            .ok_or_else(|| Error::invalid("seg_classes not configured".to_string()))?;
        Ok([input[0], c, input[2], input[3], input[4]])
    }
}

fn norm_groups(preferred: usize, channels: usize) -> usize {
    let mut g = preferred.min(channels).max(1);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    norm: Option<(ParamId, ParamId, usize)>,
    relu: bool,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
struct ConvBlockCache {
    x: Tensor<f32>,
    pre_norm: Option<Tensor<f32>>,
    gn: Option<GroupNormCache>,
    out: Option<Tensor<f32>>,
}

const GN_EPS: f64 = 1e-5;

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        norm: bool,
        relu: bool,
        gn_groups: usize,
    ) -> Self {
        let fan_in = cin * k * k * k;
        let w = ps.add(
            format!("{name}.conv.weight"),
            init.he_normal(&[cout, cin, k, k, k], fan_in),
            true,
        );
        let b = ps.add(format!("{name}.conv.bias"), init.zeros(&[cout]), false);
        let norm = if norm {
            let g = ps.add(format!("{name}.norm.gamma"), init.ones(&[cout]), false);
            let be = ps.add(format!("{name}.norm.beta"), init.zeros(&[cout]), false);
            Some((g, be, norm_groups(gn_groups, cout)))
        } else {
            None
        };
        Self {
            w,
            b,
            norm,
            relu,
            stride,
            pad: k / 2,
        }
    }

    fn forward(
        &self,
        ps: &ParamSet,
        x: &Tensor<f32>,
        train: bool,
    ) -> (Tensor<f32>, Option<ConvBlockCache>) {
        let conv = conv3d_forward(x, ps.get(self.w), ps.get(self.b), self.stride, self.pad);
        let (after_norm, pre_norm, gn_cache) = match self.norm {
            Some((g, b, groups)) => {
                let (y, cache) = group_norm_forward(&conv, ps.get(g), ps.get(b), groups, GN_EPS);
                (y, Some(conv), Some(cache))
            }
            None => (conv, None, None),
        };
        let out = if self.relu {
            relu_forward(&after_norm)
        } else {
            after_norm
        };
        if train {
            let cache = ConvBlockCache {
                x: x.clone(),
                pre_norm,
                gn: gn_cache,
                out: if self.relu { Some(out.clone()) } else { None },
            };
            (out, Some(cache))
        } else {
            (out, None)
        }
    }

    fn backward(
        &self,
        ps: &ParamSet,
        cache: &ConvBlockCache,
        dy: &Tensor<f32>,
        grads: &mut GradSet,
    ) -> Tensor<f32> {
        let mut g = dy.clone();
        if self.relu {
            g = relu_backward(&g, cache.out.as_ref().expect("relu cache"));
        }
        if let Some((gamma, beta, _)) = self.norm {
            let (dx, dgamma, dbeta) = group_norm_backward(
                cache.pre_norm.as_ref().expect("norm cache"),
                ps.get(gamma),
                cache.gn.as_ref().expect("gn stats"),
                &g,
            );
            grads.accumulate(gamma, &dgamma);
            grads.accumulate(beta, &dbeta);
            g = dx;
        }
        let (dx, dw, db) = conv3d_backward(&cache.x, ps.get(self.w), &g, self.stride, self.pad);
        grads.accumulate(self.w, &dw);
        grads.accumulate(self.b, &db);
        dx
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: ConvBlock,
    conv: ConvBlock,
    expand: ConvBlock,
    proj: Option<ConvBlock>,
}

#[derive(Debug)]
struct BottleneckCache {
    reduce: ConvBlockCache,
    conv: ConvBlockCache,
    expand: ConvBlockCache,
    proj: Option<ConvBlockCache>,
    out: Tensor<f32>,
}

impl Bottleneck {
    fn new(
        ps: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        width: usize,
        stride: usize,
        gn_groups: usize,
    ) -> Self {
        let cout = 4 * width;
        let reduce = ConvBlock::new(
            ps,
            init,
            &format!("{name}.reduce"),
            cin,
            width,
            1,
            1,
            true,
            true,
            gn_groups,
        );
        let conv = ConvBlock::new(
            ps,
            init,
            &format!("{name}.conv"),
            width,
            width,
            3,
            stride,
            true,
            true,
            gn_groups,
        );
        let expand = ConvBlock::new(
            ps,
            init,
            &format!("{name}.expand"),
            width,
            cout,
            1,
            1,
            true,
            false,
            gn_groups,
        );
        let proj = if stride != 1 || cin != cout {
            Some(ConvBlock::new(
                ps,
                init,
                &format!("{name}.proj"),
                cin,
                cout,
                1,
                stride,
                true,
                false,
                gn_groups,
            ))
        } else {
            None
        };
        Self {
            reduce,
            conv,
            expand,
            proj,
        }
    }

    fn forward(
        &self,
        ps: &ParamSet,
        x: &Tensor<f32>,
        train: bool,
    ) -> (Tensor<f32>, Option<BottleneckCache>) {
        let (r, rc) = self.reduce.forward(ps, x, train);
        let (c, cc) = self.conv.forward(ps, &r, train);
        let (mut e, ec) = self.expand.forward(ps, &c, train);
        let pc = match &self.proj {
            Some(proj) => {
                let (p, pcache) = proj.forward(ps, x, train);
                e.add_assign(&p);
                pcache
            }
            None => {
                e.add_assign(x);
                None
            }
        };
        let out = relu_forward(&e);
        if train {
            let cache = BottleneckCache {
                reduce: rc.unwrap(),
                conv: cc.unwrap(),
                expand: ec.unwrap(),
                proj: pc,
                out: out.clone(),
            };
            (out, Some(cache))
        } else {
            (out, None)
        }
    }

    fn backward(
        &self,
        ps: &ParamSet,
        cache: &BottleneckCache,
        dy: &Tensor<f32>,
        grads: &mut GradSet,
    ) -> Tensor<f32> {
        let g = relu_backward(dy, &cache.out);
        let de = self.expand.backward(ps, &cache.expand, &g, grads);
        let dc = self.conv.backward(ps, &cache.conv, &de, grads);
        let mut dx = self.reduce.backward(ps, &cache.reduce, &dc, grads);
        match (&self.proj, &cache.proj) {
            (Some(proj), Some(pc)) => {
                let dskip = proj.backward(ps, pc, &g, grads);
                dx.add_assign(&dskip);
            }
            _ => dx.add_assign(&g),
        }
        dx
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Tiny {
        stages: Vec<ConvBlock>,
    },
    Resnet {
        stem: ConvBlock,
        stages: Vec<Vec<Bottleneck>>,
    },
}

#[derive(Debug)]
enum EncoderCache {
    Tiny {
        stages: Vec<ConvBlockCache>,
    },
    Resnet {
        stem: ConvBlockCache,
        pool_argmax: Vec<usize>,
        pool_in_shape: Vec<usize>,
        stages: Vec<Vec<BottleneckCache>>,
    },
}

impl Encoder {
    fn build(cfg: &NetworkConfig, ps: &mut ParamSet, init: &mut Initializer) -> Self {
        let b = cfg.base_channels;
        let g = cfg.group_norm_groups;
        match cfg.encoder {
            EncoderVariant::Tiny => {
                let channels = cfg.pyramid_channels();
                let mut stages = Vec::new();
                let mut cin = 1;
                for (i, &cout) in channels.iter().enumerate() {
                    stages.push(ConvBlock::new(
                        ps,
                        init,
                        &format!("encoder.stage{i}"),
                        cin,
                        cout,
                        3,
                        2,
                        true,
                        true,
                        g,
                    ));
                    cin = cout;
                }
                Encoder::Tiny { stages }
            }
            EncoderVariant::Resnet50_3d => {
                let stem = ConvBlock::new(ps, init, "encoder.stem", 1, b, 7, 2, true, true, g);
                let block_counts = [3usize, 4, 6, 3];
                let mut stages = Vec::new();
                let mut cin = b;
                for (s, &count) in block_counts.iter().enumerate() {
                    let width = b << s;
                    let mut blocks = Vec::new();
                    for j in 0..count {
                        let stride = if s > 0 && j == 0 { 2 } else { 1 };
                        blocks.push(Bottleneck::new(
                            ps,
                            init,
                            &format!("encoder.stage{s}.block{j}"),
                            cin,
                            width,
                            stride,
                            g,
                        ));
                        cin = 4 * width;
                    }
                    stages.push(blocks);
                }
                Encoder::Resnet { stem, stages }
            }
        }
    }

    /// Returns the feature pyramid (shallow to deep) and the training cache.
    fn forward(
        &self,
        ps: &ParamSet,
        x: &Tensor<f32>,
        train: bool,
    ) -> (Vec<Tensor<f32>>, Option<EncoderCache>) {
        match self {
            Encoder::Tiny { stages } => {
                let mut feats = Vec::new();
                let mut caches = Vec::new();
                let mut cur = x.clone();
                for stage in stages {
                    let (out, cache) = stage.forward(ps, &cur, train);
                    if let Some(c) = cache {
                        caches.push(c);
                    }
                    feats.push(out.clone());
                    cur = out;
                }
                (
                    feats,
                    train.then_some(EncoderCache::Tiny { stages: caches }),
                )
            }
            Encoder::Resnet { stem, stages } => {
                let (stem_out, stem_cache) = stem.forward(ps, x, train);
                let mut feats = vec![stem_out.clone()];
                let (pooled, argmax) = maxpool3d_forward(&stem_out, 3, 2, 1);
                let pool_in_shape = stem_out.shape().to_vec();
                let mut cur = pooled;
                let mut stage_caches = Vec::new();
                for blocks in stages {
                    let mut block_caches = Vec::new();
                    for block in blocks {
                        let (out, cache) = block.forward(ps, &cur, train);
                        if let Some(c) = cache {
                            block_caches.push(c);
                        }
                        cur = out;
                    }
                    feats.push(cur.clone());
                    stage_caches.push(block_caches);
                }
                (
                    feats,
                    train.then(|| EncoderCache::Resnet {
                        stem: stem_cache.unwrap(),
                        pool_argmax: argmax,
                        pool_in_shape,
                        stages: stage_caches,
                    }),
                )
            }
        }
    }

    /// `feat_grads[i]` is the accumulated gradient flowing into pyramid
    /// level i from the decoder laterals (and the VP head for the deepest).
    fn backward(
        &self,
        ps: &ParamSet,
        cache: &EncoderCache,
        mut feat_grads: Vec<Tensor<f32>>,
        grads: &mut GradSet,
    ) {
        match (self, cache) {
            (Encoder::Tiny { stages }, EncoderCache::Tiny { stages: caches }) => {
                let mut g = feat_grads.pop().expect("deepest grad");
                for i in (0..stages.len()).rev() {
                    let dx = stages[i].backward(ps, &caches[i], &g, grads);
                    if i > 0 {
                        g = feat_grads.pop().expect("level grad");
                        g.add_assign(&dx);
                    }
                }
            }
            (
                Encoder::Resnet { stem, stages },
                EncoderCache::Resnet {
                    stem: stem_cache,
                    pool_argmax,
                    pool_in_shape,
                    stages: stage_caches,
                },
            ) => {
                let mut g = feat_grads.pop().expect("deepest grad");
                for s in (0..stages.len()).rev() {
                    for j in (0..stages[s].len()).rev() {
                        g = stages[s][j].backward(ps, &stage_caches[s][j], &g, grads);
                    }
                    if s > 0 {
                        let mut level = feat_grads.pop().expect("level grad");
                        level.add_assign(&g);
                        g = level;
                    }
                }
                // gradient through the stem maxpool, plus the stem's own
                // lateral contribution
                let dpool = maxpool3d_backward(&g, pool_argmax, pool_in_shape);
                let mut stem_grad = feat_grads.pop().expect("stem grad");
                stem_grad.add_assign(&dpool);
                stem.backward(ps, stem_cache, &stem_grad, grads);
            }
            _ => unreachable!("encoder/cache variant mismatch"),
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    proj: ConvBlock,
    lateral: ConvBlock,
    smooth: ConvBlock,
}

#[derive(Debug)]
struct DecoderLevelCache {
    proj: ConvBlockCache,
    lateral: ConvBlockCache,
    smooth: ConvBlockCache,
    prev_spatial: [usize; 3],
}

#[derive(Clone, Debug)]
struct Decoder {
    top: ConvBlock,
    levels: Vec<DecoderLevel>,
    full_proj: ConvBlock,
    full_smooth: ConvBlock,
}

#[derive(Debug)]
struct DecoderCache {
    top: ConvBlockCache,
    levels: Vec<DecoderLevelCache>,
    full_proj: ConvBlockCache,
    full_smooth: ConvBlockCache,
    d0_spatial: [usize; 3],
}

fn spatial_of(t: &Tensor<f32>) -> [usize; 3] {
    let s = t.shape();
    [s[2], s[3], s[4]]
}

impl Decoder {
    fn build(cfg: &NetworkConfig, ps: &mut ParamSet, init: &mut Initializer) -> Self {
        let enc_ch = cfg.pyramid_channels();
        let dec_ch = cfg.decoder_channels();
        let levels_n = enc_ch.len();
        let g = cfg.group_norm_groups;
        let top = ConvBlock::new(
            ps,
            init,
            "decoder.top",
            enc_ch[levels_n - 1],
            dec_ch[levels_n - 1],
            1,
            1,
            false,
            false,
            g,
        );
        let mut levels = Vec::new();
        for i in (0..levels_n - 1).rev() {
            let proj = ConvBlock::new(
                ps,
                init,
                &format!("decoder.level{i}.proj"),
                dec_ch[i + 1],
                dec_ch[i],
                1,
                1,
                false,
                false,
                g,
            );
            let lateral = ConvBlock::new(
                ps,
                init,
                &format!("decoder.level{i}.lateral"),
                enc_ch[i],
                dec_ch[i],
                1,
                1,
                false,
                false,
                g,
            );
            let smooth = ConvBlock::new(
                ps,
                init,
                &format!("decoder.level{i}.smooth"),
                dec_ch[i],
                dec_ch[i],
                3,
                1,
                true,
                true,
                g,
            );
            levels.push(DecoderLevel {
                proj,
                lateral,
                smooth,
            });
        }
        let full_proj = ConvBlock::new(
            ps,
            init,
            "decoder.full.proj",
            dec_ch[0],
            dec_ch[0],
            1,
            1,
            false,
            false,
            g,
        );
        let full_smooth = ConvBlock::new(
            ps,
            init,
            "decoder.full.smooth",
            dec_ch[0],
            dec_ch[0],
            3,
            1,
            true,
            true,
            g,
        );
        Self {
            top,
            levels,
            full_proj,
            full_smooth,
        }
    }

    fn forward(
        &self,
        ps: &ParamSet,
        feats: &[Tensor<f32>],
        input_spatial: [usize; 3],
        train: bool,
    ) -> (Tensor<f32>, Option<DecoderCache>) {
        let levels_n = feats.len();
        let (mut d, top_cache) = self.top.forward(ps, &feats[levels_n - 1], train);
        let mut level_caches = Vec::new();
        for (idx, level) in self.levels.iter().enumerate() {
            let i = levels_n - 2 - idx;
            let prev_spatial = spatial_of(&d);
            let (projected, proj_cache) = level.proj.forward(ps, &d, train);
            let up = upsample_trilinear_forward(&projected, spatial_of(&feats[i]));
            let (lat, lat_cache) = level.lateral.forward(ps, &feats[i], train);
            let mut fused = up;
            fused.add_assign(&lat);
            let (out, smooth_cache) = level.smooth.forward(ps, &fused, train);
            if train {
                level_caches.push(DecoderLevelCache {
                    proj: proj_cache.unwrap(),
                    lateral: lat_cache.unwrap(),
                    smooth: smooth_cache.unwrap(),
                    prev_spatial,
                });
            }
            d = out;
        }
        let d0_spatial = spatial_of(&d);
        let (projected, full_proj_cache) = self.full_proj.forward(ps, &d, train);
        let up = upsample_trilinear_forward(&projected, input_spatial);
        let (out, full_smooth_cache) = self.full_smooth.forward(ps, &up, train);
        if train {
            (
                out,
                Some(DecoderCache {
                    top: top_cache.unwrap(),
                    levels: level_caches,
                    full_proj: full_proj_cache.unwrap(),
                    full_smooth: full_smooth_cache.unwrap(),
                    d0_spatial,
                }),
            )
        } else {
            (out, None)
        }
    }

    /// Returns gradients for every pyramid level (shallow to deep).
    fn backward(
        &self,
        ps: &ParamSet,
        cache: &DecoderCache,
        dy: &Tensor<f32>,
        levels_n: usize,
        grads: &mut GradSet,
    ) -> Vec<Tensor<f32>> {
        let mut feat_grads: Vec<Option<Tensor<f32>>> = (0..levels_n).map(|_| None).collect();
        let g = self
            .full_smooth
            .backward(ps, &cache.full_smooth, dy, grads);
        let g = upsample_trilinear_backward(&g, cache.d0_spatial);
        let mut g = self.full_proj.backward(ps, &cache.full_proj, &g, grads);
        for (idx, level) in self.levels.iter().enumerate().rev() {
            let i = levels_n - 2 - idx;
            let lc = &cache.levels[idx];
            let ds = level.smooth.backward(ps, &lc.smooth, &g, grads);
            // fused = upsample(proj(prev)) + lateral(feat)
            let dlat = level.lateral.backward(ps, &lc.lateral, &ds, grads);
            match &mut feat_grads[i] {
                Some(existing) => existing.add_assign(&dlat),
                slot => *slot = Some(dlat),
            }
            let dup = upsample_trilinear_backward(&ds, lc.prev_spatial);
            g = level.proj.backward(ps, &lc.proj, &dup, grads);
        }
        let dtop = self.top.backward(ps, &cache.top, &g, grads);
        feat_grads[levels_n - 1] = Some(dtop);
        feat_grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.expect(&format!("level {i} gradient")))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct VpHead {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug)]
struct VpHeadCache {
    pooled: Tensor<f32>,
    hidden: Tensor<f32>,
    in_shape: Vec<usize>,
}

// ---------------------------------------------------------------------------
// the full network
// ---------------------------------------------------------------------------

/// Training-time activation tape for one forward pass.
#[derive(Debug)]
pub struct Tape {
    encoder: EncoderCache,
    decoder: DecoderCache,
    vp: Option<VpHeadCache>,
    bfr: Option<ConvBlockCache>,
    seg: Option<ConvBlockCache>,
}

#[derive(Clone, Debug)]
pub struct VectorPoseNet {
    pub cfg: NetworkConfig,
    pub params: ParamSet,
    encoder: Encoder,
    decoder: Decoder,
    vp_head: Option<VpHead>,
    bfr_head: ConvBlock,
    seg_head: Option<ConvBlock>,
}

impl VectorPoseNet {
    /// Build with deterministic initialization from `seed`.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut init = Initializer::new(seed);
        let encoder = Encoder::build(&cfg, &mut ps, &mut init);
        let decoder = Decoder::build(&cfg, &mut ps, &mut init);
        let vp_head = (cfg.n_vectors > 0).then(|| {
            let in_ch = if cfg.vp_from_decoder {
                cfg.decoder_channels()[0]
            } else {
                *cfg.pyramid_channels().last().unwrap()
            };
            let fc1_w = ps.add(
                "vp_head.fc1.weight",
                init.he_normal(&[cfg.vp_hidden, in_ch], in_ch),
                true,
            );
            let fc1_b = ps.add("vp_head.fc1.bias", init.zeros(&[cfg.vp_hidden]), false);
            let fc2_w = ps.add(
                "vp_head.fc2.weight",
                init.he_normal(&[3 * cfg.n_vectors, cfg.vp_hidden], cfg.vp_hidden),
                true,
            );
            let fc2_b = ps.add("vp_head.fc2.bias", init.zeros(&[3 * cfg.n_vectors]), false);
            VpHead {
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            }
        });
        let dec_out = cfg.decoder_channels()[0];
        let bfr_head = ConvBlock::new(
            &mut ps,
            &mut init,
            "bfr_head",
            dec_out,
            cfg.bfr_channels,
            1,
            1,
            false,
            false,
            cfg.group_norm_groups,
        );
        let seg_head = cfg.seg_classes.map(|classes| {
            ConvBlock::new(
                &mut ps,
                &mut init,
                "seg_head",
                dec_out,
                classes,
                1,
                1,
                false,
                false,
                cfg.group_norm_groups,
            )
        });
        Ok(Self {
            cfg,
            params: ps,
            encoder,
            decoder,
            vp_head,
            bfr_head,
            seg_head,
        })
    }

    fn backbone_forward(
        &self,
        x: &Tensor<f32>,
        train: bool,
    ) -> (Vec<Tensor<f32>>, Tensor<f32>, Option<EncoderCache>, Option<DecoderCache>) {
        let input_spatial = spatial_of(x);
        let (feats, enc_cache) = self.encoder.forward(&self.params, x, train);
        let (dec_out, dec_cache) = self
            .decoder
            .forward(&self.params, &feats, input_spatial, train);
        (feats, dec_out, enc_cache, dec_cache)
    }

    /// Pretraining forward pass. Returns VP logits [B, n, 3], BFR logits
    /// [B, 2, D, H, W], and (in training mode) the activation tape.
    pub fn forward_pretrain(
        &self,
        x: &Tensor<f32>,
        train: bool,
    ) -> Result<(Tensor<f32>, Tensor<f32>, Option<Tape>)> {
        self.cfg.check_input(x.shape())?;
        let bsz = x.shape()[0];
        let (feats, dec_out, enc_cache, dec_cache) = self.backbone_forward(x, train);
        let (vp_logits, vp_cache) = match &self.vp_head {
            Some(head) => {
                let source = if self.cfg.vp_from_decoder {
                    &dec_out
                } else {
                    feats.last().unwrap()
                };
                let pooled = global_avg_pool_forward(source);
                let h_pre = linear_forward(&pooled, self.params.get(head.fc1_w), self.params.get(head.fc1_b));
                let h = relu_forward(&h_pre);
                let logits = linear_forward(&h, self.params.get(head.fc2_w), self.params.get(head.fc2_b));
                let cache = train.then(|| VpHeadCache {
                    pooled: pooled.clone(),
                    hidden: h.clone(),
                    in_shape: source.shape().to_vec(),
                });
                (
                    logits.reshaped(&[bsz, self.cfg.n_vectors, 3]),
                    cache,
                )
            }
            None => (Tensor::zeros(&[bsz, 0, 3]), None),
        };
        let (bfr_logits, bfr_cache) = self.bfr_head.forward(&self.params, &dec_out, train);
        let tape = if train {
            Some(Tape {
                encoder: enc_cache.unwrap(),
                decoder: dec_cache.unwrap(),
                vp: vp_cache,
                bfr: bfr_cache,
                seg: None,
            })
        } else {
            None
        };
        Ok((vp_logits, bfr_logits, tape))
    }

    /// Backward pass for pretraining; returns gradients for every parameter.
    pub fn backward_pretrain(
        &self,
        tape: &Tape,
        d_vp: &Tensor<f32>,
        d_bfr: &Tensor<f32>,
    ) -> GradSet {
        let mut grads = GradSet::zeros_like(&self.params);
        let levels_n = self.cfg.pyramid_strides().len();
        let mut d_dec = self.bfr_head.backward(
            &self.params,
            tape.bfr.as_ref().expect("bfr cache"),
            d_bfr,
            &mut grads,
        );
        let mut vp_feat_grad: Option<Tensor<f32>> = None;
        if let (Some(head), Some(cache)) = (&self.vp_head, &tape.vp) {
            let bsz = d_vp.shape()[0];
            let flat = d_vp.clone().reshaped(&[bsz, 3 * self.cfg.n_vectors]);
            let (dh, dw2, db2) =
                linear_backward(&cache.hidden, self.params.get(head.fc2_w), &flat);
            grads.accumulate(head.fc2_w, &dw2);
            grads.accumulate(head.fc2_b, &db2);
            let dh = relu_backward(&dh, &cache.hidden);
            let (dpool, dw1, db1) =
                linear_backward(&cache.pooled, self.params.get(head.fc1_w), &dh);
            grads.accumulate(head.fc1_w, &dw1);
            grads.accumulate(head.fc1_b, &db1);
            let dsource = global_avg_pool_backward(&dpool, &cache.in_shape);
            if self.cfg.vp_from_decoder {
                d_dec.add_assign(&dsource);
            } else {
                vp_feat_grad = Some(dsource);
            }
        }
        let mut feat_grads =
            self.decoder
                .backward(&self.params, &tape.decoder, &d_dec, levels_n, &mut grads);
        if let Some(extra) = vp_feat_grad {
            feat_grads[levels_n - 1].add_assign(&extra);
        }
        self.encoder
            .backward(&self.params, &tape.encoder, feat_grads, &mut grads);
        grads
    }

    /// Segmentation forward pass (fine-tuning / inference).
    pub fn forward_segment(
        &self,
        x: &Tensor<f32>,
        train: bool,
    ) -> Result<(Tensor<f32>, Option<Tape>)> {
        self.cfg.check_input(x.shape())?;
        let head = self
            .seg_head
            .as_ref()
            .ok_or_else(|| Error::invalid("network has no segmentation head".to_string()))?;
        let (_, dec_out, enc_cache, dec_cache) = self.backbone_forward(x, train);
        let (logits, seg_cache) = head.forward(&self.params, &dec_out, train);
        let tape = if train {
            Some(Tape {
                encoder: enc_cache.unwrap(),
                decoder: dec_cache.unwrap(),
                vp: None,
                bfr: None,
                seg: seg_cache,
            })
        } else {
            None
        };
        Ok((logits, tape))
    }

    /// Backward pass for segmentation.
    pub fn backward_segment(&self, tape: &Tape, d_logits: &Tensor<f32>) -> GradSet {
        let mut grads = GradSet::zeros_like(&self.params);
        let levels_n = self.cfg.pyramid_strides().len();
        let head = self.seg_head.as_ref().expect("segmentation head");
        let d_dec = head.backward(
            &self.params,
            tape.seg.as_ref().expect("seg cache"),
            d_logits,
            &mut grads,
        );
        let feat_grads =
            self.decoder
                .backward(&self.params, &tape.decoder, &d_dec, levels_n, &mut grads);
        self.encoder
            .backward(&self.params, &tape.encoder, feat_grads, &mut grads);
        grads
    }
}

/// What [`transfer_weights`] copied and what it freshly initialized.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferManifest {
    pub transferred: Vec<String>,
    pub fresh: Vec<String>,
}

/// Copy all encoder and decoder parameters from a pretrained parameter set
/// into a freshly built fine-tuning network; head parameters stay freshly
/// initialized. Shape mismatches abort with the offending parameter names.
pub fn transfer_weights(
    source: &ParamSet,
    cfg: NetworkConfig,
    seed: u64,
) -> Result<(VectorPoseNet, TransferManifest)> {
    let mut net = VectorPoseNet::new(cfg, seed)?;
    let mut transferred = Vec::new();
    let mut fresh = Vec::new();
    let mut mismatched = Vec::new();
    for idx in 0..net.params.len() {
        let id = crate::nn::ParamId(idx);
        let name = net.params.name(id).to_string();
        if name.starts_with("encoder.") || name.starts_with("decoder.") {
            match source.by_name(&name) {
                Some((src, _)) if src.shape() == net.params.get(id).shape() => {
                    *net.params.get_mut(id) = src.clone();
                    transferred.push(name);
                }
                Some((src, _)) => {
                    mismatched.push(format!(
                        "{name}: source {:?} vs target {:?}",
                        src.shape(),
                        net.params.get(id).shape()
                    ));
                }
                None => mismatched.push(format!("{name}: missing from source")),
            }
        } else {
            fresh.push(name);
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::IncompatibleCheckpoint(mismatched));
    }
    Ok((net, TransferManifest { transferred, fresh }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(seed: u64, shape: &[usize]) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f32>()).collect())
    }

    #[test]
    fn tiny_pretrain_shapes() {
        let cfg = NetworkConfig::default();
        let net = VectorPoseNet::new(cfg, 0).unwrap();
        let x = random_input(1, &[2, 1, 32, 32, 32]);
        let (vp, bfr, _) = net.forward_pretrain(&x, false).unwrap();
        assert_eq!(vp.shape(), &[2, 9, 3]);
        assert_eq!(bfr.shape(), &[2, 2, 32, 32, 32]);
    }

    #[test]
    fn paper_scale_output_shapes() {
        // full-scale ResNet-50 shapes, checked without running the network
        let cfg = NetworkConfig {
            encoder: EncoderVariant::Resnet50_3d,
            base_channels: 64,
            ..NetworkConfig::default()
        };
        let (vp, bfr) = cfg.pretrain_output_shapes([12, 1, 96, 96, 96]).unwrap();
        assert_eq!(vp, [12, 9, 3]);
        assert_eq!(bfr, [12, 2, 96, 96, 96]);

        let seg_cfg = NetworkConfig {
            seg_classes: Some(7),
            ..NetworkConfig::default()
        };
        assert_eq!(
            seg_cfg.segment_output_shape([4, 1, 64, 128, 128]).unwrap(),
            [4, 7, 64, 128, 128]
        );
    }

    #[test]
    fn resnet_variant_runs_at_small_scale() {
        let cfg = NetworkConfig {
            encoder: EncoderVariant::Resnet50_3d,
            base_channels: 4,
            vp_hidden: 16,
            ..NetworkConfig::default()
        };
        let net = VectorPoseNet::new(cfg, 3).unwrap();
        let x = random_input(2, &[1, 1, 32, 32, 32]);
        let (vp, bfr, _) = net.forward_pretrain(&x, false).unwrap();
        assert_eq!(vp.shape(), &[1, 9, 3]);
        assert_eq!(bfr.shape(), &[1, 2, 32, 32, 32]);
        assert!(vp.iter_finite() && bfr.iter_finite());
    }

    #[test]
    fn segment_shapes_and_finiteness() {
        let cfg = NetworkConfig {
            seg_classes: Some(7),
            ..NetworkConfig::default()
        };
        let net = VectorPoseNet::new(cfg, 1).unwrap();
        let x = random_input(3, &[1, 1, 16, 32, 32]);
        let (logits, _) = net.forward_segment(&x, false).unwrap();
        assert_eq!(logits.shape(), &[1, 7, 16, 32, 32]);
        assert!(logits.iter_finite());
    }

    #[test]
    fn indivisible_extents_rejected() {
        let net = VectorPoseNet::new(NetworkConfig::default(), 0).unwrap();
        let x = random_input(4, &[1, 1, 24, 32, 32]);
        assert!(net.forward_pretrain(&x, false).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = VectorPoseNet::new(NetworkConfig::default(), 7).unwrap();
        let x = random_input(5, &[1, 1, 32, 32, 32]);
        let (vp1, bfr1, _) = net.forward_pretrain(&x, false).unwrap();
        let (vp2, bfr2, _) = net.forward_pretrain(&x, false).unwrap();
        assert_eq!(vp1, vp2);
        assert_eq!(bfr1, bfr2);

        let net2 = VectorPoseNet::new(NetworkConfig::default(), 7).unwrap();
        let (vp3, _, _) = net2.forward_pretrain(&x, false).unwrap();
        assert_eq!(vp1, vp3);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        // dead-branch detector: after one step with nonzero loss on both
        // heads, every trainable parameter has a nonzero gradient somewhere
        let net = VectorPoseNet::new(NetworkConfig::default(), 11).unwrap();
        let x = random_input(6, &[2, 1, 32, 32, 32]);
        let (vp, bfr, tape) = net.forward_pretrain(&x, true).unwrap();
        let tape = tape.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d_vp = Tensor::from_vec(
            vp.shape(),
            (0..vp.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        );
        let d_bfr = Tensor::from_vec(
            bfr.shape(),
            (0..bfr.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        );
        let grads = net.backward_pretrain(&tape, &d_vp, &d_bfr);
        for idx in 0..net.params.len() {
            let id = crate::nn::ParamId(idx);
            let any_nonzero = grads.get(id).data().iter().any(|&g| g != 0.0);
            assert!(any_nonzero, "dead parameter {}", net.params.name(id));
        }
    }

    #[test]
    fn zero_bfr_grad_leaves_bfr_head_untouched() {
        let net = VectorPoseNet::new(NetworkConfig::default(), 11).unwrap();
        let x = random_input(6, &[1, 1, 32, 32, 32]);
        let (vp, bfr, tape) = net.forward_pretrain(&x, true).unwrap();
        let tape = tape.unwrap();
        let d_vp = Tensor::full(vp.shape(), 0.1f32);
        let d_bfr = Tensor::zeros(bfr.shape());
        let grads = net.backward_pretrain(&tape, &d_vp, &d_bfr);
        for idx in 0..net.params.len() {
            let id = crate::nn::ParamId(idx);
            let name = net.params.name(id);
            if name.starts_with("bfr_head") {
                assert!(grads.get(id).data().iter().all(|&g| g == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        // spot-check the assembled backward pass against finite differences
        // through the full pretraining forward path
        let cfg = NetworkConfig {
            base_channels: 4,
            vp_hidden: 8,
            n_vectors: 1,
            ..NetworkConfig::default()
        };
        let mut net = VectorPoseNet::new(cfg, 5).unwrap();
        let x = random_input(8, &[1, 1, 16, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (vp, bfr, tape) = net.forward_pretrain(&x, true).unwrap();
        let proj_vp = Tensor::from_vec(
            vp.shape(),
            (0..vp.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        );
        let proj_bfr = Tensor::from_vec(
            bfr.shape(),
            (0..bfr.len()).map(|_| rng.random_range(-0.01f32..0.01)).collect(),
        );
        let grads = net.backward_pretrain(&tape.unwrap(), &proj_vp, &proj_bfr);

        let loss = |net: &VectorPoseNet| -> f64 {
            let (vp, bfr, _) = net.forward_pretrain(&x, false).unwrap();
            let a: f64 = vp
                .data()
                .iter()
                .zip(proj_vp.data())
                .map(|(v, p)| (*v as f64) * (*p as f64))
                .sum();
            let b: f64 = bfr
                .data()
                .iter()
                .zip(proj_bfr.data())
                .map(|(v, p)| (*v as f64) * (*p as f64))
                .sum();
            a + b
        };

        // F32 forward passes cross ReLU kinks under perturbation, so single
        // elements carry curvature noise; mis-routed gradients would show up
        // as O(1) relative errors on every element.
        let picks: Vec<usize> = (0..net.params.len())
            .filter(|&i| {
                let n = net.params.name(crate::nn::ParamId(i));
                n.ends_with("conv.weight") || n.ends_with("fc1.weight")
            })
            .take(8)
            .collect();
        let mut rels = Vec::new();
        for pidx in picks {
            let id = crate::nn::ParamId(pidx);
            let elem = net.params.get(id).len() / 2;
            let orig = net.params.get(id).data()[elem];
            let step = 5e-4f32;
            net.params.get_mut(id).data_mut()[elem] = orig + step;
            let up = loss(&net);
            net.params.get_mut(id).data_mut()[elem] = orig - step;
            let down = loss(&net);
            net.params.get_mut(id).data_mut()[elem] = orig;
            let numeric = (up - down) / (2.0 * step as f64);
            let analytic = grads.get(id).data()[elem] as f64;
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < 0.15,
                "param {} elem {elem}: analytic {analytic}, numeric {numeric}, rel {rel}",
                net.params.name(id)
            );
            rels.push(rel);
        }
        rels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = rels[rels.len() / 2];
        assert!(median < 0.05, "median relative error {median}");
    }

    #[test]
    fn transfer_copies_backbone_and_reinitializes_heads() {
        let pre = VectorPoseNet::new(NetworkConfig::default(), 42).unwrap();
        let ft_cfg = NetworkConfig {
            seg_classes: Some(7),
            ..NetworkConfig::default()
        };
        let (ft, manifest) = transfer_weights(&pre.params, ft_cfg, 43).unwrap();
        assert_eq!(
            manifest.transferred.len() + manifest.fresh.len(),
            ft.params.len()
        );
        for name in &manifest.transferred {
            let (src, _) = pre.params.by_name(name).unwrap();
            let (dst, _) = ft.params.by_name(name).unwrap();
            assert_eq!(src.data(), dst.data(), "{name}");
        }
        assert!(manifest.fresh.iter().any(|n| n.starts_with("seg_head")));
        assert!(!manifest
            .transferred
            .iter()
            .any(|n| n.starts_with("vp_head") || n.starts_with("bfr_head")));
    }

    #[test]
    fn transfer_rejects_mismatched_config() {
        let pre = VectorPoseNet::new(NetworkConfig::default(), 42).unwrap();
        let bad_cfg = NetworkConfig {
            base_channels: 16,
            seg_classes: Some(7),
            ..NetworkConfig::default()
        };
        let err = transfer_weights(&pre.params, bad_cfg, 0).unwrap_err();
        match err {
            Error::IncompatibleCheckpoint(keys) => {
                assert!(keys.iter().any(|k| k.contains("encoder.stage0")), "{keys:?}");
            }
            other => panic!("expected IncompatibleCheckpoint, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn shape_contract_holds_for_valid_configs(
            base in 2usize..6,
            n_sel in 0usize..5,
            seg in 2usize..5,
            db in 1usize..3,
        ) {
            let n_vectors = [0usize, 1, 2, 5, 9][n_sel];
            let cfg = NetworkConfig {
                base_channels: base,
                vp_hidden: 8,
                n_vectors,
                seg_classes: Some(seg),
                ..NetworkConfig::default()
            };
            let net = VectorPoseNet::new(cfg.clone(), 1).unwrap();
            let d = 16 * db;
            let x = random_input(9, &[1, 1, d, 16, 16]);
            let (vp, bfr, _) = net.forward_pretrain(&x, false).unwrap();
            prop_assert_eq!(vp.shape(), &[1, n_vectors, 3]);
            prop_assert_eq!(bfr.shape(), &[1, 2, d, 16, 16]);
            let (seg_out, _) = net.forward_segment(&x, false).unwrap();
            prop_assert_eq!(seg_out.shape(), &[1, seg, d, 16, 16]);
        }
    }
}

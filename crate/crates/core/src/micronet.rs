//! Conditioned encoder-decoder over a frozen latent space.
//!
//! An RGB crop is first mapped to a 4-channel latent by a frozen strided
//! convolution (the stand-in for a pretrained front end). A small U-Net with
//! skip connections then runs over the latent; a learned class embedding plus
//! a fixed timestep scalar is injected additively into every stage, switching
//! the net between reconstructing the latent and predicting keypoint
//! heatmaps. Two heads share the backbone: a 1x1 reconstruction head at
//! latent resolution and a deconvolution pose head that doubles the tapped
//! feature map, so heatmaps come out at a quarter of the input resolution.
//!
//! Everything is f64 internally; checkpoints store parameters as f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageBuf;
use crate::nn::{
    concat_channels, crop, crop_backward, silu, silu_backward, split_channels, upsample2x,
    upsample2x_backward, Conv2d, ConvT2d, GroupNorm, Linear, Param, Tensor,
};
use crate::rng::{rng_for_item, stream};

pub const LATENT_CHANNELS: usize = 4;
const GN_GROUP_SIZE: usize = 4;
const CKPT_MAGIC: &[u8; 4] = b"PFNC";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid net config: {0}")]
    BadConfig(String),
    #[error("input size mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    SizeMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("tensor shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("timestep {t} outside schedule of length {t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },
    #[error("invalid schedule range: {0}")]
    InvalidRange(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint block {name}: expected {expected} values, got {got}")]
    ParamBlockMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    #[default]
    Last,
    SecondToLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Input crop size as (width, height).
    pub input_size: (usize, usize),
    #[serde(default = "default_latent_stride")]
    pub latent_stride: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Heatmap channel count.
    pub k: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub feature_tap: FeatureTap,
    /// When set, the pose head's trainable output is squeezed to this many
    /// channels and expanded back to `k` by a frozen 1x1 map.
    #[serde(default)]
    pub head_bottleneck: Option<usize>,
}

fn default_latent_stride() -> usize {
    8
}
fn default_base_channels() -> usize {
    16
}
fn default_depth() -> usize {
    3
}
fn default_embed_dim() -> usize {
    8
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let (w, h) = self.input_size;
        if self.latent_stride != 8 {
            return Err(NetError::BadConfig(format!(
                "latent_stride must be 8, got {}",
                self.latent_stride
            )));
        }
        if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 || w % 4 != 0 || h % 4 != 0 {
            return Err(NetError::BadConfig(format!(
                "input size {}x{} must be divisible by 8 and by 4",
                w, h
            )));
        }
        if self.depth < 2 {
            return Err(NetError::BadConfig(format!(
                "depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.base_channels < GN_GROUP_SIZE || self.base_channels % GN_GROUP_SIZE != 0 {
            return Err(NetError::BadConfig(format!(
                "base_channels must be a positive multiple of {}, got {}",
                GN_GROUP_SIZE, self.base_channels
            )));
        }
        if self.k == 0 {
            return Err(NetError::BadConfig("k must be positive".into()));
        }
        if self.embed_dim == 0 {
            return Err(NetError::BadConfig("embed_dim must be positive".into()));
        }
        if let Some(b) = self.head_bottleneck {
            if b == 0 {
                return Err(NetError::BadConfig(
                    "head_bottleneck width must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Latent grid size as (width, height).
    pub fn latent_size(&self) -> (usize, usize) {
        (
            self.input_size.0 / self.latent_stride,
            self.input_size.1 / self.latent_stride,
        )
    }

    /// Pose head output size as (width, height), a quarter of the input.
    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.input_size.0 / 4, self.input_size.1 / 4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLabel {
    Rgb,
    Pose,
}

impl TaskLabel {
    /// One-hot class label: [1,0] selects the pose task, [0,1] the RGB task.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            TaskLabel::Pose => [1.0, 0.0],
            TaskLabel::Rgb => [0.0, 1.0],
        }
    }

    fn row(self) -> usize {
        match self {
            TaskLabel::Pose => 0,
            TaskLabel::Rgb => 1,
        }
    }
}

/// Two-row embedding table indexed by the one-hot task label.
#[derive(Debug, Clone)]
pub struct TaskEmbedding {
    pub embed_dim: usize,
    pub table: Param,
}

impl TaskEmbedding {
    fn new(embed_dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        TaskEmbedding {
            embed_dim,
            table: Param::uniform(2 * embed_dim, 1.0, rng),
        }
    }

    pub fn lookup(&self, label: TaskLabel) -> &[f64] {
        let r = label.row();
        &self.table.val[r * self.embed_dim..(r + 1) * self.embed_dim]
    }

    fn accumulate_grad(&mut self, label: TaskLabel, g: &[f64]) {
        let r = label.row();
        for (i, gi) in g.iter().enumerate() {
            self.table.grad[r * self.embed_dim + i] += gi;
        }
    }
}

/// conv -> groupnorm -> +cond bias -> silu
#[derive(Debug, Clone)]
struct ConvStage {
    conv: Conv2d,
    norm: GroupNorm,
    cond: Linear,
}

impl ConvStage {
    fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        cond_in: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        ConvStage {
            conv: Conv2d::new(in_c, out_c, k, stride, pad, rng),
            norm: GroupNorm::new(out_c, GN_GROUP_SIZE),
            cond: Linear::new(cond_in, out_c, rng),
        }
    }
}

#[derive(Debug, Clone)]
struct StageTrace {
    input: Tensor,
    conv_out: Tensor,
    pre_act: Tensor,
    out: Tensor,
}

fn stage_forward(stage: &ConvStage, x: &Tensor, cond_vec: &[f64]) -> StageTrace {
    let conv_out = stage.conv.forward(x);
    let mut pre_act = stage.norm.forward(&conv_out);
    let bias = stage.cond.forward(cond_vec);
    for c in 0..pre_act.c {
        for y in 0..pre_act.h {
            for xx in 0..pre_act.w {
                *pre_act.at_mut(c, y, xx) += bias[c];
            }
        }
    }
    let out = silu(&pre_act);
    StageTrace {
        input: x.clone(),
        conv_out,
        pre_act,
        out,
    }
}

fn stage_backward(
    stage: &mut ConvStage,
    trace: &StageTrace,
    grad_out: &Tensor,
    cond_vec: &[f64],
    cond_grad: &mut [f64],
) -> Tensor {
    let g_pre = silu_backward(&trace.pre_act, grad_out);
    let mut g_bias = vec![0.0; g_pre.c];
    for c in 0..g_pre.c {
        for y in 0..g_pre.h {
            for xx in 0..g_pre.w {
                g_bias[c] += g_pre.at(c, y, xx);
            }
        }
    }
    let g_cond = stage.cond.backward(cond_vec, &g_bias);
    for (acc, g) in cond_grad.iter_mut().zip(&g_cond) {
        *acc += g;
    }
    let g_conv = stage.norm.backward(&trace.conv_out, &g_pre);
    stage.conv.backward(&trace.input, &g_conv)
}

/// deconv(k4 s2) -> silu -> 1x1 -> silu -> 1x1, optionally squeezed through a
/// frozen expansion.
#[derive(Debug, Clone)]
pub struct PoseHead {
    deconv: ConvT2d,
    mid: Conv2d,
    out: Conv2d,
    expand: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct PoseTrace {
    input: Tensor,
    d_pre: Tensor,
    d_act: Tensor,
    m_pre: Tensor,
    m_act: Tensor,
    squeezed: Option<Tensor>,
}

impl PoseHead {
    fn new(
        in_c: usize,
        hidden: usize,
        k_out: usize,
        bottleneck: Option<usize>,
        rng: &mut rand_chacha::ChaCha8Rng,
        expand_rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let trainable_out = bottleneck.unwrap_or(k_out);
        PoseHead {
            deconv: ConvT2d::new(in_c, hidden, 4, 2, 1, rng),
            mid: Conv2d::new(hidden, hidden, 1, 1, 0, rng),
            out: Conv2d::new(hidden, trainable_out, 1, 1, 0, rng),
            expand: bottleneck.map(|b| Conv2d::new(b, k_out, 1, 1, 0, expand_rng)),
        }
    }

    fn forward(&self, x: &Tensor) -> (PoseTrace, Tensor) {
        let d_pre = self.deconv.forward(x);
        let d_act = silu(&d_pre);
        let m_pre = self.mid.forward(&d_act);
        let m_act = silu(&m_pre);
        let o = self.out.forward(&m_act);
        let (squeezed, final_out) = match &self.expand {
            Some(exp) => {
                let expanded = exp.forward(&o);
                (Some(o), expanded)
            }
            None => (None, o),
        };
        (
            PoseTrace {
                input: x.clone(),
                d_pre,
                d_act,
                m_pre,
                m_act,
                squeezed,
            },
            final_out,
        )
    }

    fn backward(&mut self, trace: &PoseTrace, grad_out: &Tensor) -> Tensor {
        let g_o = match (&mut self.expand, &trace.squeezed) {
            (Some(exp), Some(sq)) => exp.backward(sq, grad_out),
            _ => grad_out.clone(),
        };
        let g_m_act = self.out.backward(&trace.m_act, &g_o);
        let g_m_pre = silu_backward(&trace.m_pre, &g_m_act);
        let g_d_act = self.mid.backward(&trace.d_act, &g_m_pre);
        let g_d_pre = silu_backward(&trace.d_pre, &g_d_act);
        self.deconv.backward(&trace.input, &g_d_pre)
    }
}

#[derive(Debug, Clone)]
struct UpInfo {
    pre_h: usize,
    pre_w: usize,
    path_c: usize,
}

/// Full forward record: everything backward() needs to replay the pass.
pub struct ForwardTrace {
    pub task: TaskLabel,
    cond_vec: Vec<f64>,
    enc: Vec<StageTrace>,
    bottleneck: StageTrace,
    dec_up: Vec<(UpInfo, StageTrace)>,
    final_stage: StageTrace,
    pose: Option<PoseTrace>,
    pub tapped: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct MicroUNet {
    pub config: NetConfig,
    pub seed: u64,
    pub step: u64,
    /// Fixed timestep conditioning scalar t/T.
    pub t_cond: f64,
    frozen_encoder: Conv2d,
    pub task_embed: TaskEmbedding,
    enc: Vec<ConvStage>,
    bottleneck: ConvStage,
    dec_up: Vec<ConvStage>,
    dec_final: ConvStage,
    recon_head: Conv2d,
    pose_head: PoseHead,
}

impl MicroUNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let b = config.base_channels;
        let depth = config.depth;
        let cond_in = config.embed_dim + 1;

        let mut r = rng_for_item(seed, stream::NET_INIT, 0);
        let frozen_encoder = Conv2d::new(3, LATENT_CHANNELS, 8, 8, 0, &mut r);
        let mut r = rng_for_item(seed, stream::NET_INIT, 1);
        let task_embed = TaskEmbedding::new(config.embed_dim, &mut r);

        let width = |i: usize| b << i;
        let mut enc = Vec::with_capacity(depth);
        for i in 0..depth {
            let mut r = rng_for_item(seed, stream::NET_INIT, 10 + i as u64);
            if i == 0 {
                enc.push(ConvStage::new(LATENT_CHANNELS, b, 3, 1, 1, cond_in, &mut r));
            } else {
                enc.push(ConvStage::new(width(i - 1), width(i), 3, 2, 1, cond_in, &mut r));
            }
        }
        let mut r = rng_for_item(seed, stream::NET_INIT, 20);
        let bottleneck = ConvStage::new(width(depth - 1), width(depth - 1), 3, 1, 1, cond_in, &mut r);

        let mut dec_up = Vec::with_capacity(depth - 1);
        for j in 0..depth - 1 {
            let mut r = rng_for_item(seed, stream::NET_INIT, 30 + j as u64);
            let path_c = width(depth - 1 - j);
            let skip_c = width(depth - 2 - j);
            dec_up.push(ConvStage::new(path_c + skip_c, skip_c, 3, 1, 1, cond_in, &mut r));
        }
        let mut r = rng_for_item(seed, stream::NET_INIT, 30 + (depth - 1) as u64);
        let dec_final = ConvStage::new(b, b, 3, 1, 1, cond_in, &mut r);

        let mut r = rng_for_item(seed, stream::NET_INIT, 40);
        let recon_head = Conv2d::new(b, LATENT_CHANNELS, 1, 1, 0, &mut r);
        let mut r = rng_for_item(seed, stream::NET_INIT, 50);
        let mut r_exp = rng_for_item(seed, stream::NET_INIT, 51);
        let pose_head = PoseHead::new(b, 2 * b, config.k, config.head_bottleneck, &mut r, &mut r_exp);

        Ok(MicroUNet {
            config,
            seed,
            step: 0,
            t_cond: 1.0,
            frozen_encoder,
            task_embed,
            enc,
            bottleneck,
            dec_up,
            dec_final,
            recon_head,
            pose_head,
        })
    }

    /// Frozen map from an RGB crop to the 4-channel latent grid.
    pub fn encode_latent(&self, img: &ImageBuf) -> Result<Tensor, NetError> {
        let (w, h) = self.config.input_size;
        if img.w != w || img.h != h {
            return Err(NetError::SizeMismatch {
                expected_w: w,
                expected_h: h,
                got_w: img.w,
                got_h: img.h,
            });
        }
        let mut x = Tensor::zeros(3, h, w);
        for y in 0..h {
            for xx in 0..w {
                let px = img.get(xx, y);
                for c in 0..3 {
                    *x.at_mut(c, y, xx) = px[c];
                }
            }
        }
        Ok(self.frozen_encoder.forward(&x))
    }

    fn cond_vec(&self, task: TaskLabel) -> Vec<f64> {
        let mut v = self.task_embed.lookup(task).to_vec();
        v.push(self.t_cond);
        v
    }

    pub fn forward_trace(&self, z: &Tensor, task: TaskLabel) -> Result<ForwardTrace, NetError> {
        let (lw, lh) = self.config.latent_size();
        if z.shape() != (LATENT_CHANNELS, lh, lw) {
            return Err(NetError::ShapeMismatch {
                expected: (LATENT_CHANNELS, lh, lw),
                got: z.shape(),
            });
        }
        let cond_vec = self.cond_vec(task);
        let depth = self.config.depth;

        let mut enc = Vec::with_capacity(depth);
        let mut cur = z.clone();
        for stage in &self.enc {
            let tr = stage_forward(stage, &cur, &cond_vec);
            cur = tr.out.clone();
            enc.push(tr);
        }
        let bottleneck = stage_forward(&self.bottleneck, &cur, &cond_vec);
        cur = bottleneck.out.clone();

        let mut dec_up = Vec::with_capacity(depth - 1);
        for (j, stage) in self.dec_up.iter().enumerate() {
            let up = upsample2x(&cur);
            let skip = &enc[depth - 2 - j].out;
            let cropped = crop(&up, skip.h, skip.w);
            let cat = concat_channels(&cropped, skip);
            let tr = stage_forward(stage, &cat, &cond_vec);
            dec_up.push((
                UpInfo {
                    pre_h: up.h,
                    pre_w: up.w,
                    path_c: cur.c,
                },
                tr,
            ));
            cur = dec_up.last().unwrap().1.out.clone();
        }
        let final_stage = stage_forward(&self.dec_final, &cur, &cond_vec);

        let tapped = match self.config.feature_tap {
            FeatureTap::Last => final_stage.out.clone(),
            FeatureTap::SecondToLast => dec_up[depth - 2].1.out.clone(),
        };
        let (pose, output) = match task {
            TaskLabel::Rgb => (None, self.recon_head.forward(&final_stage.out)),
            TaskLabel::Pose => {
                let (tr, out) = self.pose_head.forward(&tapped);
                (Some(tr), out)
            }
        };
        Ok(ForwardTrace {
            task,
            cond_vec,
            enc,
            bottleneck,
            dec_up,
            final_stage,
            pose,
            tapped,
            output,
        })
    }

    /// Plain forward pass: returns (head output, tapped features).
    pub fn forward(&self, z: &Tensor, task: TaskLabel) -> Result<(Tensor, Tensor), NetError> {
        let tr = self.forward_trace(z, task)?;
        Ok((tr.output, tr.tapped))
    }

    /// Single-pass pose inference on an RGB crop; output is K x H/4 x W/4.
    pub fn infer_pose(&self, img: &ImageBuf) -> Result<Tensor, NetError> {
        let z = self.encode_latent(img)?;
        Ok(self.forward_trace(&z, TaskLabel::Pose)?.output)
    }

    /// Accumulates parameter gradients for d(loss)/d(output) = `grad_output`.
    pub fn backward(&mut self, trace: &ForwardTrace, grad_output: &Tensor) {
        assert_eq!(grad_output.shape(), trace.output.shape(), "grad shape");
        let depth = self.config.depth;
        let mut cond_grad = vec![0.0; trace.cond_vec.len()];

        // Gradient entering the backbone, expressed at the final stage output
        // and/or at the last upsampling stage output.
        let (g_final, g_second): (Option<Tensor>, Option<Tensor>) = match trace.task {
            TaskLabel::Rgb => {
                let g = self
                    .recon_head
                    .backward(&trace.final_stage.out, grad_output);
                (Some(g), None)
            }
            TaskLabel::Pose => {
                let g = self
                    .pose_head
                    .backward(trace.pose.as_ref().unwrap(), grad_output);
                match self.config.feature_tap {
                    FeatureTap::Last => (Some(g), None),
                    FeatureTap::SecondToLast => (None, Some(g)),
                }
            }
        };

        let mut g_cur = match g_final {
            Some(gf) => stage_backward(
                &mut self.dec_final,
                &trace.final_stage,
                &gf,
                &trace.cond_vec,
                &mut cond_grad,
            ),
            None => {
                let o = &trace.dec_up[depth - 2].1.out;
                Tensor::zeros(o.c, o.h, o.w)
            }
        };
        if let Some(gs) = g_second {
            for (a, b) in g_cur.data.iter_mut().zip(&gs.data) {
                *a += b;
            }
        }

        let mut skip_grads: Vec<Option<Tensor>> = vec![None; depth];
        for j in (0..depth - 1).rev() {
            let (info, tr) = &trace.dec_up[j];
            let g_cat = stage_backward(
                &mut self.dec_up[j],
                tr,
                &g_cur,
                &trace.cond_vec,
                &mut cond_grad,
            );
            let (g_path, g_skip) = split_channels(&g_cat, info.path_c);
            skip_grads[depth - 2 - j] = Some(g_skip);
            let g_up = crop_backward(&g_path, info.pre_h, info.pre_w);
            g_cur = upsample2x_backward(&g_up);
        }

        g_cur = stage_backward(
            &mut self.bottleneck,
            &trace.bottleneck,
            &g_cur,
            &trace.cond_vec,
            &mut cond_grad,
        );
        for i in (0..depth).rev() {
            if let Some(sg) = &skip_grads[i] {
                for (a, b) in g_cur.data.iter_mut().zip(&sg.data) {
                    *a += b;
                }
            }
            g_cur = stage_backward(
                &mut self.enc[i],
                &trace.enc[i],
                &g_cur,
                &trace.cond_vec,
                &mut cond_grad,
            );
        }
        // The gradient w.r.t. z stops here: the patch encoder is frozen.

        self.task_embed
            .accumulate_grad(trace.task, &cond_grad[..self.config.embed_dim]);
    }

    fn visit_stage<'a>(
        prefix: &str,
        stage: &'a ConvStage,
        f: &mut dyn FnMut(String, &'a Param),
    ) {
        f(format!("{}.conv.weight", prefix), &stage.conv.weight);
        f(format!("{}.conv.bias", prefix), &stage.conv.bias);
        f(format!("{}.norm.gamma", prefix), &stage.norm.gamma);
        f(format!("{}.norm.beta", prefix), &stage.norm.beta);
        f(format!("{}.cond.weight", prefix), &stage.cond.weight);
        f(format!("{}.cond.bias", prefix), &stage.cond.bias);
    }

    fn visit_stage_mut(
        prefix: &str,
        stage: &mut ConvStage,
        f: &mut dyn FnMut(String, &mut Param),
    ) {
        f(format!("{}.conv.weight", prefix), &mut stage.conv.weight);
        f(format!("{}.conv.bias", prefix), &mut stage.conv.bias);
        f(format!("{}.norm.gamma", prefix), &mut stage.norm.gamma);
        f(format!("{}.norm.beta", prefix), &mut stage.norm.beta);
        f(format!("{}.cond.weight", prefix), &mut stage.cond.weight);
        f(format!("{}.cond.bias", prefix), &mut stage.cond.bias);
    }

    /// Walks every parameter block in declaration order, frozen ones
    /// included. Block names are stable; checkpoints and the optimizer rely
    /// on this order.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Param)) {
        f("frozen_encoder.weight".into(), &self.frozen_encoder.weight);
        f("frozen_encoder.bias".into(), &self.frozen_encoder.bias);
        f("task_embed.table".into(), &self.task_embed.table);
        for (i, s) in self.enc.iter().enumerate() {
            Self::visit_stage(&format!("enc{}", i), s, f);
        }
        Self::visit_stage("bottleneck", &self.bottleneck, f);
        for (j, s) in self.dec_up.iter().enumerate() {
            Self::visit_stage(&format!("dec{}", j), s, f);
        }
        Self::visit_stage("dec_final", &self.dec_final, f);
        f("recon_head.weight".into(), &self.recon_head.weight);
        f("recon_head.bias".into(), &self.recon_head.bias);
        f("pose_head.deconv.weight".into(), &self.pose_head.deconv.weight);
        f("pose_head.deconv.bias".into(), &self.pose_head.deconv.bias);
        f("pose_head.mid.weight".into(), &self.pose_head.mid.weight);
        f("pose_head.mid.bias".into(), &self.pose_head.mid.bias);
        f("pose_head.out.weight".into(), &self.pose_head.out.weight);
        f("pose_head.out.bias".into(), &self.pose_head.out.bias);
        if let Some(exp) = &self.pose_head.expand {
            f("pose_head.expand.weight".into(), &exp.weight);
            f("pose_head.expand.bias".into(), &exp.bias);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        f("frozen_encoder.weight".into(), &mut self.frozen_encoder.weight);
        f("frozen_encoder.bias".into(), &mut self.frozen_encoder.bias);
        f("task_embed.table".into(), &mut self.task_embed.table);
        for (i, s) in self.enc.iter_mut().enumerate() {
            Self::visit_stage_mut(&format!("enc{}", i), s, f);
        }
        Self::visit_stage_mut("bottleneck", &mut self.bottleneck, f);
        for (j, s) in self.dec_up.iter_mut().enumerate() {
            Self::visit_stage_mut(&format!("dec{}", j), s, f);
        }
        Self::visit_stage_mut("dec_final", &mut self.dec_final, f);
        f("recon_head.weight".into(), &mut self.recon_head.weight);
        f("recon_head.bias".into(), &mut self.recon_head.bias);
        f("pose_head.deconv.weight".into(), &mut self.pose_head.deconv.weight);
        f("pose_head.deconv.bias".into(), &mut self.pose_head.deconv.bias);
        f("pose_head.mid.weight".into(), &mut self.pose_head.mid.weight);
        f("pose_head.mid.bias".into(), &mut self.pose_head.mid.bias);
        f("pose_head.out.weight".into(), &mut self.pose_head.out.weight);
        f("pose_head.out.bias".into(), &mut self.pose_head.out.bias);
        if let Some(exp) = &mut self.pose_head.expand {
            f("pose_head.expand.weight".into(), &mut exp.weight);
            f("pose_head.expand.bias".into(), &mut exp.bias);
        }
    }

    /// Frozen blocks: the patch encoder and, when present, the pose head's
    /// fixed expansion map.
    pub fn is_frozen(name: &str) -> bool {
        name.starts_with("frozen_encoder.") || name.starts_with("pose_head.expand.")
    }

    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.visit_params_mut(&mut |name, p| {
            if !Self::is_frozen(&name) {
                f(name, p);
            }
        });
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    pub fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |name, p| {
            if !Self::is_frozen(&name) {
                n += p.len();
            }
        });
        n
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.input_size.0,
            c.input_size.1,
            c.latent_stride,
            c.base_channels,
            c.depth,
            c.k,
            c.embed_dim,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.push(match c.feature_tap {
            FeatureTap::Last => 0,
            FeatureTap::SecondToLast => 1,
        });
        buf.extend_from_slice(&(c.head_bottleneck.unwrap_or(0) as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.t_cond.to_le_bytes());

        let mut blocks: Vec<(String, Vec<f32>)> = Vec::new();
        self.visit_params(&mut |name, p| {
            blocks.push((name, p.val.iter().map(|&v| v as f32).collect()));
        });
        buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, vals) in blocks {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(vals.len() as u32).to_le_bytes());
            for v in vals {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CKPT_MAGIC {
            return Err(NetError::BadCheckpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CKPT_VERSION {
            return Err(NetError::BadCheckpoint(format!(
                "unsupported version {}",
                version
            )));
        }
        let w = cur.u32()? as usize;
        let h = cur.u32()? as usize;
        let latent_stride = cur.u32()? as usize;
        let base_channels = cur.u32()? as usize;
        let depth = cur.u32()? as usize;
        let k = cur.u32()? as usize;
        let embed_dim = cur.u32()? as usize;
        let tap = match cur.u8()? {
            0 => FeatureTap::Last,
            1 => FeatureTap::SecondToLast,
            t => return Err(NetError::BadCheckpoint(format!("unknown tap {}", t))),
        };
        let bott = cur.u32()? as usize;
        let seed = cur.u64()?;
        let step = cur.u64()?;
        let t_cond = cur.f64()?;
        let config = NetConfig {
            input_size: (w, h),
            latent_stride,
            base_channels,
            depth,
            k,
            embed_dim,
            feature_tap: tap,
            head_bottleneck: if bott == 0 { None } else { Some(bott) },
        };
        let mut net = MicroUNet::new(config, seed)?;
        net.step = step;
        net.t_cond = t_cond;

        let n_blocks = cur.u32()? as usize;
        let mut stored: Vec<(String, Vec<f64>)> = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| NetError::BadCheckpoint("non-utf8 block name".into()))?;
            let n = cur.u32()? as usize;
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                vals.push(cur.f32()? as f64);
            }
            stored.push((name, vals));
        }
        let mut idx = 0usize;
        let mut err: Option<NetError> = None;
        net.visit_params_mut(&mut |name, p| {
            if err.is_some() {
                return;
            }
            if idx >= stored.len() {
                err = Some(NetError::BadCheckpoint(format!(
                    "missing block {}",
                    name
                )));
                return;
            }
            let (sname, vals) = &stored[idx];
            if *sname != name {
                err = Some(NetError::BadCheckpoint(format!(
                    "block order mismatch: expected {}, found {}",
                    name, sname
                )));
                return;
            }
            if vals.len() != p.len() {
                err = Some(NetError::ParamBlockMismatch {
                    name,
                    expected: p.len(),
                    got: vals.len(),
                });
                return;
            }
            p.val.copy_from_slice(vals);
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != stored.len() {
            return Err(NetError::BadCheckpoint(format!(
                "{} extra parameter blocks",
                stored.len() - idx
            )));
        }
        Ok(net)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::BadCheckpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, NetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, NetError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
    pub fixed_t: usize,
}

impl DiffusionSchedule {
    /// Linear ramp over 1000 steps, beta from 1e-4 to 0.02, conditioning
    /// pinned to the final timestep.
    pub fn default_schedule() -> Self {
        make_schedule(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Cumulative alpha for 1-based timestep t.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, NetError> {
        if t == 0 || t > self.len() {
            return Err(NetError::TimestepOutOfRange {
                t,
                t_max: self.len(),
            });
        }
        Ok(self.alphas_cumprod[t - 1])
    }

    pub fn t_norm(&self) -> f64 {
        self.fixed_t as f64 / self.len() as f64
    }
}

pub fn make_schedule(t_steps: usize, beta_lo: f64, beta_hi: f64) -> Result<DiffusionSchedule, NetError> {
    if t_steps == 0 {
        return Err(NetError::InvalidRange("schedule length must be positive".into()));
    }
    if !(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0) {
        return Err(NetError::InvalidRange(format!(
            "need 0 < beta_lo <= beta_hi < 1, got [{}, {}]",
            beta_lo, beta_hi
        )));
    }
    let mut betas = Vec::with_capacity(t_steps);
    for s in 0..t_steps {
        let f = if t_steps == 1 {
            0.0
        } else {
            s as f64 / (t_steps - 1) as f64
        };
        betas.push(beta_lo + (beta_hi - beta_lo) * f);
    }
    let mut alphas_cumprod = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alphas_cumprod.push(prod);
    }
    Ok(DiffusionSchedule {
        betas,
        alphas_cumprod,
        fixed_t: t_steps,
    })
}

/// Recovers the clean latent from a noisy one and a noise estimate:
/// x0 = (z_t - sqrt(1 - a_t) * eps) / sqrt(a_t).
pub fn eps_to_x0(
    z_t: &Tensor,
    eps_hat: &Tensor,
    sched: &DiffusionSchedule,
    t: usize,
) -> Result<Tensor, NetError> {
    if z_t.shape() != eps_hat.shape() {
        return Err(NetError::ShapeMismatch {
            expected: z_t.shape(),
            got: eps_hat.shape(),
        });
    }
    let a = sched.alpha_bar(t)?;
    let sqrt_a = a.sqrt();
    let sqrt_oma = (1.0 - a).sqrt();
    let mut out = Tensor::zeros(z_t.c, z_t.h, z_t.w);
    for i in 0..z_t.data.len() {
        out.data[i] = (z_t.data[i] - sqrt_oma * eps_hat.data[i]) / sqrt_a;
    }
    Ok(out)
}

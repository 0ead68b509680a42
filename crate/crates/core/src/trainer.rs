//! Multi-task optimization: the summed two-pass loss, deterministic training
//! loop, optimizers, and a finite-difference gradient checker.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{Heatmap, HeatmapConfig};
use crate::image::ImageBuf;
use crate::micronet::{FeatureTap, MicroUNet, NetConfig, NetError, TaskLabel};
use crate::nn::Tensor;
use crate::rng::{rng_for, rng_for_item, stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss or gradient at step {step}")]
    NumericFailure { step: u64 },
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("heatmap target is {got_k}x{got_w}x{got_h}, net expects {want_k}x{want_w}x{want_h}")]
    TargetShape {
        got_k: usize,
        got_w: usize,
        got_h: usize,
        want_k: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("log write: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Reference hyperparameters for a full-scale deployment, carried through
/// config files purely as documentation. The trainer never reads them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperScale {
    pub optimizer: String,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// (w_rgb, w_pose)
    #[serde(default = "default_loss_weights")]
    pub loss_weights: (f64, f64),
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    /// Decoupled decay; 0 disables it.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_true")]
    pub recon_enabled: bool,
    /// See [`PaperScale`]; optional and inert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paper_scale: Option<PaperScale>,
}

fn default_lr() -> f64 {
    3e-3
}
fn default_batch_size() -> usize {
    2
}
fn default_loss_weights() -> (f64, f64) {
    (1.0, 1.0)
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            steps: 0,
            batch_size: default_batch_size(),
            seed: 0,
            loss_weights: default_loss_weights(),
            optimizer: OptimizerKind::default(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: 0.0,
            recon_enabled: true,
            paper_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(TrainError::BadConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        let (wr, wp) = self.loss_weights;
        if !(wr >= 0.0 && wp >= 0.0) {
            return Err(TrainError::BadConfig(format!(
                "loss weights must be >= 0, got ({}, {})",
                wr, wp
            )));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(TrainError::BadConfig("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(TrainError::BadConfig("eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::BadConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_rgb: f64,
    pub loss_pose: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: f64,
    pub rgb: f64,
    pub pose: f64,
}

fn check_target(net: &MicroUNet, gt: &Heatmap) -> Result<(), TrainError> {
    let (want_w, want_h) = net.config.heatmap_size();
    let (got_w, got_h) = gt.config.heatmap_size;
    if gt.num_channels() != net.config.k || got_w != want_w || got_h != want_h {
        return Err(TrainError::TargetShape {
            got_k: gt.num_channels(),
            got_w,
            got_h,
            want_k: net.config.k,
            want_w,
            want_h,
        });
    }
    Ok(())
}

/// Masked mean-square error of the pose output against the target heatmap,
/// restricted to supervised channels. Returns the loss and the gradient
/// w.r.t. the prediction (zero on unsupervised channels).
fn pose_mse(pred: &Tensor, gt: &Heatmap) -> (f64, Tensor) {
    let plane = pred.h * pred.w;
    let n_sup = gt.supervised.iter().filter(|&&s| s).count();
    let mut grad = Tensor::zeros(pred.c, pred.h, pred.w);
    if n_sup == 0 {
        return (0.0, grad);
    }
    let denom = (n_sup * plane) as f64;
    let mut loss = 0.0;
    for k in 0..pred.c {
        if !gt.supervised[k] {
            continue;
        }
        let target = gt.channel(k);
        let p = &pred.data[k * plane..(k + 1) * plane];
        let g = &mut grad.data[k * plane..(k + 1) * plane];
        for i in 0..plane {
            let d = p[i] - target[i];
            loss += d * d;
            g[i] = 2.0 * d / denom;
        }
    }
    (loss / denom, grad)
}

fn latent_mse(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let n = pred.numel() as f64;
    let mut grad = Tensor::zeros(pred.c, pred.h, pred.w);
    let mut loss = 0.0;
    for i in 0..pred.data.len() {
        let d = pred.data[i] - target.data[i];
        loss += d * d;
        grad.data[i] = 2.0 * d / n;
    }
    (loss / n, grad)
}

/// Forward-only loss evaluation. The RGB term reconstructs the frozen
/// latent of the input; the pose term is the masked heatmap MSE. Both
/// passes run on the same latent.
pub fn multitask_loss(
    net: &MicroUNet,
    img: &ImageBuf,
    gt: &Heatmap,
    cfg: &TrainConfig,
) -> Result<LossTerms, TrainError> {
    check_target(net, gt)?;
    let z = net.encode_latent(img)?;
    let (w_rgb, w_pose) = cfg.loss_weights;
    let rgb = if cfg.recon_enabled {
        let (recon, _) = net.forward(&z, TaskLabel::Rgb)?;
        latent_mse(&recon, &z).0
    } else {
        0.0
    };
    let (pose_out, _) = net.forward(&z, TaskLabel::Pose)?;
    let pose = pose_mse(&pose_out, gt).0;
    Ok(LossTerms {
        total: w_rgb * rgb + w_pose * pose,
        rgb,
        pose,
    })
}

/// Loss plus gradient accumulation. Parameter gradients from both task
/// passes are summed into the net, scaled by `scale` (the batch averaging
/// factor). Returns the unscaled per-sample terms.
pub fn multitask_loss_backward(
    net: &mut MicroUNet,
    img: &ImageBuf,
    gt: &Heatmap,
    cfg: &TrainConfig,
    scale: f64,
) -> Result<LossTerms, TrainError> {
    check_target(net, gt)?;
    let z = net.encode_latent(img)?;
    let (w_rgb, w_pose) = cfg.loss_weights;

    let rgb = if cfg.recon_enabled {
        let trace = net.forward_trace(&z, TaskLabel::Rgb)?;
        let (loss, mut grad) = latent_mse(&trace.output, &z);
        for g in &mut grad.data {
            *g *= w_rgb * scale;
        }
        net.backward(&trace, &grad);
        loss
    } else {
        0.0
    };

    let trace = net.forward_trace(&z, TaskLabel::Pose)?;
    let (pose, mut grad) = pose_mse(&trace.output, gt);
    for g in &mut grad.data {
        *g *= w_pose * scale;
    }
    net.backward(&trace, &grad);

    Ok(LossTerms {
        total: w_rgb * rgb + w_pose * pose,
        rgb,
        pose,
    })
}

/// L2 norm of all trainable gradients.
pub fn grad_norm(net: &MicroUNet) -> f64 {
    let mut s = 0.0;
    net.visit_params(&mut |name, p| {
        if !MicroUNet::is_frozen(&name) {
            for g in &p.grad {
                s += g * g;
            }
        }
    });
    s.sqrt()
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state, one slot per trainable block in visit order.
pub struct Optimizer {
    kind: OptimizerKind,
    t: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(net: &mut MicroUNet, cfg: &TrainConfig) -> Self {
        let mut slots = Vec::new();
        net.visit_trainable_mut(&mut |_, p| {
            slots.push(Slot {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
        });
        Optimizer {
            kind: cfg.optimizer,
            t: 0,
            slots,
        }
    }

    pub fn step(&mut self, net: &mut MicroUNet, cfg: &TrainConfig) {
        self.t += 1;
        let lr = cfg.lr;
        let (b1, b2, eps, wd) = (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let mut i = 0usize;
        let kind = self.kind;
        let slots = &mut self.slots;
        net.visit_trainable_mut(&mut |_, p| {
            let slot = &mut slots[i];
            i += 1;
            match kind {
                OptimizerKind::Sgd => {
                    for j in 0..p.len() {
                        let g = p.grad[j] + wd * p.val[j];
                        p.val[j] -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    for j in 0..p.len() {
                        let g = p.grad[j];
                        slot.m[j] = b1 * slot.m[j] + (1.0 - b1) * g;
                        slot.v[j] = b2 * slot.v[j] + (1.0 - b2) * g * g;
                        let mhat = slot.m[j] / bc1;
                        let vhat = slot.v[j] / bc2;
                        p.val[j] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p.val[j]);
                    }
                }
            }
        });
    }
}

/// Deterministic training data: `sample` must be a pure function of
/// (index, rng state).
pub trait SampleSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> (ImageBuf, Heatmap);
}

/// Fixed in-memory samples, returned as-is.
pub struct SliceSource<'a>(pub &'a [(ImageBuf, Heatmap)]);

impl SampleSource for SliceSource<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn sample(&self, index: usize, _rng: &mut ChaCha8Rng) -> (ImageBuf, Heatmap) {
        self.0[index].clone()
    }
}

pub fn train(
    net: &mut MicroUNet,
    source: &dyn SampleSource,
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>, TrainError> {
    train_with_log(net, source, cfg, None)
}

/// Runs the loop, optionally streaming each `StepRecord` as a JSON line.
///
/// Batch indices come from the training stream of the config seed;
/// per-sample rngs are derived from the augmentation stream and a global
/// item counter, so the draw sequence does not depend on batch layout.
pub fn train_with_log(
    net: &mut MicroUNet,
    source: &dyn SampleSource,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepRecord>, TrainError> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (w_rgb, w_pose) = cfg.loss_weights;
    let mut pick_rng = rng_for(cfg.seed, stream::TRAIN);
    let mut opt = Optimizer::new(net, cfg);
    let mut records = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch_size as f64;

    for s in 0..cfg.steps as u64 {
        net.zero_grads();
        let mut sum_rgb = 0.0;
        let mut sum_pose = 0.0;
        for b in 0..cfg.batch_size as u64 {
            let index = pick_rng.gen_range(0..source.len());
            let item = s * cfg.batch_size as u64 + b;
            let mut item_rng = rng_for_item(cfg.seed, stream::AUGMENT, item);
            let (img, hm) = source.sample(index, &mut item_rng);
            let terms = multitask_loss_backward(net, &img, &hm, cfg, scale)?;
            sum_rgb += terms.rgb;
            sum_pose += terms.pose;
        }
        let loss_rgb = sum_rgb * scale;
        let loss_pose = sum_pose * scale;
        let loss_total = w_rgb * loss_rgb + w_pose * loss_pose;
        let gn = grad_norm(net);
        if !loss_total.is_finite() || !gn.is_finite() {
            return Err(TrainError::NumericFailure { step: s });
        }
        opt.step(net, cfg);
        net.step += 1;
        let rec = StepRecord {
            step: s,
            loss_total,
            loss_rgb,
            loss_pose,
            grad_norm: gn,
        };
        if let Some(out) = log.as_deref_mut() {
            let line = serde_json::to_string(&rec).expect("step record serializes");
            writeln!(out, "{}", line)?;
        }
        records.push(rec);
    }
    Ok(records)
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)` over the block.
    pub rel_err: f64,
    pub max_abs_diff: f64,
    /// Entry with the largest absolute analytic/numeric gap.
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    /// Per-block results, worst first.
    pub blocks: Vec<BlockReport>,
    pub max_rel_err: f64,
}

fn add_to_entry(net: &mut MicroUNet, block: usize, entry: usize, delta: f64) {
    let mut bi = 0usize;
    net.visit_trainable_mut(&mut |_, p| {
        if bi == block {
            p.val[entry] += delta;
        }
        bi += 1;
    });
}

/// Compares every trainable analytic gradient against central finite
/// differences (h = 1e-3) of the multi-task loss. The error is reported per
/// parameter block as a norm ratio: an entrywise quotient at fixed h is
/// floored by O(h^2) truncation wherever a single gradient entry happens to
/// sit near zero, so the block norm is the scale the comparison is made on.
/// With `corrupt` set, the first block's analytic gradient is deliberately
/// damaged so the checker's own sensitivity can be verified.
pub fn gradcheck(
    net: &mut MicroUNet,
    img: &ImageBuf,
    gt: &Heatmap,
    cfg: &TrainConfig,
    corrupt: bool,
) -> Result<GradcheckReport, TrainError> {
    net.zero_grads();
    multitask_loss_backward(net, img, gt, cfg, 1.0)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    net.visit_params(&mut |name, p| {
        if !MicroUNet::is_frozen(&name) {
            analytic.push((name, p.grad.clone()));
        }
    });
    if corrupt {
        for g in analytic[0].1.iter_mut() {
            *g = -*g;
        }
        analytic[0].1[0] += 0.05;
    }

    let h = 1e-3;
    let mut blocks = Vec::with_capacity(analytic.len());
    let mut overall = 0.0f64;
    for (bi, (name, grads)) in analytic.iter().enumerate() {
        let mut diff_sq = 0.0f64;
        let mut a_sq = 0.0f64;
        let mut n_sq = 0.0f64;
        let mut max_abs_diff = 0.0f64;
        let mut worst_index = 0usize;
        for (j, &a) in grads.iter().enumerate() {
            add_to_entry(net, bi, j, h);
            let lp = multitask_loss(net, img, gt, cfg)?.total;
            add_to_entry(net, bi, j, -2.0 * h);
            let lm = multitask_loss(net, img, gt, cfg)?.total;
            add_to_entry(net, bi, j, h);
            let numeric = (lp - lm) / (2.0 * h);
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            if (a - numeric).abs() > max_abs_diff {
                max_abs_diff = (a - numeric).abs();
                worst_index = j;
            }
        }
        let denom = a_sq.sqrt().max(n_sq.sqrt()).max(1e-12);
        let e = diff_sq.sqrt() / denom;
        overall = overall.max(e);
        blocks.push(BlockReport {
            name: name.clone(),
            rel_err: e,
            max_abs_diff,
            worst_index,
        });
    }
    blocks.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    Ok(GradcheckReport {
        blocks,
        max_rel_err: overall,
    })
}

/// Deterministic fixture for the gradient checker and its command-line entry
/// point: a 16x16 base-4 net config plus a random input image and supervised
/// target, sized so central differences over every parameter stay fast.
pub fn gradcheck_fixture(seed: u64) -> (NetConfig, ImageBuf, Heatmap) {
    let net_cfg = NetConfig {
        input_size: (16, 16),
        latent_stride: 8,
        base_channels: 4,
        depth: 2,
        k: 3,
        embed_dim: 4,
        feature_tap: FeatureTap::Last,
        head_bottleneck: None,
    };
    let hm_cfg = HeatmapConfig {
        input_size: (16, 16),
        heatmap_size: (4, 4),
        sigma: 1.0,
        supervise_occluded: true,
    };
    let mut rng = rng_for(seed, stream::SELFTEST);
    let mut img = ImageBuf::new(16, 16);
    for v in &mut img.data {
        *v = rng.gen_range(0.0..1.0);
    }
    let mut hm = Heatmap::zeros(net_cfg.k, hm_cfg);
    for v in &mut hm.data {
        *v = rng.gen_range(0.0..1.0);
    }
    hm.supervised = vec![true; net_cfg.k];
    (net_cfg, img, hm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, stream};

    pub(super) fn tiny_net_config() -> NetConfig {
        NetConfig {
            input_size: (16, 16),
            latent_stride: 8,
            base_channels: 4,
            depth: 2,
            k: 3,
            embed_dim: 4,
            feature_tap: FeatureTap::Last,
            head_bottleneck: None,
        }
    }

    fn tiny_heatmap_config() -> HeatmapConfig {
        HeatmapConfig {
            input_size: (16, 16),
            heatmap_size: (4, 4),
            sigma: 1.0,
            supervise_occluded: true,
        }
    }

    pub(super) fn random_image(seed: u64) -> ImageBuf {
        let mut rng = rng_for(seed, stream::SELFTEST);
        let mut img = ImageBuf::new(16, 16);
        for v in &mut img.data {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    pub(super) fn random_target(seed: u64) -> Heatmap {
        let mut rng = rng_for(seed, stream::SELFTEST);
        let mut hm = Heatmap::zeros(3, tiny_heatmap_config());
        for v in &mut hm.data {
            *v = rng.gen_range(0.0..1.0);
        }
        hm.supervised = vec![true, true, true];
        hm
    }

    fn quick_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 1,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_net_against_offset_targets_gives_loss_two() {
        let mut net = MicroUNet::new(tiny_net_config(), 3).unwrap();
        net.visit_trainable_mut(&mut |_, p| p.val.iter_mut().for_each(|v| *v = 0.0));
        // With all trainable weights zero the trunk emits zeros, so each head
        // outputs its bias. Offset both outputs from their targets by one.
        let img = ImageBuf::new(16, 16);
        let z = net.encode_latent(&img).unwrap();
        let mut bias = vec![0.0; 4];
        for c in 0..4 {
            bias[c] = z.at(c, 0, 0) + 1.0;
        }
        net.visit_trainable_mut(&mut |name, p| {
            if name == "recon_head.bias" {
                p.val.copy_from_slice(&bias);
            }
            if name == "pose_head.out.bias" {
                p.val.iter_mut().for_each(|v| *v = 1.0);
            }
        });
        let mut gt = Heatmap::zeros(3, tiny_heatmap_config());
        gt.supervised = vec![true, true, true];
        let terms = multitask_loss(&net, &img, &gt, &quick_cfg(0)).unwrap();
        assert_eq!(terms.rgb, 1.0);
        assert_eq!(terms.pose, 1.0);
        assert_eq!(terms.total, 2.0);
    }

    #[test]
    fn matching_pose_targets_give_zero_loss() {
        let net = MicroUNet::new(tiny_net_config(), 5).unwrap();
        let img = random_image(1);
        let z = net.encode_latent(&img).unwrap();
        let (pose_out, _) = net.forward(&z, TaskLabel::Pose).unwrap();
        let mut gt = Heatmap::zeros(3, tiny_heatmap_config());
        gt.data.copy_from_slice(&pose_out.data);
        gt.supervised = vec![true, true, true];
        let cfg = TrainConfig {
            recon_enabled: false,
            ..quick_cfg(0)
        };
        let terms = multitask_loss(&net, &img, &gt, &cfg).unwrap();
        assert_eq!(terms.total, 0.0);
        assert_eq!(terms.rgb, 0.0);
        assert_eq!(terms.pose, 0.0);
    }

    #[test]
    fn disabled_recon_keeps_recon_head_gradient_free() {
        let mut net = MicroUNet::new(tiny_net_config(), 7).unwrap();
        let img = random_image(2);
        let gt = random_target(3);
        let cfg = TrainConfig {
            recon_enabled: false,
            ..quick_cfg(0)
        };
        net.zero_grads();
        let terms = multitask_loss_backward(&mut net, &img, &gt, &cfg, 1.0).unwrap();
        assert_eq!(terms.rgb, 0.0);
        net.visit_params(&mut |name, p| {
            if name.starts_with("recon_head.") {
                assert!(p.grad.iter().all(|&g| g == 0.0), "{} has gradient", name);
            }
        });
    }

    #[test]
    fn unsupervised_channels_are_masked_out_of_the_loss() {
        let net = MicroUNet::new(tiny_net_config(), 9).unwrap();
        let img = random_image(4);
        let mut gt = random_target(5);
        let full = multitask_loss(&net, &img, &gt, &quick_cfg(0)).unwrap().pose;

        // Wreck an unsupervised channel's target; the loss must not move.
        gt.supervised = vec![true, false, true];
        let masked = multitask_loss(&net, &img, &gt, &quick_cfg(0)).unwrap().pose;
        gt.channel_mut(1).iter_mut().for_each(|v| *v = 1e6);
        let masked2 = multitask_loss(&net, &img, &gt, &quick_cfg(0)).unwrap().pose;
        assert_eq!(masked, masked2);
        assert_ne!(full, masked);

        gt.supervised = vec![false, false, false];
        assert_eq!(multitask_loss(&net, &img, &gt, &quick_cfg(0)).unwrap().pose, 0.0);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let samples = vec![
            (random_image(10), random_target(11)),
            (random_image(12), random_target(13)),
            (random_image(14), random_target(15)),
        ];
        let cfg = TrainConfig {
            batch_size: 2,
            ..quick_cfg(6)
        };
        let mut net_a = MicroUNet::new(tiny_net_config(), 21).unwrap();
        let rec_a = train(&mut net_a, &SliceSource(&samples), &cfg).unwrap();
        let mut net_b = MicroUNet::new(tiny_net_config(), 21).unwrap();
        let rec_b = train(&mut net_b, &SliceSource(&samples), &cfg).unwrap();
        assert_eq!(net_a.to_bytes(), net_b.to_bytes());
        assert_eq!(
            serde_json::to_string(&rec_a).unwrap(),
            serde_json::to_string(&rec_b).unwrap()
        );
    }

    #[test]
    fn zero_lr_keeps_parameters_and_losses_constant() {
        let samples = vec![(random_image(30), random_target(31))];
        let cfg = TrainConfig {
            lr: 0.0,
            ..quick_cfg(4)
        };
        let mut net = MicroUNet::new(tiny_net_config(), 23).unwrap();
        let before = net.to_bytes();
        let recs = train(&mut net, &SliceSource(&samples), &cfg).unwrap();
        let mut after = MicroUNet::from_bytes(&net.to_bytes()).unwrap();
        after.step = 0;
        assert_eq!(after.to_bytes(), before);
        for r in &recs {
            assert_eq!(r.loss_total, recs[0].loss_total);
        }
    }

    #[test]
    fn step_records_satisfy_the_sum_identity() {
        let samples = vec![
            (random_image(40), random_target(41)),
            (random_image(42), random_target(43)),
        ];
        let cfg = TrainConfig {
            loss_weights: (0.7, 1.3),
            batch_size: 2,
            ..quick_cfg(5)
        };
        let mut net = MicroUNet::new(tiny_net_config(), 29).unwrap();
        let recs = train(&mut net, &SliceSource(&samples), &cfg).unwrap();
        assert_eq!(recs.len(), 5);
        for r in &recs {
            let expect = 0.7 * r.loss_rgb + 1.3 * r.loss_pose;
            let rel = (r.loss_total - expect).abs() / expect.abs().max(1.0);
            assert!(rel < 1e-9, "step {}: {} vs {}", r.step, r.loss_total, expect);
            assert!(r.grad_norm.is_finite() && r.grad_norm > 0.0);
        }
    }

    #[test]
    fn frozen_blocks_survive_training_bit_for_bit() {
        let samples = vec![(random_image(50), random_target(51))];
        let mut cfg_net = tiny_net_config();
        cfg_net.head_bottleneck = Some(2);
        let mut net = MicroUNet::new(cfg_net, 31).unwrap();
        let mut before = Vec::new();
        net.visit_params(&mut |name, p| {
            if MicroUNet::is_frozen(&name) {
                before.push((name, p.val.clone()));
            }
        });
        train(&mut net, &SliceSource(&samples), &quick_cfg(5)).unwrap();
        let mut idx = 0;
        net.visit_params(&mut |name, p| {
            if MicroUNet::is_frozen(&name) {
                assert_eq!(before[idx].0, name);
                assert!(
                    before[idx].1.iter().zip(&p.val).all(|(a, b)| a.to_bits() == b.to_bits()),
                    "{} drifted",
                    name
                );
                idx += 1;
            }
        });
        assert_eq!(idx, before.len());
    }

    #[test]
    fn pose_loss_drops_when_overfitting_one_sample() {
        let samples = vec![(random_image(60), random_target(61))];
        let cfg = quick_cfg(150);
        let mut net = MicroUNet::new(tiny_net_config(), 37).unwrap();
        let recs = train(&mut net, &SliceSource(&samples), &cfg).unwrap();
        let first = recs.first().unwrap().loss_pose;
        let last = recs.last().unwrap().loss_pose;
        assert!(
            last < first,
            "pose loss did not decrease: {} -> {}",
            first,
            last
        );
        assert!(last < 0.5 * first, "weak fit: {} -> {}", first, last);
    }

    #[test]
    fn recon_toggle_does_not_change_the_architecture() {
        let net = MicroUNet::new(tiny_net_config(), 41).unwrap();
        let img = random_image(70);
        let z = net.encode_latent(&img).unwrap();
        // Same untrained net, recon on or off: the pose pass is identical.
        let (a, _) = net.forward(&z, TaskLabel::Pose).unwrap();
        let (b, _) = net.forward(&z, TaskLabel::Pose).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn sgd_step_is_exactly_minus_lr_grad() {
        let samples = vec![(random_image(80), random_target(81))];
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            ..quick_cfg(1)
        };
        let mut net = MicroUNet::new(tiny_net_config(), 43).unwrap();

        // Replicate the single training step by hand.
        let mut reference = net.clone();
        reference.zero_grads();
        let mut pick = rng_for(cfg.seed, stream::TRAIN);
        let idx = pick.gen_range(0..samples.len());
        multitask_loss_backward(&mut reference, &samples[idx].0, &samples[idx].1, &cfg, 1.0)
            .unwrap();
        let mut expected: Vec<(String, Vec<f64>)> = Vec::new();
        reference.visit_params(&mut |name, p| {
            if !MicroUNet::is_frozen(&name) {
                expected.push((
                    name,
                    p.val.iter().zip(&p.grad).map(|(v, g)| v - 0.01 * g).collect(),
                ));
            }
        });

        train(&mut net, &SliceSource(&samples), &cfg).unwrap();
        let mut i = 0;
        net.visit_params(&mut |name, p| {
            if !MicroUNet::is_frozen(&name) {
                assert_eq!(expected[i].0, name);
                for (a, b) in expected[i].1.iter().zip(&p.val) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{} diverged", name);
                }
                i += 1;
            }
        });
    }

    #[test]
    fn adam_first_step_matches_the_update_rule() {
        let samples = vec![(random_image(90), random_target(91))];
        let cfg = TrainConfig {
            lr: 0.002,
            ..quick_cfg(1)
        };
        let mut net = MicroUNet::new(tiny_net_config(), 47).unwrap();
        let mut reference = net.clone();
        reference.zero_grads();
        let mut pick = rng_for(cfg.seed, stream::TRAIN);
        let idx = pick.gen_range(0..samples.len());
        multitask_loss_backward(&mut reference, &samples[idx].0, &samples[idx].1, &cfg, 1.0)
            .unwrap();

        train(&mut net, &SliceSource(&samples), &cfg).unwrap();
        let mut updated: Vec<Vec<f64>> = Vec::new();
        net.visit_params(&mut |name, p| {
            if !MicroUNet::is_frozen(&name) {
                updated.push(p.val.clone());
            }
        });
        let mut i = 0;
        reference.visit_params(&mut |name, p| {
            if !MicroUNet::is_frozen(&name) {
                for (j, (&v, &g)) in p.val.iter().zip(&p.grad).enumerate() {
                    // First Adam step: mhat = g, vhat = g^2.
                    let want = v - 0.002 * (g / (g.abs() + 1e-8));
                    let got = updated[i][j];
                    assert!(
                        (want - got).abs() <= 1e-12 * want.abs().max(1.0),
                        "{}[{}]: want {}, got {}",
                        name,
                        j,
                        want,
                        got
                    );
                }
                i += 1;
            }
        });
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut net = MicroUNet::new(tiny_net_config(), 53).unwrap();
        let err = train(&mut net, &SliceSource(&[]), &quick_cfg(1)).unwrap_err();
        assert!(matches!(err, TrainError::EmptyDataset));
    }

    #[test]
    fn nan_parameters_trip_the_numeric_guard() {
        let samples = vec![(random_image(95), random_target(96))];
        let mut net = MicroUNet::new(tiny_net_config(), 59).unwrap();
        net.visit_trainable_mut(&mut |name, p| {
            if name == "bottleneck.conv.bias" {
                p.val[0] = f64::NAN;
            }
        });
        let err = train(&mut net, &SliceSource(&samples), &quick_cfg(3)).unwrap_err();
        assert!(matches!(err, TrainError::NumericFailure { step: 0 }));
    }

    #[test]
    fn train_log_streams_one_json_line_per_step() {
        let samples = vec![(random_image(97), random_target(98))];
        let mut net = MicroUNet::new(tiny_net_config(), 61).unwrap();
        let mut buf: Vec<u8> = Vec::new();
        let recs =
            train_with_log(&mut net, &SliceSource(&samples), &quick_cfg(3), Some(&mut buf))
                .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for (line, rec) in lines.iter().zip(&recs) {
            let parsed: StepRecord = serde_json::from_str(line).unwrap();
            assert_eq!(parsed.step, rec.step);
            assert_eq!(parsed.loss_total, rec.loss_total);
        }
    }

    #[test]
    fn gradcheck_passes_on_the_tiny_config() {
        let mut net = MicroUNet::new(tiny_net_config(), 67).unwrap();
        let img = random_image(100);
        let gt = random_target(101);
        let report = gradcheck(&mut net, &img, &gt, &quick_cfg(0), false).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "worst block {} err {}",
            report.blocks[0].name,
            report.max_rel_err
        );
        // Sorted worst-first.
        for w in report.blocks.windows(2) {
            assert!(w[0].rel_err >= w[1].rel_err);
        }
    }

    #[test]
    fn gradcheck_flags_a_corrupted_gradient() {
        let mut net = MicroUNet::new(tiny_net_config(), 71).unwrap();
        let img = random_image(110);
        let gt = random_target(111);
        let report = gradcheck(&mut net, &img, &gt, &quick_cfg(0), true).unwrap();
        assert!(
            report.max_rel_err > 1e-2,
            "corruption went unnoticed: {}",
            report.max_rel_err
        );
    }
}

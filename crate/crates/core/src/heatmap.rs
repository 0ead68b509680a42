//! Gaussian heatmap encoding and continuous-domain decoding.
//!
//! Targets live on a grid at exactly 1/4 of the input resolution. A keypoint
//! at heatmap coordinates `(x, y)` produces channel values
//! `H(u, v) = exp(-((u-x)^2 + (v-y)^2) / (2 sigma^2))` evaluated at integer
//! grid positions; the Gaussian is evaluated as written, with no peak
//! renormalization, so the maximum equals the closed form
//! `exp(-r^2 / (2 sigma^2))` for sub-pixel offset `r`. Decoding refines the
//! integer argmax with one Newton step on the log-space quadratic fit of the
//! 3x3 neighborhood, which is exact for sampled Gaussians.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::udp_resize_transform;
use crate::skeleton::{PersonInstance, SkeletonSpec, Visibility};

/// Encoded values below this are clamped to zero.
pub const VALUE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("invalid heatmap config: {0}")]
    InvalidConfig(String),
    #[error("instance has {got} keypoints, heatmap expects {expected}")]
    KeypointCountMismatch { got: usize, expected: usize },
    #[error("heatmap blob has {got} bytes, expected {expected}")]
    BlobSizeMismatch { expected: usize, got: usize },
    #[error("heatmap blob header is malformed")]
    BadBlobHeader,
}

/// Geometry and supervision policy for heatmap targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    /// Network input resolution `(W, H)`; both divisible by 4.
    pub input_size: (usize, usize),
    /// Heatmap grid `(W', H')`, exactly `(W/4, H/4)`.
    pub heatmap_size: (usize, usize),
    /// Gaussian std in heatmap pixels.
    pub sigma: f64,
    /// When false, occluded keypoints (v=1) get zero channels like v=0.
    pub supervise_occluded: bool,
}

impl HeatmapConfig {
    /// Config for a given input resolution; the heatmap grid is derived.
    pub fn for_input(
        input_size: (usize, usize),
        sigma: f64,
        supervise_occluded: bool,
    ) -> Result<Self, HeatmapError> {
        let cfg = Self {
            input_size,
            heatmap_size: (input_size.0 / 4, input_size.1 / 4),
            sigma,
            supervise_occluded,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HeatmapError> {
        let (w, h) = self.input_size;
        if w % 4 != 0 || h % 4 != 0 {
            return Err(HeatmapError::InvalidConfig(format!(
                "input size {w}x{h} not divisible by 4"
            )));
        }
        if self.heatmap_size != (w / 4, h / 4) {
            return Err(HeatmapError::InvalidConfig(format!(
                "heatmap size {:?} is not input/4",
                self.heatmap_size
            )));
        }
        if w / 4 < 2 || h / 4 < 2 {
            return Err(HeatmapError::InvalidConfig(format!("heatmap grid {}x{} too small", w / 4, h / 4)));
        }
        if !(self.sigma > 0.0) {
            return Err(HeatmapError::InvalidConfig(format!("sigma = {} must be > 0", self.sigma)));
        }
        Ok(())
    }
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            input_size: (192, 256),
            heatmap_size: (48, 64),
            sigma: 2.0,
            supervise_occluded: true,
        }
    }
}

/// One decoded keypoint in input-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedKeypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// A stack of K per-keypoint heatmap channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `K * H' * W'` values, channel-major then row-major.
    pub data: Vec<f64>,
    /// Per-channel supervision mask; unsupervised channels are all zero.
    pub supervised: Vec<bool>,
    pub config: HeatmapConfig,
}

impl Heatmap {
    pub fn zeros(k: usize, config: HeatmapConfig) -> Self {
        let (w, h) = config.heatmap_size;
        Self { data: vec![0.0; k * w * h], supervised: vec![false; k], config }
    }

    pub fn num_channels(&self) -> usize {
        self.supervised.len()
    }

    #[inline]
    pub fn channel(&self, k: usize) -> &[f64] {
        let (w, h) = self.config.heatmap_size;
        &self.data[k * w * h..(k + 1) * w * h]
    }

    #[inline]
    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let (w, h) = self.config.heatmap_size;
        &mut self.data[k * w * h..(k + 1) * w * h]
    }

    #[inline]
    pub fn at(&self, k: usize, u: usize, v: usize) -> f64 {
        let (w, _) = self.config.heatmap_size;
        self.channel(k)[v * w + u]
    }

    /// Serializes to the flat binary blob format: little-endian header
    /// `(K: u32, W': u32, H': u32, sigma: f32)` followed by `K*H'*W'` f32
    /// values in storage order. Data is truncated from f64 to f32.
    pub fn to_blob(&self) -> Vec<u8> {
        let (w, h) = self.config.heatmap_size;
        let k = self.num_channels();
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.sigma as f32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Parses a blob written by [`to_blob`](Self::to_blob). The input size is
    /// reconstructed as 4x the heatmap grid (the only size a valid config
    /// allows); the supervision mask is recovered from the all-zero-channel
    /// invariant.
    pub fn from_blob(bytes: &[u8]) -> Result<Heatmap, HeatmapError> {
        if bytes.len() < 16 {
            return Err(HeatmapError::BadBlobHeader);
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let k = u32_at(0) as usize;
        let w = u32_at(4) as usize;
        let h = u32_at(8) as usize;
        let sigma = f32::from_le_bytes(bytes[12..16].try_into().unwrap()) as f64;
        let cells = k
            .checked_mul(w)
            .and_then(|n| n.checked_mul(h))
            .ok_or(HeatmapError::BadBlobHeader)?;
        let expected = 16 + cells * 4;
        if bytes.len() != expected {
            return Err(HeatmapError::BlobSizeMismatch { expected, got: bytes.len() });
        }
        let config = HeatmapConfig {
            input_size: (w * 4, h * 4),
            heatmap_size: (w, h),
            sigma,
            supervise_occluded: true,
        };
        config.validate()?;
        let data: Vec<f64> = (0..cells)
            .map(|i| f32::from_le_bytes(bytes[16 + i * 4..20 + i * 4].try_into().unwrap()) as f64)
            .collect();
        let supervised = (0..k)
            .map(|ch| data[ch * w * h..(ch + 1) * w * h].iter().any(|&v| v != 0.0))
            .collect();
        Ok(Heatmap { data, supervised, config })
    }
}

/// Renders Gaussian target channels for every supervised keypoint.
///
/// Keypoints with v=0 (and v=1 when `supervise_occluded` is off), and
/// keypoints whose center lies more than `3 sigma` outside the heatmap grid,
/// produce all-zero unsupervised channels; the latter case is flagged in the
/// mask rather than treated as an error.
pub fn encode(
    inst: &PersonInstance,
    cfg: &HeatmapConfig,
    spec: &SkeletonSpec,
) -> Result<Heatmap, HeatmapError> {
    cfg.validate()?;
    if inst.keypoints.len() != spec.k {
        return Err(HeatmapError::KeypointCountMismatch {
            got: inst.keypoints.len(),
            expected: spec.k,
        });
    }
    let to_hm = udp_resize_transform(cfg.input_size, cfg.heatmap_size)
        .expect("validated config has non-degenerate sizes");
    let (w, h) = cfg.heatmap_size;
    let mut hm = Heatmap::zeros(spec.k, *cfg);
    let inv_two_sigma_sq = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let margin = 3.0 * cfg.sigma;

    for (k, kp) in inst.keypoints.iter().enumerate() {
        let supervised_v = match kp.v {
            Visibility::Unlabeled => false,
            Visibility::Occluded => cfg.supervise_occluded,
            Visibility::Visible => true,
        };
        if !supervised_v {
            continue;
        }
        let (x, y) = to_hm.apply(kp.x, kp.y);
        if x < -margin || x > (w - 1) as f64 + margin || y < -margin || y > (h - 1) as f64 + margin
        {
            // KeypointOutsideGrid: zero channel, flagged unsupervised.
            continue;
        }
        hm.supervised[k] = true;
        let chan = hm.channel_mut(k);
        for v in 0..h {
            let dy = v as f64 - y;
            for u in 0..w {
                let dx = u as f64 - x;
                let val = (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
                chan[v * w + u] = if val < VALUE_FLOOR { 0.0 } else { val };
            }
        }
    }
    Ok(hm)
}

/// Integer argmax of one channel; first occurrence wins on exact ties.
fn channel_argmax(chan: &[f64], w: usize, h: usize) -> (usize, usize, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut pos = (0, 0);
    for v in 0..h {
        for u in 0..w {
            let val = chan[v * w + u];
            if val > best {
                best = val;
                pos = (u, v);
            }
        }
    }
    (pos.0, pos.1, best)
}

/// Decodes each channel to sub-pixel heatmap-grid coordinates.
///
/// The integer argmax is refined by a Newton step on the log-space quadratic
/// fit of its 3x3 neighborhood. Refinement is skipped when the argmax touches
/// the border, a neighbor is zero (log undefined), or the fitted Hessian is
/// not negative definite; the confidence is always the raw value at the
/// integer argmax. All-zero channels decode to `(0, 0)` with confidence 0.
pub fn decode_heatmap_coords(hm: &Heatmap) -> Vec<DecodedKeypoint> {
    let (w, h) = hm.config.heatmap_size;
    let mut out = Vec::with_capacity(hm.num_channels());
    for k in 0..hm.num_channels() {
        let chan = hm.channel(k);
        let (u, v, peak) = channel_argmax(chan, w, h);
        if !(peak > 0.0) {
            out.push(DecodedKeypoint { x: 0.0, y: 0.0, confidence: 0.0 });
            continue;
        }
        let mut x = u as f64;
        let mut y = v as f64;
        let on_border = u == 0 || u == w - 1 || v == 0 || v == h - 1;
        if !on_border {
            let val = |du: isize, dv: isize| {
                chan[(v as isize + dv) as usize * w + (u as isize + du) as usize]
            };
            let mut neighborhood_positive = true;
            'scan: for dv in -1..=1 {
                for du in -1..=1 {
                    if val(du, dv) <= 0.0 {
                        neighborhood_positive = false;
                        break 'scan;
                    }
                }
            }
            if neighborhood_positive {
                let l = |du: isize, dv: isize| val(du, dv).ln();
                let gx = (l(1, 0) - l(-1, 0)) / 2.0;
                let gy = (l(0, 1) - l(0, -1)) / 2.0;
                let hxx = l(1, 0) - 2.0 * l(0, 0) + l(-1, 0);
                let hyy = l(0, 1) - 2.0 * l(0, 0) + l(0, -1);
                let hxy = (l(1, 1) - l(1, -1) - l(-1, 1) + l(-1, -1)) / 4.0;
                let det = hxx * hyy - hxy * hxy;
                // Newton step -H^-1 g, only at a proper local maximum.
                if det > 1e-12 && hxx < 0.0 {
                    let ox = -(hyy * gx - hxy * gy) / det;
                    let oy = -(hxx * gy - hxy * gx) / det;
                    if ox.abs() <= 1.0 && oy.abs() <= 1.0 {
                        x += ox;
                        y += oy;
                    }
                }
            }
        }
        out.push(DecodedKeypoint { x, y, confidence: peak });
    }
    out
}

/// Decodes each channel to input-image coordinates via the inverse UDP map.
pub fn decode(hm: &Heatmap) -> Vec<DecodedKeypoint> {
    let from_hm = udp_resize_transform(hm.config.heatmap_size, hm.config.input_size)
        .expect("valid config has non-degenerate sizes");
    decode_heatmap_coords(hm)
        .into_iter()
        .map(|d| {
            if d.confidence == 0.0 {
                return d;
            }
            let (x, y) = from_hm.apply(d.x, d.y);
            DecodedKeypoint { x, y, confidence: d.confidence }
        })
        .collect()
}

/// Mirrors every channel about the vertical axis (`u -> W'-1-u`) and swaps
/// left/right channels according to the skeleton's flip pairs.
pub fn flip_heatmap(hm: &Heatmap, spec: &SkeletonSpec) -> Result<Heatmap, HeatmapError> {
    let map = crate::skeleton::flip_index_map(spec).map_err(|e| {
        HeatmapError::InvalidConfig(format!("flip map: {e}"))
    })?;
    if map.len() != hm.num_channels() {
        return Err(HeatmapError::KeypointCountMismatch {
            got: hm.num_channels(),
            expected: map.len(),
        });
    }
    let (w, h) = hm.config.heatmap_size;
    let mut out = Heatmap::zeros(hm.num_channels(), hm.config);
    for (dst, &src) in map.iter().enumerate() {
        let src_chan = hm.channel(src);
        let dst_chan = out.channel_mut(dst);
        for v in 0..h {
            for u in 0..w {
                dst_chan[v * w + u] = src_chan[v * w + (w - 1 - u)];
            }
        }
        out.supervised[dst] = hm.supervised[src];
    }
    Ok(out)
}

//! UDP-consistent coordinate mappings, crop transforms, and augmentation.
//!
//! Every mapping between pixel grids uses the unit-length corner-aligned
//! convention: a `W`-wide grid spans `[0, W-1]` in continuous coordinates, and
//! resizing maps `x' = x * (W'-1) / (W-1)`, so corner pixels land exactly on
//! corner pixels. Keeping this one convention everywhere (resize, crop, flip,
//! heatmap grid) is what makes flipped decoding agree with direct decoding at
//! sub-pixel precision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageBuf;
use crate::skeleton::{flip_index_map, BBox, Keypoint, PersonInstance, SkeletonSpec};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate grid size {w}x{h}, both dims must be >= 2")]
    DegenerateSize { w: usize, h: usize },
    #[error("transform is singular (|det| = {det:e})")]
    SingularTransform { det: f64 },
    #[error("invalid crop: {0}")]
    InvalidCropSpec(String),
    #[error("invalid augmentation config: {0}")]
    InvalidAugConfig(String),
    #[error(transparent)]
    Skeleton(#[from] crate::skeleton::SkeletonError),
}

/// Row-major 2x3 affine transform on the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2D {
    /// `[[a, b, tx], [c, d, ty]]`; applies as `x' = a x + b y + tx`.
    pub m: [[f64; 3]; 2],
}

impl Affine2D {
    pub fn identity() -> Self {
        Self { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { m: [[1.0, 0.0, tx], [0.0, 1.0, ty]] }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }

    /// `self` after `other`: `(self.compose(other)).apply(p) = self.apply(other.apply(p))`.
    pub fn compose(&self, other: &Affine2D) -> Affine2D {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..2 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            m[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Affine2D { m }
    }

    pub fn inverse(&self) -> Result<Affine2D, GeometryError> {
        let det = self.det();
        if det.abs() <= 1e-12 {
            return Err(GeometryError::SingularTransform { det });
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(Affine2D {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }
}

/// A rotated crop window and the grid it maps onto.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Window center in source-image pixels.
    pub center: (f64, f64),
    /// Window extent in source-image pixels, measured in unit-length spans:
    /// `scale = output_size - 1` means no resampling.
    pub scale: (f64, f64),
    /// Window rotation in degrees; positive rotates the window
    /// counterclockwise in image coordinates (y down).
    pub rotation: f64,
    /// Destination grid size `(W, H)`.
    pub output_size: (usize, usize),
}

impl CropSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let (w, h) = self.output_size;
        if w < 2 || h < 2 {
            return Err(GeometryError::DegenerateSize { w, h });
        }
        if !(self.scale.0 > 0.0 && self.scale.1 > 0.0) {
            return Err(GeometryError::InvalidCropSpec(format!(
                "non-positive scale ({}, {})",
                self.scale.0, self.scale.1
            )));
        }
        if !(self.center.0.is_finite() && self.center.1.is_finite() && self.rotation.is_finite()) {
            return Err(GeometryError::InvalidCropSpec("non-finite field".into()));
        }
        Ok(())
    }
}

/// Training-time augmentation parameters.
///
/// Ranges are inclusive `(lo, hi)` pairs. `blur_prob` applies independently to
/// the Gaussian and the median blur. Blur strengths are configuration values,
/// not fixed constants: sigma is drawn from `blur_sigma_range` and the median
/// kernel from `median_kernels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub flip_prob: f64,
    pub half_body_prob: f64,
    pub half_body_min_kpts: usize,
    /// Multiplicative jitter on crop scale.
    pub scale_jitter: (f64, f64),
    /// Additive jitter on crop rotation, degrees.
    pub rotation_jitter: (f64, f64),
    pub blur_prob: f64,
    #[serde(default = "default_dropout_prob")]
    pub dropout_prob: f64,
    /// Hole side length as a fraction of the matching image side.
    pub dropout_hole_frac: (f64, f64),
    #[serde(default = "default_blur_sigma_range")]
    pub blur_sigma_range: (f64, f64),
    #[serde(default = "default_median_kernels")]
    pub median_kernels: Vec<usize>,
}

fn default_dropout_prob() -> f64 {
    1.0
}

fn default_blur_sigma_range() -> (f64, f64) {
    (0.1, 2.0)
}

fn default_median_kernels() -> Vec<usize> {
    vec![3, 5]
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            half_body_prob: 0.3,
            half_body_min_kpts: 8,
            scale_jitter: (0.5, 1.5),
            rotation_jitter: (-40.0, 40.0),
            blur_prob: 0.1,
            dropout_prob: 1.0,
            dropout_hole_frac: (0.2, 0.4),
            blur_sigma_range: default_blur_sigma_range(),
            median_kernels: default_median_kernels(),
        }
    }
}

impl AugConfig {
    /// Augmentation fully disabled; useful for evaluation pipelines.
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            half_body_prob: 0.0,
            scale_jitter: (1.0, 1.0),
            rotation_jitter: (0.0, 0.0),
            blur_prob: 0.0,
            dropout_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(GeometryError::InvalidAugConfig(format!("{name} = {p} not in [0,1]")))
            }
        };
        prob("flip_prob", self.flip_prob)?;
        prob("half_body_prob", self.half_body_prob)?;
        prob("blur_prob", self.blur_prob)?;
        prob("dropout_prob", self.dropout_prob)?;
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(GeometryError::InvalidAugConfig(format!("{name} = ({lo}, {hi}) is not a range")))
            }
        };
        range("scale_jitter", self.scale_jitter)?;
        range("rotation_jitter", self.rotation_jitter)?;
        range("blur_sigma_range", self.blur_sigma_range)?;
        let (lo, hi) = self.dropout_hole_frac;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(GeometryError::InvalidAugConfig(format!(
                "dropout_hole_frac = ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
            )));
        }
        if self.scale_jitter.0 <= 0.0 {
            return Err(GeometryError::InvalidAugConfig("scale_jitter must be positive".into()));
        }
        if self.median_kernels.iter().any(|&k| k % 2 == 0 || k < 3) {
            return Err(GeometryError::InvalidAugConfig(
                "median_kernels must be odd and >= 3".into(),
            ));
        }
        Ok(())
    }
}

/// Unit-length resize mapping: `x' = x (W'-1)/(W-1)`, `y' = y (H'-1)/(H-1)`.
pub fn udp_resize_transform(
    src_size: (usize, usize),
    dst_size: (usize, usize),
) -> Result<Affine2D, GeometryError> {
    for &(w, h) in [&src_size, &dst_size] {
        if w < 2 || h < 2 {
            return Err(GeometryError::DegenerateSize { w, h });
        }
    }
    let sx = (dst_size.0 - 1) as f64 / (src_size.0 - 1) as f64;
    let sy = (dst_size.1 - 1) as f64 / (src_size.1 - 1) as f64;
    Ok(Affine2D { m: [[sx, 0.0, 0.0], [0.0, sy, 0.0]] })
}

/// Transform from source-image pixels onto the crop's output grid.
///
/// The window of extent `scale`, rotated by `rotation` about `center`, maps
/// onto `[0, W'-1] x [0, H'-1]` with the center landing on the output center.
pub fn crop_affine(crop: &CropSpec) -> Result<Affine2D, GeometryError> {
    crop.validate()?;
    let (ow, oh) = crop.output_size;
    let theta = crop.rotation.to_radians();
    let (sin, cos) = theta.sin_cos();
    let kx = (ow - 1) as f64 / crop.scale.0;
    let ky = (oh - 1) as f64 / crop.scale.1;
    // S * R(-theta) * (p - c) + o, with o the output-grid center.
    let (cx, cy) = crop.center;
    let ox = (ow - 1) as f64 / 2.0;
    let oy = (oh - 1) as f64 / 2.0;
    let m00 = kx * cos;
    let m01 = kx * sin;
    let m10 = -ky * sin;
    let m11 = ky * cos;
    Ok(Affine2D {
        m: [
            [m00, m01, ox - (m00 * cx + m01 * cy)],
            [m10, m11, oy - (m10 * cx + m11 * cy)],
        ],
    })
}

/// Applies `t` to each point.
pub fn apply_affine_points(t: &Affine2D, pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    pts.iter().map(|&(x, y)| t.apply(x, y)).collect()
}

/// Inverse-mapped bilinear warp; samples outside the source grid fill with 0.
pub fn warp_image(
    img: &ImageBuf,
    t: &Affine2D,
    out_size: (usize, usize),
) -> Result<ImageBuf, GeometryError> {
    let inv = t.inverse()?;
    let mut out = ImageBuf::new(out_size.0, out_size.1);
    let xmax = (img.w - 1) as f64;
    let ymax = (img.h - 1) as f64;
    for y in 0..out.h {
        for x in 0..out.w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            if sx < 0.0 || sx > xmax || sy < 0.0 || sy > ymax {
                continue;
            }
            let rgb = img.sample_bilinear(sx, sy);
            out.set(x, y, rgb);
        }
    }
    Ok(out)
}

/// Mirrors an instance about the vertical axis of a `img_width`-wide image:
/// `x -> (W-1) - x`, left/right keypoint slots swapped, bbox mirrored.
pub fn flip_instance(
    inst: &PersonInstance,
    img_width: usize,
    spec: &SkeletonSpec,
) -> Result<PersonInstance, GeometryError> {
    let map = flip_index_map(spec)?;
    let axis = (img_width - 1) as f64;
    let keypoints: Vec<Keypoint> = map
        .iter()
        .map(|&src| {
            let kp = inst.keypoints[src];
            Keypoint { x: axis - kp.x, y: kp.y, v: kp.v }
        })
        .collect();
    let bbox = BBox {
        x: axis - inst.bbox.x - inst.bbox.w,
        y: inst.bbox.y,
        w: inst.bbox.w,
        h: inst.bbox.h,
    };
    Ok(PersonInstance { keypoints, bbox, ..inst.clone() })
}

/// Padding factor applied around the keypoint extent of a half-body (or
/// fallback full-body) crop.
pub const HALF_BODY_PADDING: f64 = 1.5;

fn extent_crop(pts: &[(f64, f64)], output_size: (usize, usize)) -> CropSpec {
    let (mut xmin, mut ymin) = (f64::INFINITY, f64::INFINITY);
    let (mut xmax, mut ymax) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut cx = 0.0;
    let mut cy = 0.0;
    for &(x, y) in pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
        cx += x;
        cy += y;
    }
    let n = pts.len() as f64;
    CropSpec {
        center: (cx / n, cy / n),
        scale: (
            ((xmax - xmin) * HALF_BODY_PADDING).max(1.0),
            ((ymax - ymin) * HALF_BODY_PADDING).max(1.0),
        ),
        rotation: 0.0,
        output_size,
    }
}

fn full_body_crop(inst: &PersonInstance, output_size: (usize, usize)) -> CropSpec {
    let (cx, cy) = inst.bbox.center();
    CropSpec {
        center: (cx, cy),
        scale: (
            (inst.bbox.w * HALF_BODY_PADDING).max(1.0),
            (inst.bbox.h * HALF_BODY_PADDING).max(1.0),
        ),
        rotation: 0.0,
        output_size,
    }
}

/// Crop covering the labeled keypoints of one randomly chosen body half.
///
/// Falls back to a full-body crop when the instance has too few labeled
/// keypoints overall or the chosen half has fewer than 2.
pub fn half_body_crop(
    inst: &PersonInstance,
    cfg: &AugConfig,
    spec: &SkeletonSpec,
    output_size: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> CropSpec {
    let take_upper = rng.gen_bool(0.5);
    if inst.num_labeled() < cfg.half_body_min_kpts {
        return full_body_crop(inst, output_size);
    }
    let indices = if take_upper {
        spec.upper_body_indices()
    } else {
        spec.lower_body_indices()
    };
    let pts: Vec<(f64, f64)> = indices
        .iter()
        .map(|&i| &inst.keypoints[i])
        .filter(|kp| kp.v.is_labeled())
        .map(|kp| (kp.x, kp.y))
        .collect();
    if pts.len() < 2 {
        return full_body_crop(inst, output_size);
    }
    extent_crop(&pts, output_size)
}

/// Photometric augmentation: Gaussian blur, median blur, coarse dropout.
/// Keypoint geometry is untouched. All decisions are drawn in a fixed order,
/// so the output is a pure function of `(img, cfg, seed)`.
pub fn augment_appearance(img: &ImageBuf, cfg: &AugConfig, rng: &mut ChaCha8Rng) -> ImageBuf {
    let mut out = img.clone();

    let do_gauss = rng.gen_bool(cfg.blur_prob);
    let sigma = rng.gen_range(cfg.blur_sigma_range.0..=cfg.blur_sigma_range.1);
    if do_gauss {
        out = out.gaussian_blur(sigma);
    }

    let do_median = rng.gen_bool(cfg.blur_prob);
    let kernel = if cfg.median_kernels.is_empty() {
        3
    } else {
        cfg.median_kernels[rng.gen_range(0..cfg.median_kernels.len())]
    };
    if do_median {
        out = out.median_blur(kernel / 2);
    }

    if rng.gen_bool(cfg.dropout_prob) {
        let (lo, hi) = cfg.dropout_hole_frac;
        let hw = ((rng.gen_range(lo..=hi) * img.w as f64).round() as usize).clamp(1, img.w);
        let hh = ((rng.gen_range(lo..=hi) * img.h as f64).round() as usize).clamp(1, img.h);
        let x0 = rng.gen_range(0..=(img.w - hw));
        let y0 = rng.gen_range(0..=(img.h - hh));
        out.fill_rect(x0 as isize, y0 as isize, hw, hh, [0.0, 0.0, 0.0]);
    }
    out
}

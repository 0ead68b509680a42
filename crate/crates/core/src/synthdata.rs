//! Procedural stick-figure scenes with exact keypoint ground truth, plus a
//! deterministic appearance stylizer for building out-of-distribution splits:
//! geometry and annotations stay fixed while color, texture, and stroke
//! rendering shift.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::{write_annotations, AnnotationFile, CategoryInfo, ImageInfo};
use crate::image::{ImageBuf, ImageError};
use crate::rng::{rng_for, rng_for_item, stream};
use crate::skeleton::{
    validate_instance, BBox, Keypoint, PersonInstance, SkeletonSpec, Visibility,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("figure parameters invalid: {0}")]
    BadParams(&'static str),
    #[error("style parameters invalid: {0}")]
    BadStyle(&'static str),
    #[error("split sizes must be at least one")]
    EmptyCounts,
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("image failure: {0}")]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Gradient,
    Clutter,
}

/// Scene-generation parameters. Angles are radians, lengths are fractions of
/// the figure height, placement ranges are fractions of the canvas.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FigureParams {
    pub canvas: (usize, usize),
    pub height_range: (f64, f64),
    pub center_x_range: (f64, f64),
    pub center_y_range: (f64, f64),
    /// Torso lean from vertical.
    pub lean_range: (f64, f64),
    /// Upper-arm swing away from the torso axis.
    pub upper_arm_range: (f64, f64),
    /// Elbow bend relative to the upper arm.
    pub elbow_range: (f64, f64),
    /// Thigh swing away from the torso axis.
    pub thigh_range: (f64, f64),
    /// Knee bend relative to the thigh.
    pub knee_range: (f64, f64),
    pub torso_len: f64,
    pub upper_arm_len: f64,
    pub forearm_len: f64,
    pub thigh_len: f64,
    pub shin_len: f64,
    pub head_len: f64,
    pub shoulder_halfwidth: f64,
    pub hip_halfwidth: f64,
    /// Stroke thickness in pixels.
    pub limb_thickness: f64,
    pub palette: Vec<[f64; 3]>,
    pub background: Background,
}

impl Default for FigureParams {
    fn default() -> Self {
        FigureParams {
            canvas: (160, 160),
            height_range: (90.0, 130.0),
            center_x_range: (0.35, 0.65),
            center_y_range: (0.38, 0.55),
            lean_range: (-0.25, 0.25),
            upper_arm_range: (-1.1, 1.1),
            elbow_range: (0.0, 1.5),
            thigh_range: (-0.45, 0.45),
            knee_range: (0.0, 1.1),
            torso_len: 0.32,
            upper_arm_len: 0.16,
            forearm_len: 0.15,
            thigh_len: 0.24,
            shin_len: 0.23,
            head_len: 0.12,
            shoulder_halfwidth: 0.10,
            hip_halfwidth: 0.07,
            limb_thickness: 3.0,
            palette: vec![
                [0.95, 0.30, 0.25],
                [0.25, 0.70, 0.95],
                [0.95, 0.80, 0.20],
                [0.40, 0.90, 0.40],
                [0.85, 0.45, 0.90],
                [0.95, 0.60, 0.25],
            ],
            background: Background::Clutter,
        }
    }
}

impl FigureParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ranges = [
            self.height_range,
            self.center_x_range,
            self.center_y_range,
            self.lean_range,
            self.upper_arm_range,
            self.elbow_range,
            self.thigh_range,
            self.knee_range,
        ];
        if ranges.iter().any(|&(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(SynthError::BadParams("a sampling range has lo > hi"));
        }
        if self.height_range.0 <= 0.0 {
            return Err(SynthError::BadParams("figure height must be positive"));
        }
        // Hinge joints bend one way; swing joints stay within a half turn.
        if self.elbow_range.0 < 0.0 || self.elbow_range.1 > 2.6 {
            return Err(SynthError::BadParams("elbow bend outside [0, 2.6] rad"));
        }
        if self.knee_range.0 < 0.0 || self.knee_range.1 > 2.6 {
            return Err(SynthError::BadParams("knee bend outside [0, 2.6] rad"));
        }
        if self.upper_arm_range.0 < -1.6 || self.upper_arm_range.1 > 1.6 {
            return Err(SynthError::BadParams("arm swing outside [-1.6, 1.6] rad"));
        }
        if self.thigh_range.0 < -1.2 || self.thigh_range.1 > 1.2 {
            return Err(SynthError::BadParams("thigh swing outside [-1.2, 1.2] rad"));
        }
        let lengths = [
            self.torso_len,
            self.upper_arm_len,
            self.forearm_len,
            self.thigh_len,
            self.shin_len,
            self.head_len,
            self.shoulder_halfwidth,
            self.hip_halfwidth,
        ];
        if lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(SynthError::BadParams("limb lengths must be positive"));
        }
        if !(self.limb_thickness > 0.0) {
            return Err(SynthError::BadParams("limb thickness must be positive"));
        }
        if self.palette.is_empty() {
            return Err(SynthError::BadParams("palette must not be empty"));
        }
        if self.canvas.0 < 16 || self.canvas.1 < 16 {
            return Err(SynthError::BadParams("canvas smaller than 16x16"));
        }
        Ok(())
    }
}

/// Appearance-only transform parameters; geometry is never touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleParams {
    pub hue_rotation_deg: f64,
    pub saturation_scale: f64,
    pub blur_sigma: f64,
    /// Multiplicative texture amplitude, in [0, 1).
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for StyleParams {
    fn default() -> Self {
        StyleParams {
            hue_rotation_deg: 0.0,
            saturation_scale: 1.0,
            blur_sigma: 0.0,
            noise_amplitude: 0.0,
            seed: 0,
        }
    }
}

impl StyleParams {
    /// The default painterly preset used for the out-of-distribution split.
    pub fn monet() -> Self {
        StyleParams {
            hue_rotation_deg: 120.0,
            saturation_scale: 0.7,
            blur_sigma: 1.2,
            noise_amplitude: 0.35,
            seed: 77,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.hue_rotation_deg == 0.0
            && self.saturation_scale == 1.0
            && self.blur_sigma <= 0.0
            && self.noise_amplitude == 0.0
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..1.0).contains(&self.noise_amplitude) {
            return Err(SynthError::BadStyle("noise amplitude outside [0, 1)"));
        }
        if !(self.saturation_scale >= 0.0) {
            return Err(SynthError::BadStyle("saturation scale must be >= 0"));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(SynthError::BadStyle("blur sigma must be >= 0"));
        }
        if !self.hue_rotation_deg.is_finite() {
            return Err(SynthError::BadStyle("hue rotation must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Seg {
    ax: f64,
    ay: f64,
    bx: f64,
    by: f64,
}

impl Seg {
    fn dist(&self, x: f64, y: f64) -> f64 {
        let dx = self.bx - self.ax;
        let dy = self.by - self.ay;
        let len_sq = dx * dx + dy * dy;
        let t = if len_sq == 0.0 {
            0.0
        } else {
            (((x - self.ax) * dx + (y - self.ay) * dy) / len_sq).clamp(0.0, 1.0)
        };
        let px = self.ax + t * dx;
        let py = self.ay + t * dy;
        ((x - px) * (x - px) + (y - py) * (y - py)).sqrt()
    }
}

fn rot(v: (f64, f64), phi: f64) -> (f64, f64) {
    let (s, c) = phi.sin_cos();
    (v.0 * c - v.1 * s, v.0 * s + v.1 * c)
}

/// All 17 joint positions for one sampled pose, in canvas pixels.
fn sample_joints(params: &FigureParams, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let (cw, ch) = (params.canvas.0 as f64, params.canvas.1 as f64);
    let h = rng.gen_range(params.height_range.0..=params.height_range.1);
    let cx = rng.gen_range(params.center_x_range.0..=params.center_x_range.1) * cw;
    let cy = rng.gen_range(params.center_y_range.0..=params.center_y_range.1) * ch;
    let lean = rng.gen_range(params.lean_range.0..=params.lean_range.1);

    // Up along the torso, and the figure's own left (toward +x when upright).
    let up = (lean.sin(), -lean.cos());
    let left = (-up.1, up.0);

    let pelvis = (cx - up.0 * params.torso_len * h / 2.0, cy - up.1 * params.torso_len * h / 2.0);
    let neck = (
        pelvis.0 + up.0 * params.torso_len * h,
        pelvis.1 + up.1 * params.torso_len * h,
    );
    let at = |base: (f64, f64), dir: (f64, f64), len: f64| {
        (base.0 + dir.0 * len, base.1 + dir.1 * len)
    };

    let head = params.head_len * h;
    let nose = at(neck, up, 0.8 * head);
    let l_eye = at(at(nose, up, 0.25 * head), left, 0.22 * head);
    let r_eye = at(at(nose, up, 0.25 * head), left, -0.22 * head);
    let l_ear = at(at(nose, up, 0.10 * head), left, 0.45 * head);
    let r_ear = at(at(nose, up, 0.10 * head), left, -0.45 * head);

    let l_shoulder = at(neck, left, params.shoulder_halfwidth * h);
    let r_shoulder = at(neck, left, -params.shoulder_halfwidth * h);
    let l_hip = at(pelvis, left, params.hip_halfwidth * h);
    let r_hip = at(pelvis, left, -params.hip_halfwidth * h);

    let down = (-up.0, -up.1);
    let mut limb = |root: (f64, f64), swing: (f64, f64), bend: (f64, f64), sign: f64, l_upper: f64, l_lower: f64| {
        let a = rng.gen_range(swing.0..=swing.1);
        let b = rng.gen_range(bend.0..=bend.1);
        let d_upper = rot(down, sign * a);
        let mid = at(root, d_upper, l_upper * h);
        let d_lower = rot(d_upper, sign * b);
        let end = at(mid, d_lower, l_lower * h);
        (mid, end)
    };

    let (l_elbow, l_wrist) = limb(
        l_shoulder,
        params.upper_arm_range,
        params.elbow_range,
        1.0,
        params.upper_arm_len,
        params.forearm_len,
    );
    let (r_elbow, r_wrist) = limb(
        r_shoulder,
        params.upper_arm_range,
        params.elbow_range,
        -1.0,
        params.upper_arm_len,
        params.forearm_len,
    );
    let (l_knee, l_ankle) = limb(
        l_hip,
        params.thigh_range,
        params.knee_range,
        1.0,
        params.thigh_len,
        params.shin_len,
    );
    let (r_knee, r_ankle) = limb(
        r_hip,
        params.thigh_range,
        params.knee_range,
        -1.0,
        params.thigh_len,
        params.shin_len,
    );

    vec![
        nose, l_eye, r_eye, l_ear, r_ear, l_shoulder, r_shoulder, l_elbow, r_elbow, l_wrist,
        r_wrist, l_hip, r_hip, l_knee, r_knee, l_ankle, r_ankle,
    ]
}

fn figure_segments(spec: &SkeletonSpec, joints: &[(f64, f64)]) -> Vec<Seg> {
    spec.skeleton_edges
        .iter()
        .map(|&(a, b)| Seg {
            ax: joints[a].0,
            ay: joints[a].1,
            bx: joints[b].0,
            by: joints[b].1,
        })
        .collect()
}

fn draw_segment(img: &mut ImageBuf, seg: &Seg, radius: f64, rgb: [f64; 3]) {
    let x0 = (seg.ax.min(seg.bx) - radius).floor().max(0.0) as usize;
    let y0 = (seg.ay.min(seg.by) - radius).floor().max(0.0) as usize;
    let x1 = (seg.ax.max(seg.bx) + radius).ceil().min(img.w as f64 - 1.0);
    let y1 = (seg.ay.max(seg.by) + radius).ceil().min(img.h as f64 - 1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            if seg.dist(x as f64 + 0.5, y as f64 + 0.5) <= radius {
                img.set(x, y, rgb);
            }
        }
    }
}

fn paint_background(img: &mut ImageBuf, params: &FigureParams, rng: &mut ChaCha8Rng) {
    let dim = |c: [f64; 3], f: f64| [c[0] * f, c[1] * f, c[2] * f];
    match params.background {
        Background::Flat => {
            let b = rng.gen_range(0.25..0.45);
            let base = [b * 0.85, b, b * 1.3];
            for y in 0..img.h {
                for x in 0..img.w {
                    img.set(x, y, base);
                }
            }
        }
        Background::Gradient => {
            let top = rng.gen_range(0.15..0.3);
            let bottom = rng.gen_range(0.4..0.6);
            for y in 0..img.h {
                let t = y as f64 / (img.h - 1).max(1) as f64;
                let b = top + (bottom - top) * t;
                let row = [b * 0.85, b, b * 1.3];
                for x in 0..img.w {
                    img.set(x, y, row);
                }
            }
        }
        Background::Clutter => {
            let b = rng.gen_range(0.25..0.4);
            let base = [b * 0.85, b, b * 1.3];
            for y in 0..img.h {
                for x in 0..img.w {
                    img.set(x, y, base);
                }
            }
            let n_shapes = rng.gen_range(8..16);
            for _ in 0..n_shapes {
                let color = dim(params.palette[rng.gen_range(0..params.palette.len())], 0.5);
                let rw = rng.gen_range(img.w / 16..img.w / 4);
                let rh = rng.gen_range(img.h / 16..img.h / 4);
                let x0 = rng.gen_range(0..img.w) as isize - (rw / 2) as isize;
                let y0 = rng.gen_range(0..img.h) as isize - (rh / 2) as isize;
                img.fill_rect(x0, y0, rw, rh, color);
            }
        }
    }
}

/// Renders `n_figures` stick figures in painter's order and returns the image
/// together with exact per-figure annotations. Visibility: 2 inside the frame,
/// 1 when a later-drawn figure's stroke covers the point, 0 outside the frame.
pub fn generate_scene(
    spec: &SkeletonSpec,
    params: &FigureParams,
    n_figures: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageBuf, Vec<PersonInstance>), SynthError> {
    assert!(n_figures >= 1, "n_figures must be at least 1");
    params.validate()?;

    let (w, h) = params.canvas;
    let mut img = ImageBuf::new(w, h);
    paint_background(&mut img, params, rng);

    let all_joints: Vec<Vec<(f64, f64)>> =
        (0..n_figures).map(|_| sample_joints(params, rng)).collect();
    let all_segs: Vec<Vec<Seg>> =
        all_joints.iter().map(|j| figure_segments(spec, j)).collect();

    let radius = params.limb_thickness / 2.0;
    for (fi, segs) in all_segs.iter().enumerate() {
        for (ei, seg) in segs.iter().enumerate() {
            let color = params.palette[(fi + ei) % params.palette.len()];
            draw_segment(&mut img, seg, radius, color);
        }
    }

    let mut instances = Vec::with_capacity(n_figures);
    for (fi, joints) in all_joints.iter().enumerate() {
        let mut kps = Vec::with_capacity(spec.k);
        for &(x, y) in joints {
            let v = if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                Visibility::Unlabeled
            } else if all_segs[fi + 1..]
                .iter()
                .any(|segs| segs.iter().any(|s| s.dist(x, y) <= radius))
            {
                Visibility::Occluded
            } else {
                Visibility::Visible
            };
            kps.push(Keypoint::new(x, y, v));
        }
        let min_x = joints.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = joints.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = joints.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = joints.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let bw = (max_x - min_x).max(2.0);
        let bh = (max_y - min_y).max(2.0);
        let bbox = BBox::new(
            min_x - 0.05 * bw,
            min_y - 0.05 * bh,
            bw * 1.1,
            bh * 1.1,
        );
        let inst = PersonInstance {
            image_id: 0,
            keypoints: kps,
            area: bbox.w * bbox.h,
            bbox,
            score: None,
            iscrowd: false,
        };
        validate_instance(&inst, spec).expect("generated instance must be valid");
        instances.push(inst);
    }
    Ok((img, instances))
}

fn scale_saturation(img: &mut ImageBuf, s: f64) {
    for p in 0..img.w * img.h {
        let i = p * 3;
        let gray = (img.data[i] + img.data[i + 1] + img.data[i + 2]) / 3.0;
        for c in 0..3 {
            img.data[i + c] = gray + s * (img.data[i + c] - gray);
        }
    }
}

/// Appearance shift: hue rotation, saturation scaling, Gaussian brush blur,
/// then seeded multiplicative texture noise. Output dimensions equal input and
/// nothing moves geometrically. All-neutral parameters return the input
/// unchanged, bit for bit.
pub fn stylize(img: &ImageBuf, style: &StyleParams) -> ImageBuf {
    if style.is_identity() {
        return img.clone();
    }
    let mut out = img.clone();
    if style.hue_rotation_deg != 0.0 {
        out.rotate_hue(style.hue_rotation_deg.to_radians());
    }
    if style.saturation_scale != 1.0 {
        scale_saturation(&mut out, style.saturation_scale);
    }
    if style.blur_sigma > 0.0 {
        out = out.gaussian_blur(style.blur_sigma);
    }
    if style.noise_amplitude > 0.0 {
        let mut rng = rng_for(style.seed, stream::DATASET);
        for p in 0..out.w * out.h {
            let m = 1.0 + style.noise_amplitude * rng.gen_range(-1.0..1.0);
            for c in 0..3 {
                out.data[p * 3 + c] *= m;
            }
        }
    }
    out.clamp01();
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    /// Relative to the manifest's directory.
    pub image_dir: String,
    /// Relative to the manifest's directory.
    pub annotation_file: String,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub global_seed: u64,
    pub canvas: (usize, usize),
    pub style: StyleParams,
    pub splits: Vec<SplitEntry>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Option<&SplitEntry> {
        self.splits.iter().find(|s| s.name == name)
    }
}

fn scene_file_name(idx: usize) -> String {
    format!("scene_{idx:05}.ppm")
}

/// Builds clean train/val splits plus a stylized copy of the val images. The
/// stylized split references the clean val annotation file verbatim; only the
/// pixels differ. Every byte written is a pure function of the arguments.
pub fn build_dataset(
    spec: &SkeletonSpec,
    params: &FigureParams,
    style: &StyleParams,
    n_train: usize,
    n_val: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    if n_train < 1 || n_val < 1 {
        return Err(SynthError::EmptyCounts);
    }
    params.validate()?;
    style.validate()?;

    fs::create_dir_all(out_dir.join("images/train"))?;
    fs::create_dir_all(out_dir.join("images/val"))?;
    fs::create_dir_all(out_dir.join("images/val_stylized"))?;
    fs::create_dir_all(out_dir.join("annotations"))?;

    let build_split = |name: &str, count: usize, index_base: usize| -> Result<(), SynthError> {
        let mut images = Vec::with_capacity(count);
        let mut annotations = Vec::new();
        for i in 0..count {
            let mut rng = rng_for_item(seed, stream::DATASET, (index_base + i) as u64);
            let n_figures = rng.gen_range(1..=3);
            let (img, mut insts) = generate_scene(spec, params, n_figures, &mut rng)?;
            let id = (i + 1) as u64;
            let file_name = format!("images/{name}/{}", scene_file_name(i));
            img.save_ppm(out_dir.join(&file_name))?;
            if name == "val" {
                let styled = stylize(&img, style);
                styled.save_ppm(out_dir.join(format!(
                    "images/val_stylized/{}",
                    scene_file_name(i)
                )))?;
            }
            images.push(ImageInfo {
                id,
                file_name,
                width: img.w,
                height: img.h,
            });
            for inst in &mut insts {
                inst.image_id = id;
            }
            annotations.extend(insts);
        }
        let file = AnnotationFile {
            images,
            annotations,
            categories: vec![CategoryInfo::person_category(spec)],
        };
        fs::write(
            out_dir.join(format!("annotations/{name}.json")),
            write_annotations(&file),
        )?;
        Ok(())
    };

    build_split("train", n_train, 0)?;
    build_split("val", n_val, n_train)?;

    let manifest = DatasetManifest {
        global_seed: seed,
        canvas: params.canvas,
        style: style.clone(),
        splits: vec![
            SplitEntry {
                name: "train".into(),
                image_dir: "images/train".into(),
                annotation_file: "annotations/train.json".into(),
                n_images: n_train,
            },
            SplitEntry {
                name: "val".into(),
                image_dir: "images/val".into(),
                annotation_file: "annotations/val.json".into(),
                n_images: n_val,
            },
            SplitEntry {
                name: "val_stylized".into(),
                image_dir: "images/val_stylized".into(),
                annotation_file: "annotations/val.json".into(),
                n_images: n_val,
            },
        ],
    };
    let mut manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest_json.push('\n');
    fs::write(out_dir.join("manifest.json"), manifest_json)?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, SynthError> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|_| SynthError::BadParams("manifest file does not parse"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{decode, encode, HeatmapConfig};
    use crate::rng::{rng_for_item, stream};

    fn spec() -> SkeletonSpec {
        SkeletonSpec::coco17()
    }

    fn single_figure_params() -> FigureParams {
        FigureParams {
            center_x_range: (0.5, 0.5),
            center_y_range: (0.45, 0.45),
            lean_range: (-0.05, 0.05),
            ..FigureParams::default()
        }
    }

    #[test]
    fn centered_upright_figure_has_all_keypoints_visible() {
        let spec = spec();
        let mut rng = rng_for_item(1, stream::DATASET, 0);
        let (_, insts) =
            generate_scene(&spec, &single_figure_params(), 1, &mut rng).unwrap();
        assert_eq!(insts.len(), 1);
        let inst = &insts[0];
        assert!(inst.keypoints.iter().all(|kp| kp.v == Visibility::Visible));
        let nose_y = inst.keypoints[0].y;
        assert!(nose_y < inst.keypoints[11].y, "nose below left hip");
        assert!(nose_y < inst.keypoints[12].y, "nose below right hip");
    }

    #[test]
    fn figure_pushed_past_the_border_gets_v0_keypoints() {
        let spec = spec();
        let params = FigureParams {
            center_x_range: (-0.02, -0.02),
            center_y_range: (0.45, 0.45),
            ..FigureParams::default()
        };
        let mut rng = rng_for_item(2, stream::DATASET, 0);
        let (_, insts) = generate_scene(&spec, &params, 1, &mut rng).unwrap();
        let inst = &insts[0];
        let out_of_frame = inst
            .keypoints
            .iter()
            .filter(|kp| kp.v == Visibility::Unlabeled)
            .count();
        assert!(out_of_frame > 0, "no keypoint was marked out of frame");
        for kp in &inst.keypoints {
            let outside = kp.x < 0.0 || kp.y < 0.0 || kp.x >= 160.0 || kp.y >= 160.0;
            assert_eq!(outside, kp.v == Visibility::Unlabeled);
        }
    }

    #[test]
    fn same_seed_reproduces_scene_bytes_and_annotations() {
        let spec = spec();
        let params = FigureParams::default();
        let mut a_rng = rng_for_item(9, stream::DATASET, 4);
        let mut b_rng = rng_for_item(9, stream::DATASET, 4);
        let (img_a, inst_a) = generate_scene(&spec, &params, 3, &mut a_rng).unwrap();
        let (img_b, inst_b) = generate_scene(&spec, &params, 3, &mut b_rng).unwrap();
        assert_eq!(img_a.data, img_b.data);
        assert_eq!(inst_a, inst_b);
    }

    #[test]
    fn keypoints_sit_on_rendered_strokes() {
        let spec = spec();
        let params = FigureParams {
            palette: vec![[1.0, 0.0, 0.0]],
            background: Background::Flat,
            ..single_figure_params()
        };
        let mut rng = rng_for_item(3, stream::DATASET, 1);
        let (img, insts) = generate_scene(&spec, &params, 2, &mut rng).unwrap();
        let r = params.limb_thickness.ceil() as isize;
        for inst in &insts {
            for kp in &inst.keypoints {
                if kp.v == Visibility::Unlabeled {
                    continue;
                }
                let (cx, cy) = (kp.x as isize, kp.y as isize);
                let mut on_stroke = false;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (x, y) = (cx + dx, cy + dy);
                        if x < 0 || y < 0 || x >= img.w as isize || y >= img.h as isize {
                            continue;
                        }
                        let px = img.get(x as usize, y as usize);
                        if px == [1.0, 0.0, 0.0] {
                            on_stroke = true;
                        }
                    }
                }
                assert!(on_stroke, "keypoint ({}, {}) off-stroke", kp.x, kp.y);
            }
        }
    }

    #[test]
    fn overlapping_figures_occlude_earlier_ones_only() {
        let spec = spec();
        let params = single_figure_params();
        let mut found_occlusion = false;
        for item in 0..20 {
            let mut rng = rng_for_item(5, stream::DATASET, item);
            let (_, insts) = generate_scene(&spec, &params, 2, &mut rng).unwrap();
            let last = insts.last().unwrap();
            assert!(
                last.keypoints.iter().all(|kp| kp.v != Visibility::Occluded),
                "the figure drawn last can never be occluded"
            );
            if insts[0].keypoints.iter().any(|kp| kp.v == Visibility::Occluded) {
                found_occlusion = true;
            }
        }
        assert!(
            found_occlusion,
            "two same-center figures never overlapped in 20 draws"
        );
    }

    #[test]
    fn neutral_style_is_a_bit_exact_identity() {
        let spec = spec();
        let mut rng = rng_for_item(6, stream::DATASET, 2);
        let (img, _) = generate_scene(&spec, &FigureParams::default(), 2, &mut rng).unwrap();
        let out = stylize(&img, &StyleParams::default());
        assert_eq!(img.data, out.data);
    }

    #[test]
    fn hue_rotation_120_sends_red_to_green() {
        let img = ImageBuf::filled(8, 6, [1.0, 0.0, 0.0]);
        let style = StyleParams {
            hue_rotation_deg: 120.0,
            ..StyleParams::default()
        };
        let out = stylize(&img, &style);
        for p in 0..out.w * out.h {
            let i = p * 3;
            assert!(out.data[i].abs() < 1e-12);
            assert!((out.data[i + 1] - 1.0).abs() < 1e-12);
            assert!(out.data[i + 2].abs() < 1e-12);
        }
    }

    #[test]
    fn monet_preset_shifts_pixels_without_touching_geometry() {
        let spec = spec();
        let mut rng = rng_for_item(7, stream::DATASET, 3);
        let (img, _) = generate_scene(&spec, &FigureParams::default(), 2, &mut rng).unwrap();
        let out = stylize(&img, &StyleParams::monet());
        assert_eq!((out.w, out.h), (img.w, img.h));
        let mad = img.mean_abs_diff(&out);
        assert!(mad > 0.08, "appearance shift too small: mad {mad}");
    }

    #[test]
    fn build_dataset_layout_and_shared_annotation_path() {
        let spec = spec();
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(
            &spec,
            &FigureParams::default(),
            &StyleParams::monet(),
            2,
            3,
            31,
            dir.path(),
        )
        .unwrap();
        let val = manifest.split("val").unwrap();
        let styl = manifest.split("val_stylized").unwrap();
        assert_eq!(styl.n_images, 3);
        assert_eq!(val.annotation_file, styl.annotation_file);
        assert!(dir.path().join(&val.annotation_file).is_file());
        for i in 0..3 {
            assert!(dir
                .path()
                .join(&styl.image_dir)
                .join(scene_file_name(i))
                .is_file());
        }
        let reparsed = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(reparsed, manifest);

        let bytes = fs::read(dir.path().join(&val.annotation_file)).unwrap();
        let file = crate::coco::parse_annotations(&bytes, &spec).unwrap();
        assert_eq!(file.images.len(), 3);
        for inst in &file.annotations {
            validate_instance(inst, &spec).unwrap();
        }
    }

    #[test]
    fn rebuilding_with_the_same_seed_is_byte_identical() {
        let spec = spec();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for dir in [&dir_a, &dir_b] {
            build_dataset(
                &spec,
                &FigureParams::default(),
                &StyleParams::monet(),
                2,
                2,
                55,
                dir.path(),
            )
            .unwrap();
        }
        for rel in [
            "manifest.json",
            "annotations/train.json",
            "annotations/val.json",
            "images/train/scene_00000.ppm",
            "images/train/scene_00001.ppm",
            "images/val/scene_00000.ppm",
            "images/val_stylized/scene_00001.ppm",
        ] {
            let a = fs::read(dir_a.path().join(rel)).unwrap();
            let b = fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identical builds");
        }
    }

    #[test]
    fn gt_roundtrip_through_the_codec_is_exact_at_pck_005() {
        let spec = spec();
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(
            &spec,
            &FigureParams::default(),
            &StyleParams::monet(),
            1,
            4,
            91,
            dir.path(),
        )
        .unwrap();
        let val = manifest.split("val").unwrap();
        let bytes = fs::read(dir.path().join(&val.annotation_file)).unwrap();
        let file = crate::coco::parse_annotations(&bytes, &spec).unwrap();
        let cfg = HeatmapConfig {
            input_size: manifest.canvas,
            heatmap_size: (manifest.canvas.0 / 4, manifest.canvas.1 / 4),
            sigma: 2.0,
            supervise_occluded: true,
        };
        for inst in &file.annotations {
            let hm = encode(inst, &cfg, &spec).unwrap();
            let decoded = decode(&hm);
            let scale = inst.bbox.w.max(inst.bbox.h);
            for (kp, d) in inst.keypoints.iter().zip(&decoded) {
                if kp.v == Visibility::Unlabeled {
                    continue;
                }
                let err = ((kp.x - d.x).powi(2) + (kp.y - d.y).powi(2)).sqrt();
                assert!(
                    err < 0.05 * scale,
                    "roundtrip error {err} at scale {scale}"
                );
            }
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad = FigureParams {
            elbow_range: (-0.5, 1.0),
            ..FigureParams::default()
        };
        assert!(matches!(bad.validate(), Err(SynthError::BadParams(_))));
        let bad = FigureParams {
            limb_thickness: 0.0,
            ..FigureParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = StyleParams {
            noise_amplitude: 1.0,
            ..StyleParams::default()
        };
        assert!(matches!(bad.validate(), Err(SynthError::BadStyle(_))));
        assert!(build_dataset(
            &spec(),
            &FigureParams::default(),
            &StyleParams::default(),
            0,
            1,
            1,
            Path::new("/nonexistent")
        )
        .is_err());
    }
}

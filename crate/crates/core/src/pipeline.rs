//! Top-down wiring between datasets and the network: bounding-box crops to
//! model inputs, augmented training samples with crop-space heatmap targets,
//! inference mapped back to image coordinates, and keypoint accuracy scoring.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::coco::{
    parse_annotations, AnnotationFile, CocoError, DetectionFile, KeypointResult, ResultFile,
};
use crate::geometry::{
    augment_appearance, crop_affine, flip_instance, half_body_crop, warp_image, Affine2D,
    AugConfig, CropSpec, GeometryError,
};
use crate::heatmap::{decode, encode, DecodedKeypoint, Heatmap, HeatmapConfig, HeatmapError};
use crate::image::{ImageBuf, ImageError};
use crate::micronet::{MicroUNet, NetError};
use crate::nn::Tensor;
use crate::skeleton::{BBox, Keypoint, PersonInstance, SkeletonSpec, Visibility};
use crate::synthdata::DatasetManifest;
use crate::trainer::SampleSource;

/// Padding factor around a detection or ground-truth box before cropping.
pub const CROP_PADDING: f64 = 1.25;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Coco(#[from] CocoError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("image failure: {0}")]
    Image(#[from] ImageError),
    #[error("annotation references image id {0} but no such image entry exists")]
    MissingImage(u64),
    #[error("manifest has no split named {0:?}")]
    MissingSplit(String),
}

/// Aspect-matched crop window around a box, padded by `padding`.
pub fn crop_from_bbox(bbox: &BBox, output_size: (usize, usize), padding: f64) -> CropSpec {
    let aspect = (output_size.0 - 1) as f64 / (output_size.1 - 1) as f64;
    let mut sx = (bbox.w * padding).max(1.0);
    let mut sy = (bbox.h * padding).max(1.0);
    if sx / sy > aspect {
        sy = sx / aspect;
    } else {
        sx = sy * aspect;
    }
    CropSpec {
        center: bbox.center(),
        scale: (sx, sy),
        rotation: 0.0,
        output_size,
    }
}

/// Maps keypoints into crop coordinates; anything landing outside the output
/// grid is dropped from supervision.
fn keypoints_to_crop(
    kps: &[Keypoint],
    t: &Affine2D,
    output_size: (usize, usize),
) -> Vec<Keypoint> {
    let (w, h) = (output_size.0 as f64 - 1.0, output_size.1 as f64 - 1.0);
    kps.iter()
        .map(|kp| {
            if kp.v == Visibility::Unlabeled {
                return *kp;
            }
            let (x, y) = t.apply(kp.x, kp.y);
            let v = if x < 0.0 || y < 0.0 || x > w || y > h {
                Visibility::Unlabeled
            } else {
                kp.v
            };
            Keypoint::new(x, y, v)
        })
        .collect()
}

fn crop_space_instance(inst: &PersonInstance, kps: Vec<Keypoint>, size: (usize, usize)) -> PersonInstance {
    let (w, h) = (size.0 as f64 - 1.0, size.1 as f64 - 1.0);
    PersonInstance {
        keypoints: kps,
        bbox: BBox::new(0.0, 0.0, w, h),
        area: w * h,
        ..inst.clone()
    }
}

/// One augmented training pair: network input and its crop-space target.
///
/// Augmentation order: horizontal flip of the source, half-body or full-box
/// crop selection, scale and rotation jitter on the crop window, affine warp,
/// then photometric augmentation of the warped input. Every random decision
/// comes from `rng`, so the output is a pure function of `(inputs, seed)`.
pub fn make_training_sample(
    img: &ImageBuf,
    inst: &PersonInstance,
    spec: &SkeletonSpec,
    aug: &AugConfig,
    hm: &HeatmapConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageBuf, Heatmap), PipelineError> {
    let input = hm.input_size;

    let do_flip = rng.gen_bool(aug.flip_prob);
    let do_half_body = rng.gen_bool(aug.half_body_prob);

    let (src_img, src_inst);
    let (flipped_img, flipped_inst);
    if do_flip {
        let mut f = img.clone();
        f.hflip();
        flipped_img = f;
        flipped_inst = flip_instance(inst, img.w, spec)?;
        src_img = &flipped_img;
        src_inst = &flipped_inst;
    } else {
        src_img = img;
        src_inst = inst;
    }

    let mut crop = if do_half_body {
        half_body_crop(src_inst, aug, spec, input, rng)
    } else {
        crop_from_bbox(&src_inst.bbox, input, CROP_PADDING)
    };
    let s = rng.gen_range(aug.scale_jitter.0..=aug.scale_jitter.1);
    let r = rng.gen_range(aug.rotation_jitter.0..=aug.rotation_jitter.1);
    crop.scale = (crop.scale.0 * s, crop.scale.1 * s);
    crop.rotation += r;

    let t = crop_affine(&crop)?;
    let warped = warp_image(src_img, &t, input)?;
    let net_input = augment_appearance(&warped, aug, rng);

    let kps = keypoints_to_crop(&src_inst.keypoints, &t, input);
    let target = encode(&crop_space_instance(src_inst, kps, input), hm, spec)?;
    Ok((net_input, target))
}

/// A split loaded into memory: annotations plus decoded images, with an entry
/// list of the trainable (non-crowd, at least one labeled keypoint) instances.
pub struct LoadedSplit {
    pub annotation: AnnotationFile,
    /// Parallel to `annotation.images`.
    pub images: Vec<ImageBuf>,
    pub image_index: BTreeMap<u64, usize>,
    /// `(image index, annotation index)` pairs.
    pub entries: Vec<(usize, usize)>,
}

impl LoadedSplit {
    pub fn entry(&self, i: usize) -> (&ImageBuf, &PersonInstance) {
        let (img_i, ann_i) = self.entries[i];
        (&self.images[img_i], &self.annotation.annotations[ann_i])
    }
}

/// Reads an annotation file and all images of one split. `image_dir` decides
/// where image bytes come from, so a stylized split can reuse clean
/// annotations verbatim while loading different pixels.
pub fn load_split(
    root: &Path,
    image_dir: &str,
    annotation_file: &str,
    spec: &SkeletonSpec,
) -> Result<LoadedSplit, PipelineError> {
    let bytes = fs::read(root.join(annotation_file))?;
    let annotation = parse_annotations(&bytes, spec)?;

    let mut images = Vec::with_capacity(annotation.images.len());
    let mut image_index = BTreeMap::new();
    for (i, info) in annotation.images.iter().enumerate() {
        let base = Path::new(&info.file_name)
            .file_name()
            .expect("image file_name has a basename");
        images.push(ImageBuf::load_ppm(root.join(image_dir).join(base))?);
        image_index.insert(info.id, i);
    }

    let mut entries = Vec::new();
    for (ann_i, inst) in annotation.annotations.iter().enumerate() {
        if inst.iscrowd || inst.num_labeled() == 0 {
            continue;
        }
        let img_i = *image_index
            .get(&inst.image_id)
            .ok_or(PipelineError::MissingImage(inst.image_id))?;
        entries.push((img_i, ann_i));
    }
    Ok(LoadedSplit {
        annotation,
        images,
        image_index,
        entries,
    })
}

pub fn load_manifest_split(
    manifest_dir: &Path,
    manifest: &DatasetManifest,
    name: &str,
    spec: &SkeletonSpec,
) -> Result<LoadedSplit, PipelineError> {
    let entry = manifest
        .split(name)
        .ok_or_else(|| PipelineError::MissingSplit(name.into()))?;
    load_split(manifest_dir, &entry.image_dir, &entry.annotation_file, spec)
}

/// On-the-fly augmented sampling over a loaded split.
pub struct TrainPipeline<'a> {
    pub split: &'a LoadedSplit,
    pub spec: &'a SkeletonSpec,
    pub aug: &'a AugConfig,
    pub heatmap: &'a HeatmapConfig,
}

impl SampleSource for TrainPipeline<'_> {
    fn len(&self) -> usize {
        self.split.entries.len()
    }

    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> (ImageBuf, Heatmap) {
        let (img, inst) = self.split.entry(index);
        make_training_sample(img, inst, self.spec, self.aug, self.heatmap, rng)
            .expect("augmented sample from a validated split")
    }
}

fn tensor_to_heatmap(t: Tensor, cfg: &HeatmapConfig) -> Heatmap {
    let k = t.c;
    let mut hm = Heatmap::zeros(k, *cfg);
    hm.data = t.data;
    hm.supervised = vec![true; k];
    hm
}

fn average_heatmaps(a: &mut Heatmap, b: &Heatmap) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x = 0.5 * (*x + y);
    }
}

/// One decoded prediction: a result-file row plus image-space keypoints.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub result: KeypointResult,
    pub decoded: Vec<DecodedKeypoint>,
}

/// Decodes a crop-space heatmap and maps the peaks back through the inverse
/// crop transform into image coordinates.
pub fn decode_to_image_space(
    hm: &Heatmap,
    crop_t: &Affine2D,
) -> Result<Vec<DecodedKeypoint>, PipelineError> {
    let inv = crop_t.inverse()?;
    Ok(decode(hm)
        .into_iter()
        .map(|d| {
            let (x, y) = inv.apply(d.x, d.y);
            DecodedKeypoint {
                x,
                y,
                confidence: d.confidence,
            }
        })
        .collect())
}

/// Single-pass top-down inference for one box. With `flip_test`, the heatmap
/// is averaged with the re-flipped prediction on the mirrored input before
/// decoding.
pub fn predict_instance(
    net: &MicroUNet,
    img: &ImageBuf,
    image_id: u64,
    bbox: &BBox,
    spec: &SkeletonSpec,
    hm_cfg: &HeatmapConfig,
    flip_test: bool,
) -> Result<Prediction, PipelineError> {
    let crop = crop_from_bbox(bbox, hm_cfg.input_size, CROP_PADDING);
    let t = crop_affine(&crop)?;
    let warped = warp_image(img, &t, hm_cfg.input_size)?;

    let mut hm = tensor_to_heatmap(net.infer_pose(&warped)?, hm_cfg);
    if flip_test {
        let mut mirrored = warped.clone();
        mirrored.hflip();
        let hm_m = tensor_to_heatmap(net.infer_pose(&mirrored)?, hm_cfg);
        let hm_back = crate::heatmap::flip_heatmap(&hm_m, spec)?;
        average_heatmaps(&mut hm, &hm_back);
    }

    let decoded = decode_to_image_space(&hm, &t)?;
    let mut flat = Vec::with_capacity(decoded.len() * 3);
    let mut score = 0.0;
    for d in &decoded {
        let c = d.confidence.clamp(0.0, 1.0);
        flat.extend_from_slice(&[d.x, d.y, c]);
        score += c;
    }
    score /= decoded.len().max(1) as f64;
    Ok(Prediction {
        result: KeypointResult {
            image_id,
            keypoints: flat,
            score,
        },
        decoded,
    })
}

/// Runs inference over every entry of a split using its ground-truth boxes.
pub fn predict_split(
    net: &MicroUNet,
    split: &LoadedSplit,
    spec: &SkeletonSpec,
    hm_cfg: &HeatmapConfig,
    flip_test: bool,
) -> Result<Vec<Prediction>, PipelineError> {
    let mut out = Vec::with_capacity(split.entries.len());
    for i in 0..split.entries.len() {
        let (img, inst) = split.entry(i);
        out.push(predict_instance(
            net,
            img,
            inst.image_id,
            &inst.bbox,
            spec,
            hm_cfg,
            flip_test,
        )?);
    }
    Ok(out)
}

/// Runs inference for every detection box. The detector score multiplies the
/// mean keypoint confidence, so weak boxes rank below confident ones when the
/// evaluator sorts results.
pub fn predict_detections(
    net: &MicroUNet,
    split: &LoadedSplit,
    detections: &DetectionFile,
    spec: &SkeletonSpec,
    hm_cfg: &HeatmapConfig,
    flip_test: bool,
) -> Result<Vec<Prediction>, PipelineError> {
    let mut out = Vec::with_capacity(detections.detections.len());
    for det in &detections.detections {
        let img_i = *split
            .image_index
            .get(&det.image_id)
            .ok_or(PipelineError::MissingImage(det.image_id))?;
        let mut p = predict_instance(
            net,
            &split.images[img_i],
            det.image_id,
            &det.bbox,
            spec,
            hm_cfg,
            flip_test,
        )?;
        p.result.score *= det.score;
        out.push(p);
    }
    Ok(out)
}

/// Encodes one instance's ground truth into its padded-crop heatmap,
/// returning the crop transform alongside so callers can map back.
pub fn encode_gt_crop(
    inst: &PersonInstance,
    spec: &SkeletonSpec,
    hm_cfg: &HeatmapConfig,
) -> Result<(Heatmap, Affine2D), PipelineError> {
    let crop = crop_from_bbox(&inst.bbox, hm_cfg.input_size, CROP_PADDING);
    let t = crop_affine(&crop)?;
    let kps = keypoints_to_crop(&inst.keypoints, &t, hm_cfg.input_size);
    let hm = encode(&crop_space_instance(inst, kps, hm_cfg.input_size), hm_cfg, spec)?;
    Ok((hm, t))
}

/// Encodes each ground-truth instance into a crop-space heatmap, decodes it
/// back, and returns the decoded coordinates as results with score 1. This is
/// the evaluator's self-check input: any drop below a perfect score exposes a
/// codec or coordinate-chain defect.
pub fn gt_roundtrip_results(
    split: &LoadedSplit,
    spec: &SkeletonSpec,
    hm_cfg: &HeatmapConfig,
) -> Result<ResultFile, PipelineError> {
    let mut results = Vec::with_capacity(split.entries.len());
    for i in 0..split.entries.len() {
        let (_, inst) = split.entry(i);
        let (hm, t) = encode_gt_crop(inst, spec, hm_cfg)?;
        let decoded = decode_to_image_space(&hm, &t)?;
        let mut flat = Vec::with_capacity(decoded.len() * 3);
        for (d, kp) in decoded.iter().zip(&inst.keypoints) {
            if kp.v == Visibility::Unlabeled {
                flat.extend_from_slice(&[0.0, 0.0, 0.0]);
            } else {
                flat.extend_from_slice(&[d.x, d.y, 1.0]);
            }
        }
        results.push(KeypointResult {
            image_id: inst.image_id,
            keypoints: flat,
            score: 1.0,
        });
    }
    Ok(ResultFile { results })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PckOutcome {
    pub pck: f64,
    pub correct: usize,
    pub total: usize,
}

/// Percentage of correct keypoints: a labeled ground-truth keypoint counts as
/// correct when the prediction lies within `threshold` times the larger
/// ground-truth box side.
pub fn pck(
    gts: &[&PersonInstance],
    preds: &[&[DecodedKeypoint]],
    threshold: f64,
) -> PckOutcome {
    assert_eq!(gts.len(), preds.len(), "gt/prediction count mismatch");
    let mut correct = 0;
    let mut total = 0;
    for (gt, kps) in gts.iter().zip(preds) {
        assert_eq!(gt.keypoints.len(), kps.len(), "keypoint count mismatch");
        let scale = gt.bbox.w.max(gt.bbox.h);
        for (g, p) in gt.keypoints.iter().zip(*kps) {
            if g.v == Visibility::Unlabeled {
                continue;
            }
            total += 1;
            let d = ((g.x - p.x).powi(2) + (g.y - p.y).powi(2)).sqrt();
            if d <= threshold * scale {
                correct += 1;
            }
        }
    }
    PckOutcome {
        pck: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, rng_for_item, stream};
    use crate::skeleton::Visibility;
    use crate::synthdata::{build_dataset, generate_scene, FigureParams, StyleParams};

    fn spec() -> SkeletonSpec {
        SkeletonSpec::coco17()
    }

    fn hm_cfg() -> HeatmapConfig {
        HeatmapConfig {
            input_size: (64, 64),
            heatmap_size: (16, 16),
            sigma: 2.0,
            supervise_occluded: true,
        }
    }

    fn scene(seed: u64) -> (ImageBuf, PersonInstance) {
        let params = FigureParams {
            center_x_range: (0.45, 0.55),
            center_y_range: (0.42, 0.5),
            ..FigureParams::default()
        };
        let mut rng = rng_for_item(seed, stream::DATASET, 0);
        let (img, mut insts) = generate_scene(&spec(), &params, 1, &mut rng).unwrap();
        (img, insts.remove(0))
    }

    #[test]
    fn bbox_crop_is_padded_and_aspect_matched() {
        let bbox = BBox::new(10.0, 20.0, 10.0, 30.0);
        let crop = crop_from_bbox(&bbox, (64, 64), 1.25);
        assert_eq!(crop.center, (15.0, 35.0));
        assert_eq!(crop.rotation, 0.0);
        assert!((crop.scale.1 - 37.5).abs() < 1e-12);
        assert!((crop.scale.0 - 37.5).abs() < 1e-12, "width padded up to the output aspect");

        let wide = crop_from_bbox(&BBox::new(0.0, 0.0, 40.0, 10.0), (64, 32), 1.0);
        let aspect = 63.0 / 31.0;
        assert!((wide.scale.0 / wide.scale.1 - aspect).abs() < 1e-12);
    }

    #[test]
    fn plain_sample_decodes_back_to_ground_truth() {
        let (img, inst) = scene(11);
        let aug = AugConfig::disabled();
        let hm = hm_cfg();
        let mut rng = rng_for(5, stream::AUGMENT);
        let (input, target) =
            make_training_sample(&img, &inst, &spec(), &aug, &hm, &mut rng).unwrap();
        assert_eq!((input.w, input.h), (64, 64));

        let crop = crop_from_bbox(&inst.bbox, hm.input_size, CROP_PADDING);
        let t = crop_affine(&crop).unwrap();
        let decoded = decode_to_image_space(&target, &t).unwrap();
        for (kp, d) in inst.keypoints.iter().zip(&decoded) {
            if kp.v == Visibility::Unlabeled {
                continue;
            }
            let err = ((kp.x - d.x).powi(2) + (kp.y - d.y).powi(2)).sqrt();
            assert!(err < 0.3, "roundtrip error {err} px in image space");
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (img, inst) = scene(12);
        let aug = AugConfig::default();
        let hm = hm_cfg();
        let s = spec();
        let mut r1 = rng_for_item(9, stream::AUGMENT, 3);
        let mut r2 = rng_for_item(9, stream::AUGMENT, 3);
        let (a_img, a_hm) = make_training_sample(&img, &inst, &s, &aug, &hm, &mut r1).unwrap();
        let (b_img, b_hm) = make_training_sample(&img, &inst, &s, &aug, &hm, &mut r2).unwrap();
        assert_eq!(a_img.data, b_img.data);
        assert_eq!(a_hm.data, b_hm.data);
        assert_eq!(a_hm.supervised, b_hm.supervised);

        let mut r3 = rng_for_item(9, stream::AUGMENT, 4);
        let (c_img, _) = make_training_sample(&img, &inst, &s, &aug, &hm, &mut r3).unwrap();
        assert_ne!(a_img.data, c_img.data, "different draws must differ");
    }

    #[test]
    fn forced_flip_matches_manually_flipped_pipeline() {
        let (img, inst) = scene(13);
        let mut aug = AugConfig::disabled();
        aug.flip_prob = 1.0;
        let hm = hm_cfg();
        let s = spec();
        let mut rng = rng_for(21, stream::AUGMENT);
        let (flip_input, flip_target) =
            make_training_sample(&img, &inst, &s, &aug, &hm, &mut rng).unwrap();

        let mut mirrored = img.clone();
        mirrored.hflip();
        let minst = flip_instance(&inst, img.w, &s).unwrap();
        let mut rng = rng_for(22, stream::AUGMENT);
        let (ref_input, ref_target) =
            make_training_sample(&mirrored, &minst, &s, &AugConfig::disabled(), &hm, &mut rng)
                .unwrap();
        assert_eq!(flip_input.data, ref_input.data);
        assert_eq!(flip_target.data, ref_target.data);
    }

    #[test]
    fn keypoints_leaving_the_crop_lose_supervision() {
        let (img, mut inst) = scene(14);
        // Shrink the box to the nose so distant keypoints fall outside.
        let nose = inst.keypoints[0];
        inst.bbox = BBox::new(nose.x - 4.0, nose.y - 4.0, 8.0, 8.0);
        inst.area = inst.bbox.w * inst.bbox.h;
        let hm = hm_cfg();
        let mut rng = rng_for(31, stream::AUGMENT);
        let (_, target) =
            make_training_sample(&img, &inst, &spec(), &AugConfig::disabled(), &hm, &mut rng)
                .unwrap();
        assert!(target.supervised[0], "nose stays supervised");
        let dropped = target.supervised.iter().filter(|s| !**s).count();
        assert!(dropped >= 4, "ankles and wrists must leave the tiny crop");
    }

    #[test]
    fn split_loading_wires_images_ids_and_entries() {
        let s = spec();
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(
            &s,
            &FigureParams::default(),
            &StyleParams::monet(),
            3,
            2,
            77,
            dir.path(),
        )
        .unwrap();
        let train = load_manifest_split(dir.path(), &manifest, "train", &s).unwrap();
        assert_eq!(train.images.len(), 3);
        assert!(!train.entries.is_empty());
        for &(img_i, ann_i) in &train.entries {
            let inst = &train.annotation.annotations[ann_i];
            assert_eq!(train.image_index[&inst.image_id], img_i);
        }

        let val = load_manifest_split(dir.path(), &manifest, "val", &s).unwrap();
        let styl = load_manifest_split(dir.path(), &manifest, "val_stylized", &s).unwrap();
        assert_eq!(val.annotation, styl.annotation);
        assert_ne!(
            val.images[0].data, styl.images[0].data,
            "stylized split must load shifted pixels"
        );
        assert!(matches!(
            load_manifest_split(dir.path(), &manifest, "nope", &s),
            Err(PipelineError::MissingSplit(_))
        ));
    }

    #[test]
    fn gt_roundtrip_pck_is_perfect() {
        let s = spec();
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(
            &s,
            &FigureParams::default(),
            &StyleParams::monet(),
            1,
            3,
            99,
            dir.path(),
        )
        .unwrap();
        let val = load_manifest_split(dir.path(), &manifest, "val", &s).unwrap();
        let hm = hm_cfg();
        let file = gt_roundtrip_results(&val, &s, &hm).unwrap();
        assert_eq!(file.results.len(), val.entries.len());

        let mut gts = Vec::new();
        let mut decs: Vec<Vec<DecodedKeypoint>> = Vec::new();
        for (i, r) in file.results.iter().enumerate() {
            let (_, inst) = val.entry(i);
            gts.push(inst);
            decs.push(
                r.keypoints
                    .chunks(3)
                    .map(|c| DecodedKeypoint {
                        x: c[0],
                        y: c[1],
                        confidence: c[2],
                    })
                    .collect(),
            );
        }
        let dec_refs: Vec<&[DecodedKeypoint]> = decs.iter().map(|d| d.as_slice()).collect();
        let out = pck(&gts, &dec_refs, 0.05);
        assert_eq!(out.pck, 1.0, "{} / {} correct", out.correct, out.total);
    }

    #[test]
    fn prediction_is_deterministic_and_well_formed() {
        use crate::micronet::NetConfig;
        let s = spec();
        let (img, inst) = scene(15);
        let cfg = NetConfig {
            input_size: (64, 64),
            latent_stride: 8,
            base_channels: 4,
            depth: 2,
            k: s.k,
            embed_dim: 4,
            feature_tap: Default::default(),
            head_bottleneck: None,
        };
        let net = MicroUNet::new(cfg, 5).unwrap();
        let hm = hm_cfg();
        let a = predict_instance(&net, &img, 7, &inst.bbox, &s, &hm, false).unwrap();
        let b = predict_instance(&net, &img, 7, &inst.bbox, &s, &hm, false).unwrap();
        assert_eq!(a.result.keypoints, b.result.keypoints);
        assert_eq!(a.result.image_id, 7);
        assert_eq!(a.decoded.len(), s.k);
        assert!((0.0..=1.0).contains(&a.result.score));

        let f1 = predict_instance(&net, &img, 7, &inst.bbox, &s, &hm, true).unwrap();
        let f2 = predict_instance(&net, &img, 7, &inst.bbox, &s, &hm, true).unwrap();
        assert_eq!(f1.result.keypoints, f2.result.keypoints);
        assert_ne!(
            f1.result.keypoints, a.result.keypoints,
            "flip-test averaging must change an asymmetric prediction"
        );
    }

    #[test]
    fn detection_predictions_fold_in_detector_score() {
        use crate::coco::Detection;
        use crate::micronet::NetConfig;
        let s = spec();
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(
            &s,
            &FigureParams::default(),
            &StyleParams::monet(),
            1,
            2,
            41,
            dir.path(),
        )
        .unwrap();
        let val = load_manifest_split(dir.path(), &manifest, "val", &s).unwrap();
        let cfg = NetConfig {
            input_size: (64, 64),
            latent_stride: 8,
            base_channels: 4,
            depth: 2,
            k: s.k,
            embed_dim: 4,
            feature_tap: Default::default(),
            head_bottleneck: None,
        };
        let net = MicroUNet::new(cfg, 5).unwrap();
        let hm = hm_cfg();

        let (img0, inst0) = val.entry(0);
        let dets = DetectionFile {
            detections: vec![Detection {
                image_id: inst0.image_id,
                bbox: inst0.bbox,
                score: 0.5,
                category_id: 1,
            }],
        };
        let preds = predict_detections(&net, &val, &dets, &s, &hm, false).unwrap();
        assert_eq!(preds.len(), 1);
        let direct = predict_instance(&net, img0, inst0.image_id, &inst0.bbox, &s, &hm, false).unwrap();
        assert_eq!(preds[0].result.keypoints, direct.result.keypoints);
        assert!((preds[0].result.score - 0.5 * direct.result.score).abs() < 1e-12);

        let missing = DetectionFile {
            detections: vec![Detection {
                image_id: 9999,
                bbox: inst0.bbox,
                score: 1.0,
                category_id: 1,
            }],
        };
        assert!(matches!(
            predict_detections(&net, &val, &missing, &s, &hm, false),
            Err(PipelineError::MissingImage(9999))
        ));
    }

    #[test]
    fn pck_hand_case() {
        let (_, inst) = scene(16);
        let exact: Vec<DecodedKeypoint> = inst
            .keypoints
            .iter()
            .map(|kp| DecodedKeypoint {
                x: kp.x,
                y: kp.y,
                confidence: 1.0,
            })
            .collect();
        let out = pck(&[&inst], &[exact.as_slice()], 0.1);
        assert_eq!(out.pck, 1.0);

        let mut off = exact.clone();
        let scale = inst.bbox.w.max(inst.bbox.h);
        off[0].x += 0.2 * scale;
        let out = pck(&[&inst], &[off.as_slice()], 0.1);
        assert!(out.pck < 1.0);
        assert_eq!(out.correct, out.total - 1);
    }
}

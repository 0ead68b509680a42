//! COCO keypoint JSON formats: annotations, detection boxes, and results.
//!
//! Only the fields the pipeline consumes are modeled; everything else in a
//! real COCO file (segmentation polygons, licenses, URLs) parses and is
//! ignored. The flat `(x, y, v)` triplet layout is converted to structured
//! keypoints here and nowhere else.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{
    validate_instance, BBox, Keypoint, PersonInstance, SkeletonError, SkeletonSpec, Visibility,
};

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("malformed json at line {line}, column {column}")]
    MalformedJson { line: usize, column: usize },
    #[error("{record} record {index} is missing field `{field}`")]
    MissingField { record: &'static str, index: usize, field: &'static str },
    #[error("annotation {index} has {got} keypoint numbers, expected {expected}")]
    TripletLengthMismatch { index: usize, got: usize, expected: usize },
    #[error("{record} record {index} has a bbox with {got} numbers, expected 4")]
    BBoxLengthMismatch { record: &'static str, index: usize, got: usize },
    #[error("annotation {index} references unknown image_id {image_id}")]
    DanglingImageId { index: usize, image_id: u64 },
    #[error("detection {index} has score {score} outside [0, 1]")]
    ScoreOutOfRange { index: usize, score: f64 },
    #[error("record {index} is invalid: {source}")]
    InvalidRecord { index: usize, source: SkeletonError },
}

fn json_err(e: serde_json::Error) -> CocoError {
    CocoError::MalformedJson { line: e.line(), column: e.column() }
}

/// One entry of the `images` array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

/// One entry of the `categories` array, carried as written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryInfo {
    pub id: u64,
    pub name: String,
    pub supercategory: String,
    pub keypoints: Vec<String>,
    /// Skeleton edges in the official 1-based convention.
    pub skeleton: Vec<(usize, usize)>,
}

impl CategoryInfo {
    /// The standard person category block for a skeleton spec.
    pub fn person_category(spec: &SkeletonSpec) -> Self {
        Self {
            id: 1,
            name: "person".into(),
            supercategory: "person".into(),
            keypoints: spec.keypoint_names.clone(),
            skeleton: spec.skeleton_edges.iter().map(|&(a, b)| (a + 1, b + 1)).collect(),
        }
    }
}

/// Parsed ground-truth annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationFile {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<PersonInstance>,
    pub categories: Vec<CategoryInfo>,
}

impl AnnotationFile {
    /// Ground-truth instances grouped by image, in file order.
    pub fn by_image(&self) -> BTreeMap<u64, Vec<&PersonInstance>> {
        let mut map: BTreeMap<u64, Vec<&PersonInstance>> = BTreeMap::new();
        for inst in &self.annotations {
            map.entry(inst.image_id).or_default().push(inst);
        }
        map
    }
}

/// One person detection box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub category_id: u64,
}

/// Parsed detection-results file (a flat JSON array).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionFile {
    pub detections: Vec<Detection>,
}

impl DetectionFile {
    pub fn by_image(&self) -> BTreeMap<u64, Vec<&Detection>> {
        let mut map: BTreeMap<u64, Vec<&Detection>> = BTreeMap::new();
        for det in &self.detections {
            map.entry(det.image_id).or_default().push(det);
        }
        map
    }
}

/// One predicted instance in the results format. The flat triplets carry
/// `(x, y, c)` with `c` the per-keypoint confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointResult {
    pub image_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

impl KeypointResult {
    /// Converts to an instance for evaluation: all keypoints marked visible,
    /// bbox synthesized as the tight keypoint extent (at least 1 px a side).
    pub fn to_instance(&self, k: usize) -> Result<PersonInstance, SkeletonError> {
        if self.keypoints.len() != 3 * k {
            return Err(SkeletonError::KeypointCountMismatch {
                got: self.keypoints.len() / 3,
                expected: k,
            });
        }
        let keypoints: Vec<Keypoint> = self
            .keypoints
            .chunks_exact(3)
            .map(|t| Keypoint { x: t[0], y: t[1], v: Visibility::Visible })
            .collect();
        let xs: Vec<f64> = keypoints.iter().map(|k| k.x).collect();
        let ys: Vec<f64> = keypoints.iter().map(|k| k.y).collect();
        let xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ymin = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let ymax = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bbox = BBox {
            x: xmin,
            y: ymin,
            w: (xmax - xmin).max(1.0),
            h: (ymax - ymin).max(1.0),
        };
        Ok(PersonInstance {
            image_id: self.image_id,
            keypoints,
            bbox,
            area: bbox.w * bbox.h,
            score: Some(self.score),
            iscrowd: false,
        })
    }
}

/// Parsed keypoint-results file (a flat JSON array).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultFile {
    pub results: Vec<KeypointResult>,
}

/// Structured keypoints to the flat `(x, y, v)` layout.
pub fn keypoints_to_flat(kps: &[Keypoint]) -> Vec<f64> {
    let mut flat = Vec::with_capacity(kps.len() * 3);
    for kp in kps {
        flat.extend_from_slice(&[kp.x, kp.y, kp.v.flag()]);
    }
    flat
}

/// Flat `(x, y, v)` triplets to structured keypoints; flags must be 0, 1 or 2.
pub fn flat_to_keypoints(flat: &[f64]) -> Result<Vec<Keypoint>, SkeletonError> {
    flat.chunks_exact(3)
        .map(|t| {
            Ok(Keypoint { x: t[0], y: t[1], v: Visibility::from_flag(t[2])? })
        })
        .collect()
}

#[derive(Deserialize)]
struct RawRoot {
    images: Option<Vec<RawImage>>,
    annotations: Option<Vec<RawAnnotation>>,
    categories: Option<Vec<RawCategory>>,
}

#[derive(Deserialize)]
struct RawImage {
    id: Option<u64>,
    file_name: Option<String>,
    width: Option<usize>,
    height: Option<usize>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: Option<u64>,
    keypoints: Option<Vec<f64>>,
    bbox: Option<Vec<f64>>,
    area: Option<f64>,
    iscrowd: Option<u8>,
}

#[derive(Deserialize)]
struct RawCategory {
    id: Option<u64>,
    name: Option<String>,
    supercategory: Option<String>,
    keypoints: Option<Vec<String>>,
    skeleton: Option<Vec<Vec<usize>>>,
}

/// Parses a COCO person-keypoints annotation file.
pub fn parse_annotations(bytes: &[u8], spec: &SkeletonSpec) -> Result<AnnotationFile, CocoError> {
    let raw: RawRoot = serde_json::from_slice(bytes).map_err(json_err)?;

    let mut images = Vec::new();
    for (index, ri) in raw.images.unwrap_or_default().into_iter().enumerate() {
        let miss = |field| CocoError::MissingField { record: "image", index, field };
        images.push(ImageInfo {
            id: ri.id.ok_or_else(|| miss("id"))?,
            file_name: ri.file_name.ok_or_else(|| miss("file_name"))?,
            width: ri.width.ok_or_else(|| miss("width"))?,
            height: ri.height.ok_or_else(|| miss("height"))?,
        });
    }
    let known_ids: HashSet<u64> = images.iter().map(|im| im.id).collect();

    let mut annotations = Vec::new();
    for (index, ra) in raw.annotations.unwrap_or_default().into_iter().enumerate() {
        let miss = |field| CocoError::MissingField { record: "annotation", index, field };
        let image_id = ra.image_id.ok_or_else(|| miss("image_id"))?;
        if !known_ids.contains(&image_id) {
            return Err(CocoError::DanglingImageId { index, image_id });
        }
        let flat = ra.keypoints.ok_or_else(|| miss("keypoints"))?;
        if flat.len() != 3 * spec.k {
            return Err(CocoError::TripletLengthMismatch {
                index,
                got: flat.len(),
                expected: 3 * spec.k,
            });
        }
        let keypoints =
            flat_to_keypoints(&flat).map_err(|source| CocoError::InvalidRecord { index, source })?;
        let raw_bbox = ra.bbox.ok_or_else(|| miss("bbox"))?;
        if raw_bbox.len() != 4 {
            return Err(CocoError::BBoxLengthMismatch {
                record: "annotation",
                index,
                got: raw_bbox.len(),
            });
        }
        let inst = PersonInstance {
            image_id,
            keypoints,
            bbox: BBox { x: raw_bbox[0], y: raw_bbox[1], w: raw_bbox[2], h: raw_bbox[3] },
            area: ra.area.ok_or_else(|| miss("area"))?,
            score: None,
            iscrowd: ra.iscrowd.unwrap_or(0) != 0,
        };
        validate_instance(&inst, spec)
            .map_err(|source| CocoError::InvalidRecord { index, source })?;
        annotations.push(inst);
    }

    let mut categories = Vec::new();
    for (index, rc) in raw.categories.unwrap_or_default().into_iter().enumerate() {
        let miss = |field| CocoError::MissingField { record: "category", index, field };
        let skeleton = rc
            .skeleton
            .unwrap_or_default()
            .into_iter()
            .map(|edge| {
                if edge.len() == 2 {
                    Ok((edge[0], edge[1]))
                } else {
                    Err(miss("skeleton"))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        categories.push(CategoryInfo {
            id: rc.id.ok_or_else(|| miss("id"))?,
            name: rc.name.unwrap_or_default(),
            supercategory: rc.supercategory.unwrap_or_default(),
            keypoints: rc.keypoints.unwrap_or_default(),
            skeleton,
        });
    }

    Ok(AnnotationFile { images, annotations, categories })
}

#[derive(Deserialize)]
struct RawDetection {
    image_id: Option<u64>,
    bbox: Option<Vec<f64>>,
    score: Option<f64>,
    category_id: Option<u64>,
}

/// Parses a COCO detection-results file (flat array of boxes).
pub fn parse_detections(bytes: &[u8]) -> Result<DetectionFile, CocoError> {
    let raw: Vec<RawDetection> = serde_json::from_slice(bytes).map_err(json_err)?;
    let mut detections = Vec::new();
    for (index, rd) in raw.into_iter().enumerate() {
        let miss = |field| CocoError::MissingField { record: "detection", index, field };
        let raw_bbox = rd.bbox.ok_or_else(|| miss("bbox"))?;
        if raw_bbox.len() != 4 {
            return Err(CocoError::BBoxLengthMismatch {
                record: "detection",
                index,
                got: raw_bbox.len(),
            });
        }
        let score = rd.score.ok_or_else(|| miss("score"))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(CocoError::ScoreOutOfRange { index, score });
        }
        detections.push(Detection {
            image_id: rd.image_id.ok_or_else(|| miss("image_id"))?,
            bbox: BBox { x: raw_bbox[0], y: raw_bbox[1], w: raw_bbox[2], h: raw_bbox[3] },
            score,
            category_id: rd.category_id.unwrap_or(1),
        });
    }
    Ok(DetectionFile { detections })
}

#[derive(Deserialize)]
struct RawResult {
    image_id: Option<u64>,
    keypoints: Option<Vec<f64>>,
    score: Option<f64>,
}

/// Parses a COCO keypoint-results file (flat array of predictions).
pub fn parse_results(bytes: &[u8], spec: &SkeletonSpec) -> Result<ResultFile, CocoError> {
    let raw: Vec<RawResult> = serde_json::from_slice(bytes).map_err(json_err)?;
    let mut results = Vec::new();
    for (index, rr) in raw.into_iter().enumerate() {
        let miss = |field| CocoError::MissingField { record: "result", index, field };
        let keypoints = rr.keypoints.ok_or_else(|| miss("keypoints"))?;
        if keypoints.len() != 3 * spec.k {
            return Err(CocoError::TripletLengthMismatch {
                index,
                got: keypoints.len(),
                expected: 3 * spec.k,
            });
        }
        results.push(KeypointResult {
            image_id: rr.image_id.ok_or_else(|| miss("image_id"))?,
            keypoints,
            score: rr.score.ok_or_else(|| miss("score"))?,
        });
    }
    Ok(ResultFile { results })
}

#[derive(Serialize)]
struct OutImage<'a> {
    id: u64,
    file_name: &'a str,
    width: usize,
    height: usize,
}

#[derive(Serialize)]
struct OutAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    iscrowd: u8,
    area: f64,
    bbox: [f64; 4],
    num_keypoints: usize,
    keypoints: Vec<f64>,
}

#[derive(Serialize)]
struct OutCategory<'a> {
    id: u64,
    name: &'a str,
    supercategory: &'a str,
    keypoints: &'a [String],
    skeleton: Vec<[usize; 2]>,
}

#[derive(Serialize)]
struct OutRoot<'a> {
    images: Vec<OutImage<'a>>,
    annotations: Vec<OutAnnotation>,
    categories: Vec<OutCategory<'a>>,
}

/// Emits an annotation file in the official schema. Annotation ids are
/// assigned sequentially from 1; prediction scores are never written (ground
/// truth has none).
pub fn write_annotations(file: &AnnotationFile) -> String {
    let root = OutRoot {
        images: file
            .images
            .iter()
            .map(|im| OutImage {
                id: im.id,
                file_name: &im.file_name,
                width: im.width,
                height: im.height,
            })
            .collect(),
        annotations: file
            .annotations
            .iter()
            .enumerate()
            .map(|(i, inst)| OutAnnotation {
                id: i as u64 + 1,
                image_id: inst.image_id,
                category_id: 1,
                iscrowd: inst.iscrowd as u8,
                area: inst.area,
                bbox: [inst.bbox.x, inst.bbox.y, inst.bbox.w, inst.bbox.h],
                num_keypoints: inst.num_labeled(),
                keypoints: keypoints_to_flat(&inst.keypoints),
            })
            .collect(),
        categories: file
            .categories
            .iter()
            .map(|c| OutCategory {
                id: c.id,
                name: &c.name,
                supercategory: &c.supercategory,
                keypoints: &c.keypoints,
                skeleton: c.skeleton.iter().map(|&(a, b)| [a, b]).collect(),
            })
            .collect(),
    };
    serde_json::to_string(&root).expect("annotation serialization cannot fail")
}

#[derive(Serialize)]
struct OutResult<'a> {
    image_id: u64,
    category_id: u64,
    keypoints: &'a [f64],
    score: f64,
}

/// Emits a keypoint-results file; parsing the output reproduces the input
/// exactly (floats are printed with round-trip precision).
pub fn write_results(file: &ResultFile) -> String {
    let out: Vec<OutResult> = file
        .results
        .iter()
        .map(|r| OutResult {
            image_id: r.image_id,
            category_id: 1,
            keypoints: &r.keypoints,
            score: r.score,
        })
        .collect();
    serde_json::to_string(&out).expect("result serialization cannot fail")
}

#[derive(Serialize)]
struct OutDetection {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
}

/// Emits a detection-results file.
pub fn write_detections(file: &DetectionFile) -> String {
    let out: Vec<OutDetection> = file
        .detections
        .iter()
        .map(|d| OutDetection {
            image_id: d.image_id,
            category_id: d.category_id,
            bbox: [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
            score: d.score,
        })
        .collect();
    serde_json::to_string(&out).expect("detection serialization cannot fail")
}

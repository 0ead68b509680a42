//! Canonical domain types shared by every other module: skeleton layouts,
//! keypoints, boxes, and annotated person instances.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SkeletonError {
    #[error("keypoint count mismatch: instance has {got} keypoints, skeleton defines {expected}")]
    KeypointCountMismatch { got: usize, expected: usize },
    #[error("instance area must be positive, got {0}")]
    NonPositiveArea(f64),
    #[error("visibility flag {0} outside {{0,1,2}}")]
    InvalidVisibility(f64),
    #[error("score {0} outside [0,1]")]
    ScoreOutOfRange(f64),
    #[error("bbox has non-positive extent w={w} h={h}")]
    DegenerateBBox { w: f64, h: f64 },
    #[error("index {index} in {field} exceeds keypoint count {k}")]
    IndexOutOfRange { field: &'static str, index: usize, k: usize },
    #[error("keypoint index {0} appears in more than one flip pair")]
    DuplicateIndexInFlipPairs(usize),
    #[error("flip pair ({0},{0}) pairs an index with itself")]
    SelfFlipPair(usize),
    #[error("oks falloff constant k[{index}] = {value} is not strictly positive")]
    NonPositiveOksK { index: usize, value: f64 },
    #[error("declared keypoint count {declared} does not match {named} keypoint names")]
    NameCountMismatch { declared: usize, named: usize },
}

/// Three-state COCO visibility convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    /// Not annotated; coordinates are meaningless and ignored by all consumers.
    Unlabeled,
    /// Annotated but occluded.
    Occluded,
    /// Annotated and visible.
    Visible,
}

impl Visibility {
    pub fn from_flag(v: f64) -> Result<Self, SkeletonError> {
        match v {
            x if x == 0.0 => Ok(Visibility::Unlabeled),
            x if x == 1.0 => Ok(Visibility::Occluded),
            x if x == 2.0 => Ok(Visibility::Visible),
            other => Err(SkeletonError::InvalidVisibility(other)),
        }
    }

    pub fn flag(self) -> f64 {
        match self {
            Visibility::Unlabeled => 0.0,
            Visibility::Occluded => 1.0,
            Visibility::Visible => 2.0,
        }
    }

    /// True for both occluded and visible keypoints; this is the indicator
    /// used by the evaluation metric and (by default) by heatmap supervision.
    pub fn is_labeled(self) -> bool {
        !matches!(self, Visibility::Unlabeled)
    }
}

/// One keypoint in continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: Visibility,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: Visibility) -> Self {
        Keypoint { x, y, v }
    }
}

/// Axis-aligned box, top-left convention, pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        if self.w > 0.0 && self.h > 0.0 {
            Ok(())
        } else {
            Err(SkeletonError::DegenerateBBox { w: self.w, h: self.h })
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// Keypoint layout: names, left/right flip pairs, per-keypoint similarity
/// falloff constants, and the edges used for rendering and synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub name: String,
    pub k: usize,
    pub keypoint_names: Vec<String>,
    pub flip_pairs: Vec<(usize, usize)>,
    pub oks_k: Vec<f64>,
    pub skeleton_edges: Vec<(usize, usize)>,
    /// Indices used when a half-body crop selects the upper body.
    /// Defaults to `0..11` (head and arms in the 17-point layout).
    #[serde(default)]
    pub upper_body: Option<Vec<usize>>,
    /// Indices used when a half-body crop selects the lower body.
    /// Defaults to `11..k`.
    #[serde(default)]
    pub lower_body: Option<Vec<usize>>,
}

impl SkeletonSpec {
    pub fn validate(&self) -> Result<(), SkeletonError> {
        if self.keypoint_names.len() != self.k {
            return Err(SkeletonError::NameCountMismatch {
                declared: self.k,
                named: self.keypoint_names.len(),
            });
        }
        if self.oks_k.len() != self.k {
            return Err(SkeletonError::NameCountMismatch {
                declared: self.k,
                named: self.oks_k.len(),
            });
        }
        for (i, &kv) in self.oks_k.iter().enumerate() {
            if !(kv > 0.0) {
                return Err(SkeletonError::NonPositiveOksK { index: i, value: kv });
            }
        }
        let mut seen = vec![false; self.k];
        for &(a, b) in &self.flip_pairs {
            for idx in [a, b] {
                if idx >= self.k {
                    return Err(SkeletonError::IndexOutOfRange {
                        field: "flip_pairs",
                        index: idx,
                        k: self.k,
                    });
                }
            }
            if a == b {
                return Err(SkeletonError::SelfFlipPair(a));
            }
            for idx in [a, b] {
                if seen[idx] {
                    return Err(SkeletonError::DuplicateIndexInFlipPairs(idx));
                }
                seen[idx] = true;
            }
        }
        for &(a, b) in &self.skeleton_edges {
            for idx in [a, b] {
                if idx >= self.k {
                    return Err(SkeletonError::IndexOutOfRange {
                        field: "skeleton_edges",
                        index: idx,
                        k: self.k,
                    });
                }
            }
        }
        for (field, list) in [("upper_body", &self.upper_body), ("lower_body", &self.lower_body)] {
            if let Some(list) = list {
                for &idx in list {
                    if idx >= self.k {
                        return Err(SkeletonError::IndexOutOfRange { field, index: idx, k: self.k });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn upper_body_indices(&self) -> Vec<usize> {
        match &self.upper_body {
            Some(v) => v.clone(),
            None => (0..self.k.min(11)).collect(),
        }
    }

    pub fn lower_body_indices(&self) -> Vec<usize> {
        match &self.lower_body {
            Some(v) => v.clone(),
            None => (self.k.min(11)..self.k).collect(),
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, String> {
        let spec: SkeletonSpec =
            serde_json::from_slice(bytes).map_err(|e| format!("skeleton spec parse: {e}"))?;
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("skeleton spec serializes");
        out.push(b'\n');
        out
    }

    /// The standard 17-point person layout with the reference falloff
    /// constants used by the COCO keypoint evaluation protocol.
    pub fn coco17() -> Self {
        let names = [
            "nose",
            "left_eye",
            "right_eye",
            "left_ear",
            "right_ear",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
            "left_hip",
            "right_hip",
            "left_knee",
            "right_knee",
            "left_ankle",
            "right_ankle",
        ];
        // k_i = 2 * sigma_i with the reference per-keypoint sigmas.
        let sigmas = [
            0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107,
            0.107, 0.087, 0.087, 0.089, 0.089,
        ];
        SkeletonSpec {
            name: "coco17".to_string(),
            k: 17,
            keypoint_names: names.iter().map(|s| s.to_string()).collect(),
            flip_pairs: vec![(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)],
            oks_k: sigmas.iter().map(|s| 2.0 * s).collect(),
            skeleton_edges: vec![
                (15, 13),
                (13, 11),
                (16, 14),
                (14, 12),
                (11, 12),
                (5, 11),
                (6, 12),
                (5, 6),
                (5, 7),
                (6, 8),
                (7, 9),
                (8, 10),
                (1, 2),
                (0, 1),
                (0, 2),
                (1, 3),
                (2, 4),
                (3, 5),
                (4, 6),
            ],
            upper_body: None,
            lower_body: None,
        }
    }
}

/// One annotated or predicted person.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonInstance {
    pub image_id: u64,
    pub keypoints: Vec<Keypoint>,
    pub bbox: BBox,
    /// Object scale proxy, pixels squared; the evaluator uses sqrt(area).
    pub area: f64,
    /// Present on predictions only.
    pub score: Option<f64>,
    pub iscrowd: bool,
}

impl PersonInstance {
    pub fn num_labeled(&self) -> usize {
        self.keypoints.iter().filter(|kp| kp.v.is_labeled()).count()
    }

    pub fn num_visible(&self) -> usize {
        self.keypoints.iter().filter(|kp| kp.v == Visibility::Visible).count()
    }
}

/// Checks every instance invariant against the skeleton layout.
pub fn validate_instance(inst: &PersonInstance, spec: &SkeletonSpec) -> Result<(), SkeletonError> {
    if inst.keypoints.len() != spec.k {
        return Err(SkeletonError::KeypointCountMismatch {
            got: inst.keypoints.len(),
            expected: spec.k,
        });
    }
    if !(inst.area > 0.0) {
        return Err(SkeletonError::NonPositiveArea(inst.area));
    }
    inst.bbox.validate()?;
    if let Some(s) = inst.score {
        if !(0.0..=1.0).contains(&s) {
            return Err(SkeletonError::ScoreOutOfRange(s));
        }
    }
    Ok(())
}

/// The involutive permutation of `[0, K)` that swaps each flip pair and fixes
/// every other index.
pub fn flip_index_map(spec: &SkeletonSpec) -> Result<Vec<usize>, SkeletonError> {
    let mut map: Vec<usize> = (0..spec.k).collect();
    let mut seen = vec![false; spec.k];
    for &(a, b) in &spec.flip_pairs {
        for idx in [a, b] {
            if idx >= spec.k {
                return Err(SkeletonError::IndexOutOfRange {
                    field: "flip_pairs",
                    index: idx,
                    k: spec.k,
                });
            }
            if seen[idx] {
                return Err(SkeletonError::DuplicateIndexInFlipPairs(idx));
            }
            seen[idx] = true;
        }
        map[a] = b;
        map[b] = a;
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance(k: usize, area: f64) -> PersonInstance {
        PersonInstance {
            image_id: 1,
            keypoints: (0..k)
                .map(|i| Keypoint::new(i as f64, i as f64, if i % 2 == 0 { Visibility::Visible } else { Visibility::Unlabeled }))
                .collect(),
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            area,
            score: None,
            iscrowd: false,
        }
    }

    #[test]
    fn validate_accepts_conforming_instance() {
        let spec = SkeletonSpec::coco17();
        assert_eq!(validate_instance(&instance(17, 100.0), &spec), Ok(()));
    }

    #[test]
    fn validate_rejects_wrong_count() {
        let spec = SkeletonSpec::coco17();
        assert_eq!(
            validate_instance(&instance(16, 100.0), &spec),
            Err(SkeletonError::KeypointCountMismatch { got: 16, expected: 17 })
        );
    }

    #[test]
    fn validate_rejects_zero_area() {
        let spec = SkeletonSpec::coco17();
        assert_eq!(
            validate_instance(&instance(17, 0.0), &spec),
            Err(SkeletonError::NonPositiveArea(0.0))
        );
    }

    #[test]
    fn flip_map_single_swap() {
        let spec = SkeletonSpec {
            name: "t".into(),
            k: 3,
            keypoint_names: vec!["a".into(), "b".into(), "c".into()],
            flip_pairs: vec![(1, 2)],
            oks_k: vec![0.1; 3],
            skeleton_edges: vec![],
            upper_body: None,
            lower_body: None,
        };
        assert_eq!(flip_index_map(&spec).unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn flip_map_empty_pairs_is_identity() {
        let spec = SkeletonSpec {
            name: "t".into(),
            k: 5,
            keypoint_names: (0..5).map(|i| format!("p{i}")).collect(),
            flip_pairs: vec![],
            oks_k: vec![0.1; 5],
            skeleton_edges: vec![],
            upper_body: None,
            lower_body: None,
        };
        assert_eq!(flip_index_map(&spec).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn coco17_flip_map_is_involution_with_one_fixed_point() {
        let spec = SkeletonSpec::coco17();
        let map = flip_index_map(&spec).unwrap();
        let mut fixed = 0;
        for i in 0..spec.k {
            assert_eq!(map[map[i]], i, "map must be an involution");
            if map[i] == i {
                fixed += 1;
            }
        }
        assert_eq!(fixed, 1, "only the nose is unpaired");
        assert_eq!(map[0], 0);
    }

    #[test]
    fn duplicate_flip_index_rejected() {
        let spec = SkeletonSpec {
            name: "t".into(),
            k: 4,
            keypoint_names: (0..4).map(|i| format!("p{i}")).collect(),
            flip_pairs: vec![(0, 1), (1, 2)],
            oks_k: vec![0.1; 4],
            skeleton_edges: vec![],
            upper_body: None,
            lower_body: None,
        };
        assert_eq!(flip_index_map(&spec), Err(SkeletonError::DuplicateIndexInFlipPairs(1)));
    }

    #[test]
    fn coco17_spec_round_trips_through_json() {
        let spec = SkeletonSpec::coco17();
        let bytes = spec.to_json();
        let back = SkeletonSpec::from_json(&bytes).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn visibility_flags() {
        assert_eq!(Visibility::from_flag(0.0), Ok(Visibility::Unlabeled));
        assert_eq!(Visibility::from_flag(1.0), Ok(Visibility::Occluded));
        assert_eq!(Visibility::from_flag(2.0), Ok(Visibility::Visible));
        assert!(Visibility::from_flag(3.0).is_err());
        assert!(Visibility::Occluded.is_labeled());
        assert!(!Visibility::Unlabeled.is_labeled());
    }
}

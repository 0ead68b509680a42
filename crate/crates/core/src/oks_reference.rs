//! Brute-force reference evaluator, kept deliberately independent of the
//! production evaluator in `oks`.
//!
//! Everything here is written the slow, obvious way: selection scans instead
//! of sorts, per-recall-point maxima instead of a precision envelope, raw
//! result triplets instead of instance conversion. Its purpose is to be an
//! oracle the fast path must agree with on small scenes, and to back the
//! CLI self-test.

use rand::Rng;

use crate::coco::{AnnotationFile, ImageInfo, KeypointResult, ResultFile};
use crate::oks::{evaluate, OksParams};
use crate::rng::rng_for;
use crate::skeleton::{BBox, Keypoint, PersonInstance, Visibility};

/// Evaluation summary of the reference path.
#[derive(Debug, Clone, PartialEq)]
pub struct RefReport {
    pub ap: f64,
    pub ar: f64,
    pub ap_per_threshold: Vec<f64>,
    pub ar_per_threshold: Vec<f64>,
}

/// OKS from raw prediction coordinates; None when the ground truth has no
/// labeled keypoint.
pub fn reference_oks(gt: &PersonInstance, pred_xy: &[(f64, f64)], k_consts: &[f64]) -> Option<f64> {
    let mut vals: Vec<f64> = Vec::new();
    for i in 0..k_consts.len() {
        let g = &gt.keypoints[i];
        if !g.v.is_labeled() {
            continue;
        }
        let dd = (g.x - pred_xy[i].0).powi(2) + (g.y - pred_xy[i].1).powi(2);
        let ki = k_consts[i];
        vals.push((-(dd / (2.0 * gt.area * ki * ki))).exp());
    }
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

struct RefPred {
    score: f64,
    xy: Vec<(f64, f64)>,
}

fn counts_for_eval(gt: &PersonInstance) -> bool {
    !gt.iscrowd && gt.keypoints.iter().any(|kp| kp.v.is_labeled())
}

/// Evaluates the results the slow way. Scenes without a single evaluable
/// ground truth yield an all-zero report.
pub fn evaluate_reference(
    gt_file: &AnnotationFile,
    result_file: &ResultFile,
    params: &OksParams,
) -> RefReport {
    // Image ids in ascending order, by insertion into a sorted list.
    let mut image_ids: Vec<u64> = Vec::new();
    for im in &gt_file.images {
        let mut pos = image_ids.len();
        for (i, &id) in image_ids.iter().enumerate() {
            if id >= im.id {
                pos = i;
                break;
            }
        }
        if image_ids.get(pos) != Some(&im.id) {
            image_ids.insert(pos, im.id);
        }
    }

    let mut total_gts = 0usize;
    for a in &gt_file.annotations {
        if counts_for_eval(a) {
            total_gts += 1;
        }
    }
    let zero = RefReport {
        ap: 0.0,
        ar: 0.0,
        ap_per_threshold: vec![0.0; params.thresholds.len()],
        ar_per_threshold: vec![0.0; params.thresholds.len()],
    };
    if total_gts == 0 {
        return zero;
    }

    let mut ap_per_threshold = Vec::new();
    let mut ar_per_threshold = Vec::new();

    for &threshold in &params.thresholds {
        // (score, is_tp) in image order, preds ranked within each image.
        let mut flagged: Vec<(f64, bool)> = Vec::new();

        for &image_id in &image_ids {
            let gts: Vec<&PersonInstance> = gt_file
                .annotations
                .iter()
                .filter(|a| a.image_id == image_id)
                .collect();
            let mut preds: Vec<RefPred> = Vec::new();
            for r in &result_file.results {
                if r.image_id != image_id {
                    continue;
                }
                let mut xy = Vec::new();
                let mut idx = 0;
                while idx + 1 < r.keypoints.len() {
                    xy.push((r.keypoints[idx], r.keypoints[idx + 1]));
                    idx += 3;
                }
                preds.push(RefPred { score: r.score, xy });
            }

            // Take up to max_detections preds in descending score order via
            // repeated selection; earliest index wins ties.
            let mut taken = vec![false; preds.len()];
            let mut order: Vec<usize> = Vec::new();
            while order.len() < preds.len() && order.len() < params.max_detections {
                let mut best: Option<usize> = None;
                for (i, p) in preds.iter().enumerate() {
                    if taken[i] {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some(b) => p.score > preds[b].score,
                    };
                    if better {
                        best = Some(i);
                    }
                }
                let b = best.expect("loop bound guarantees a remaining pred");
                taken[b] = true;
                order.push(b);
            }

            let mut claimed = vec![false; gts.len()];
            for &pi in &order {
                let mut best_gt: Option<usize> = None;
                let mut best_oks = 0.0;
                for (gi, gt) in gts.iter().enumerate() {
                    if claimed[gi] || !counts_for_eval(gt) {
                        continue;
                    }
                    if let Some(score) = reference_oks(gt, &preds[pi].xy, &params.k) {
                        if best_gt.is_none() || score > best_oks {
                            best_gt = Some(gi);
                            best_oks = score;
                        }
                    }
                }
                if let Some(gi) = best_gt {
                    if best_oks >= threshold {
                        claimed[gi] = true;
                        flagged.push((preds[pi].score, true));
                        continue;
                    }
                }
                flagged.push((preds[pi].score, false));
            }
        }

        // Global descending-score ranking, again by repeated selection so
        // that equal scores keep their accumulation order.
        let mut used = vec![false; flagged.len()];
        let mut ranked: Vec<bool> = Vec::new();
        for _ in 0..flagged.len() {
            let mut best: Option<usize> = None;
            for (i, &(score, _)) in flagged.iter().enumerate() {
                if used[i] {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => score > flagged[b].0,
                };
                if better {
                    best = Some(i);
                }
            }
            let b = best.expect("one unused entry remains per iteration");
            used[b] = true;
            ranked.push(flagged[b].1);
        }

        // Prefix precision/recall.
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        let mut tp = 0usize;
        for (i, &is_tp) in ranked.iter().enumerate() {
            if is_tp {
                tp += 1;
            }
            precision.push(tp as f64 / (i + 1) as f64);
            recall.push(tp as f64 / total_gts as f64);
        }

        // Direct 101-point integration: best precision among all ranks whose
        // recall reaches the sample point.
        let mut acc = 0.0;
        for j in 0..=100 {
            let r = j as f64 / 100.0;
            let mut best_p = 0.0;
            for i in 0..ranked.len() {
                if recall[i] >= r && precision[i] > best_p {
                    best_p = precision[i];
                }
            }
            acc += best_p;
        }
        ap_per_threshold.push(acc / 101.0);
        ar_per_threshold.push(tp as f64 / total_gts as f64);
    }

    let ap = ap_per_threshold.iter().sum::<f64>() / ap_per_threshold.len() as f64;
    let ar = ar_per_threshold.iter().sum::<f64>() / ar_per_threshold.len() as f64;
    RefReport { ap, ar, ap_per_threshold, ar_per_threshold }
}

/// One random evaluation scene: up to 4 ground truths and 4 predictions per
/// image, mixed visibilities, predictions mostly perturbed copies of a ground
/// truth. Per-keypoint falloff constants are drawn too, so the comparison
/// covers the whole parameter surface.
pub fn random_scene(seed: u64, n_images: u64, k: usize) -> (AnnotationFile, ResultFile, OksParams) {
    let mut rng = rng_for(seed, 0);
    let params = OksParams {
        k: (0..k).map(|_| 0.05 + 0.1 * rng.gen::<f64>()).collect(),
        thresholds: OksParams::default_thresholds(),
        max_detections: 20,
    };
    let mut images = Vec::new();
    let mut annotations: Vec<PersonInstance> = Vec::new();
    let mut results = Vec::new();
    for image_id in 1..=n_images {
        images.push(ImageInfo {
            id: image_id,
            file_name: format!("{image_id}.ppm"),
            width: 200,
            height: 200,
        });
        for _ in 0..rng.gen_range(0..=4) {
            let cx = rng.gen_range(20.0..180.0);
            let cy = rng.gen_range(20.0..180.0);
            let side: f64 = rng.gen_range(10.0..60.0);
            let keypoints = (0..k)
                .map(|_| Keypoint {
                    x: cx + rng.gen_range(-0.5..0.5) * side,
                    y: cy + rng.gen_range(-0.5..0.5) * side,
                    v: match rng.gen_range(0..4) {
                        0 => Visibility::Unlabeled,
                        1 => Visibility::Occluded,
                        _ => Visibility::Visible,
                    },
                })
                .collect();
            annotations.push(PersonInstance {
                image_id,
                keypoints,
                bbox: BBox { x: cx - side / 2.0, y: cy - side / 2.0, w: side, h: side },
                area: side * side,
                score: None,
                iscrowd: false,
            });
        }
        for _ in 0..rng.gen_range(0..=4usize) {
            let base: Vec<&PersonInstance> = annotations
                .iter()
                .filter(|a| a.image_id == image_id)
                .collect();
            let keypoints: Vec<f64> = if !base.is_empty() && rng.gen_bool(0.8) {
                let g = base[rng.gen_range(0..base.len())];
                g.keypoints
                    .iter()
                    .flat_map(|kp| {
                        [
                            kp.x + rng.gen_range(-6.0..6.0),
                            kp.y + rng.gen_range(-6.0..6.0),
                            rng.gen_range(0.1..1.0),
                        ]
                    })
                    .collect()
            } else {
                (0..k)
                    .flat_map(|_| {
                        [
                            rng.gen_range(0.0..200.0),
                            rng.gen_range(0.0..200.0),
                            rng.gen_range(0.1..1.0),
                        ]
                    })
                    .collect()
            };
            results.push(KeypointResult {
                image_id,
                keypoints,
                score: rng.gen_range(0.01..1.0),
            });
        }
    }
    (
        AnnotationFile { images, annotations, categories: vec![] },
        ResultFile { results },
        params,
    )
}

/// Outcome of one self-test case.
#[derive(Debug, Clone)]
pub struct SelftestCase {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Cross-checks the production evaluator against this module: the
/// hand-derived half-matched case first, then `n_scenes` random evaluable
/// scenes compared exactly (AP, AR, and both per-threshold vectors).
pub fn selftest(n_scenes: usize, base_seed: u64) -> Vec<SelftestCase> {
    let mut cases = Vec::with_capacity(n_scenes + 1);

    // One ground truth, one prediction at OKS ~0.72: matched at thresholds
    // up to 0.70 and unmatched from 0.75 on, so AP = AR = 0.5 exactly.
    let d = (-2.0 * 0.72f64.ln()).sqrt();
    let gt = AnnotationFile {
        images: vec![ImageInfo { id: 1, file_name: "1.ppm".into(), width: 64, height: 64 }],
        annotations: vec![PersonInstance {
            image_id: 1,
            keypoints: vec![Keypoint { x: 5.0, y: 5.0, v: Visibility::Visible }],
            bbox: BBox { x: 4.0, y: 4.0, w: 2.0, h: 2.0 },
            area: 1.0,
            score: None,
            iscrowd: false,
        }],
        categories: vec![],
    };
    let res = ResultFile {
        results: vec![KeypointResult {
            image_id: 1,
            keypoints: vec![5.0 + d, 5.0, 1.0],
            score: 0.9,
        }],
    };
    let params = OksParams {
        k: vec![1.0],
        thresholds: OksParams::default_thresholds(),
        max_detections: 20,
    };
    match evaluate(&gt, &res, &params) {
        Ok(report) => {
            let passed = report.ap == 0.5 && report.ar == 0.5;
            cases.push(SelftestCase {
                name: "half-matched hand case".into(),
                passed,
                detail: format!("ap {} ar {} (want 0.5 both)", report.ap, report.ar),
            });
        }
        Err(e) => cases.push(SelftestCase {
            name: "half-matched hand case".into(),
            passed: false,
            detail: format!("evaluator error: {e}"),
        }),
    }

    let mut seed = base_seed;
    let mut compared = 0;
    while compared < n_scenes {
        let (gt, res, params) = random_scene(seed, 4, 3);
        seed += 1;
        if !gt.annotations.iter().any(|g| !g.iscrowd && g.keypoints.iter().any(|kp| kp.v.is_labeled())) {
            continue;
        }
        let name = format!("random scene seed {}", seed - 1);
        match evaluate(&gt, &res, &params) {
            Ok(report) => {
                let reference = evaluate_reference(&gt, &res, &params);
                let passed = report.ap == reference.ap
                    && report.ar == reference.ar
                    && report.ap_per_threshold == reference.ap_per_threshold
                    && report.ar_per_threshold == reference.ar_per_threshold;
                cases.push(SelftestCase {
                    name,
                    passed,
                    detail: format!(
                        "ap {} vs {}, ar {} vs {}",
                        report.ap, reference.ap, report.ar, reference.ar
                    ),
                });
            }
            Err(e) => cases.push(SelftestCase {
                name,
                passed: false,
                detail: format!("evaluator error: {e}"),
            }),
        }
        compared += 1;
    }
    cases
}

//! Object Keypoint Similarity and the COCO AP/AR evaluation protocol.
//!
//! OKS between a ground-truth and a predicted instance is
//! `sum_i KS_i [v_i > 0] / sum_i [v_i > 0]` with
//! `KS_i = exp(-d_i^2 / (2 s^2 k_i^2))`, `s = sqrt(gt.area)`. Matching is the
//! reference protocol: predictions in descending score order greedily claim
//! the unclaimed ground truth with the highest OKS at or above the threshold.
//! AP uses 101-point interpolated precision; AR is the matched fraction of
//! eligible ground truths under a per-image detection cap.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::{AnnotationFile, ResultFile};
use crate::skeleton::PersonInstance;

#[derive(Debug, Error)]
pub enum OksError {
    #[error("ground truth has no keypoint with v > 0")]
    NoVisibleKeypoints,
    #[error("instance has {got} keypoints, params expect {expected}")]
    KeypointCountMismatch { got: usize, expected: usize },
    #[error("invalid oks params: {0}")]
    InvalidParams(String),
    #[error("result references image_id {image_id} absent from the ground truth")]
    ImageIdMismatch { image_id: u64 },
    #[error("ground truth contains no evaluable instance")]
    EmptyGroundTruth,
    #[error("result {index} is invalid: {source}")]
    BadResult { index: usize, source: crate::skeleton::SkeletonError },
}

/// Per-keypoint constants and the threshold ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksParams {
    /// K per-keypoint falloff constants (twice the COCO sigmas).
    pub k: Vec<f64>,
    /// OKS thresholds, strictly increasing, each in (0, 1].
    #[serde(default = "OksParams::default_thresholds")]
    pub thresholds: Vec<f64>,
    /// Per-image cap on scored predictions.
    #[serde(default = "default_max_detections")]
    pub max_detections: usize,
}

fn default_max_detections() -> usize {
    20
}

impl OksParams {
    /// The standard ladder 0.50, 0.55, ..., 0.95.
    pub fn default_thresholds() -> Vec<f64> {
        (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
    }

    pub fn from_spec(spec: &crate::skeleton::SkeletonSpec) -> Self {
        Self {
            k: spec.oks_k.clone(),
            thresholds: Self::default_thresholds(),
            max_detections: 20,
        }
    }

    pub fn validate(&self) -> Result<(), OksError> {
        if self.k.is_empty() || self.k.iter().any(|&v| !(v > 0.0)) {
            return Err(OksError::InvalidParams("k constants must be positive".into()));
        }
        if self.thresholds.is_empty() {
            return Err(OksError::InvalidParams("empty threshold list".into()));
        }
        for pair in self.thresholds.windows(2) {
            if pair[0] >= pair[1] {
                return Err(OksError::InvalidParams(format!(
                    "thresholds not strictly increasing at {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        if self
            .thresholds
            .iter()
            .any(|&t| !(t > 0.0 && t <= 1.0))
        {
            return Err(OksError::InvalidParams("thresholds must lie in (0, 1]".into()));
        }
        if self.max_detections == 0 {
            return Err(OksError::InvalidParams("max_detections must be positive".into()));
        }
        Ok(())
    }
}

/// Whether an instance counts for evaluation (crowd regions and instances
/// without a single labeled keypoint are skipped entirely).
fn eligible(gt: &PersonInstance) -> bool {
    !gt.iscrowd && gt.num_labeled() > 0
}

/// OKS between one ground truth and one prediction.
pub fn oks(
    gt: &PersonInstance,
    pred: &PersonInstance,
    params: &OksParams,
) -> Result<f64, OksError> {
    let k = params.k.len();
    if gt.keypoints.len() != k {
        return Err(OksError::KeypointCountMismatch { got: gt.keypoints.len(), expected: k });
    }
    if pred.keypoints.len() != k {
        return Err(OksError::KeypointCountMismatch { got: pred.keypoints.len(), expected: k });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..k {
        let g = &gt.keypoints[i];
        if !g.v.is_labeled() {
            continue;
        }
        let p = &pred.keypoints[i];
        let dx = p.x - g.x;
        let dy = p.y - g.y;
        let d_sq = dx * dx + dy * dy;
        let ki = params.k[i];
        sum += (-d_sq / (2.0 * gt.area * ki * ki)).exp();
        count += 1;
    }
    if count == 0 {
        return Err(OksError::NoVisibleKeypoints);
    }
    Ok(sum / count as f64)
}

/// One prediction's fate in a single image at a single threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredMatch {
    /// Index into the `preds` slice passed to [`match_image`].
    pub pred_index: usize,
    /// Claimed ground-truth index, or None for a false positive.
    pub gt_index: Option<usize>,
    /// OKS against the claimed ground truth (0 when unmatched).
    pub oks: f64,
}

/// Greedy score-ordered matching within one image.
///
/// Predictions are visited in descending score order (ties broken by slice
/// index); each claims the still-unclaimed eligible ground truth with the
/// highest OKS, if that OKS reaches the threshold. Ineligible ground truths
/// (crowd, nothing labeled) can never be claimed. The returned entries are in
/// visit order and reference the original slice indices.
pub fn match_image(
    gts: &[&PersonInstance],
    preds: &[&PersonInstance],
    threshold: f64,
    params: &OksParams,
) -> Vec<PredMatch> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = preds[a].score.unwrap_or(0.0);
        let sb = preds[b].score.unwrap_or(0.0);
        sb.total_cmp(&sa).then(a.cmp(&b))
    });

    let mut claimed = vec![false; gts.len()];
    let mut out = Vec::with_capacity(preds.len());
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if claimed[gi] || !eligible(gt) {
                continue;
            }
            let score = oks(gt, preds[pi], params)
                .expect("eligible ground truth has labeled keypoints");
            let better = match best {
                None => true,
                Some((_, b)) => score > b,
            };
            if better {
                best = Some((gi, score));
            }
        }
        match best {
            Some((gi, score)) if score >= threshold => {
                claimed[gi] = true;
                out.push(PredMatch { pred_index: pi, gt_index: Some(gi), oks: score });
            }
            _ => out.push(PredMatch { pred_index: pi, gt_index: None, oks: 0.0 }),
        }
    }
    out
}

/// Diagnostic record of one prediction at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchRecord {
    pub threshold: f64,
    pub image_id: u64,
    /// Rank of the prediction within its image after sorting and capping.
    pub pred_index: usize,
    pub score: f64,
    pub gt_index: Option<usize>,
    pub oks: f64,
}

/// Dataset-level evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ar: f64,
    pub ap_per_threshold: Vec<f64>,
    pub ar_per_threshold: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Recall denominator: ground truths counted by the matcher.
    pub eligible_gts: usize,
    pub per_image_matches: Vec<MatchRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Aligned plain-text table: the AP / AP50 / AP75 / AR summary row
    /// followed by the full per-threshold breakdown.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let find = |target: f64| {
            self.thresholds
                .iter()
                .position(|&t| (t - target).abs() < 1e-9)
        };
        s.push_str("metric  value\n");
        s.push_str(&format!("AP      {:.4}\n", self.ap));
        if let Some(i) = find(0.50) {
            s.push_str(&format!("AP50    {:.4}\n", self.ap_per_threshold[i]));
        }
        if let Some(i) = find(0.75) {
            s.push_str(&format!("AP75    {:.4}\n", self.ap_per_threshold[i]));
        }
        s.push_str(&format!("AR      {:.4}\n", self.ar));
        s.push('\n');
        s.push_str("threshold  ap      ar\n");
        for (i, &t) in self.thresholds.iter().enumerate() {
            s.push_str(&format!(
                "{:<9.2}  {:.4}  {:.4}\n",
                t, self.ap_per_threshold[i], self.ar_per_threshold[i]
            ));
        }
        s
    }
}

/// 101-point interpolated average precision from a ranked TP/FP sequence.
fn interpolated_ap(tp_flags: &[bool], total_gts: usize) -> f64 {
    let n = tp_flags.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &is_tp in tp_flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / total_gts as f64);
    }
    // Precision envelope: best precision at this recall or beyond.
    for i in (0..n.saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        let p = recall
            .iter()
            .position(|&rec| rec >= r)
            .map(|idx| precision[idx])
            .unwrap_or(0.0);
        sum += p;
    }
    sum / 101.0
}

/// Full COCO-protocol evaluation of a results file against ground truth.
pub fn evaluate(
    gt_file: &AnnotationFile,
    result_file: &ResultFile,
    params: &OksParams,
) -> Result<EvalReport, OksError> {
    params.validate()?;
    let k = params.k.len();

    let image_ids: BTreeSet<u64> = gt_file.images.iter().map(|im| im.id).collect();
    let gts_by_image = gt_file.by_image();

    let mut preds_by_image: BTreeMap<u64, Vec<PersonInstance>> = BTreeMap::new();
    for (index, r) in result_file.results.iter().enumerate() {
        if !image_ids.contains(&r.image_id) {
            return Err(OksError::ImageIdMismatch { image_id: r.image_id });
        }
        let inst = r
            .to_instance(k)
            .map_err(|source| OksError::BadResult { index, source })?;
        preds_by_image.entry(r.image_id).or_default().push(inst);
    }
    // Sort by descending score (stable) and cap per image.
    for preds in preds_by_image.values_mut() {
        preds.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
        preds.truncate(params.max_detections);
    }

    let total_gts: usize = gt_file.annotations.iter().filter(|g| eligible(g)).count();
    if total_gts == 0 {
        return Err(OksError::EmptyGroundTruth);
    }

    let mut ap_per_threshold = Vec::with_capacity(params.thresholds.len());
    let mut ar_per_threshold = Vec::with_capacity(params.thresholds.len());
    let mut per_image_matches = Vec::new();

    for &threshold in &params.thresholds {
        // (score, is_tp) per counted prediction, accumulated per image in
        // ascending image id, then ranked globally by score (stable).
        let mut entries: Vec<(f64, bool)> = Vec::new();
        for &image_id in &image_ids {
            let empty_gts = Vec::new();
            let gts = gts_by_image.get(&image_id).unwrap_or(&empty_gts);
            let Some(preds) = preds_by_image.get(&image_id) else { continue };
            let pred_refs: Vec<&PersonInstance> = preds.iter().collect();
            let matches = match_image(gts, &pred_refs, threshold, params);
            for m in &matches {
                let score = preds[m.pred_index].score.unwrap_or(0.0);
                entries.push((score, m.gt_index.is_some()));
                per_image_matches.push(MatchRecord {
                    threshold,
                    image_id,
                    pred_index: m.pred_index,
                    score,
                    gt_index: m.gt_index,
                    oks: m.oks,
                });
            }
        }
        entries.sort_by(|a, b| b.0.total_cmp(&a.0));
        let tp_flags: Vec<bool> = entries.iter().map(|&(_, tp)| tp).collect();
        let matched = tp_flags.iter().filter(|&&t| t).count();
        ap_per_threshold.push(interpolated_ap(&tp_flags, total_gts));
        ar_per_threshold.push(matched as f64 / total_gts as f64);
    }

    let ap = ap_per_threshold.iter().sum::<f64>() / ap_per_threshold.len() as f64;
    let ar = ar_per_threshold.iter().sum::<f64>() / ar_per_threshold.len() as f64;
    Ok(EvalReport {
        ap,
        ar,
        ap_per_threshold,
        ar_per_threshold,
        thresholds: params.thresholds.clone(),
        eligible_gts: total_gts,
        per_image_matches,
    })
}

/// Standalone SVG of the raw precision-recall staircase, one polyline per
/// OKS threshold, built from the report's match records.
pub fn pr_curves_svg(report: &EvalReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const ML: f64 = 56.0;
    const MR: f64 = 150.0;
    const MT: f64 = 24.0;
    const MB: f64 = 48.0;
    let pw = W - ML - MR;
    let ph = H - MT - MB;
    let px = |recall: f64| ML + recall * pw;
    let py = |precision: f64| MT + (1.0 - precision) * ph;

    const COLORS: [&str; 10] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
        "#7f7f7f", "#bcbd22", "#17becf",
    ];

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (x, y) = (px(f), py(f));
        s.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{MT}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            MT + ph
        ));
        s.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            ML + pw
        ));
        s.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{f:.1}</text>\n",
            MT + ph + 18.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{f:.1}</text>\n",
            ML - 8.0,
            y + 4.0
        ));
    }
    s.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">recall</text>\n",
        ML + pw / 2.0,
        H - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">precision</text>\n",
        MT + ph / 2.0,
        MT + ph / 2.0
    ));

    for (ti, &threshold) in report.thresholds.iter().enumerate() {
        let color = COLORS[ti % COLORS.len()];
        let mut records: Vec<&MatchRecord> = report
            .per_image_matches
            .iter()
            .filter(|m| m.threshold == threshold)
            .collect();
        records.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.image_id.cmp(&b.image_id))
                .then(a.pred_index.cmp(&b.pred_index))
        });
        let mut tp = 0usize;
        let mut points = vec![(px(0.0), py(1.0))];
        for (i, m) in records.iter().enumerate() {
            if m.gt_index.is_some() {
                tp += 1;
            }
            let recall = tp as f64 / report.eligible_gts.max(1) as f64;
            let precision = tp as f64 / (i + 1) as f64;
            points.push((px(recall), py(precision)));
        }
        let path: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        if let Some((x, y)) = points.last() {
            s.push_str(&format!(
                "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"2.5\" fill=\"{color}\"/>\n"
            ));
        }
        let ly = MT + 16.0 * ti as f64 + 10.0;
        s.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            ML + pw + 12.0,
            ly - 9.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\">OKS {threshold:.2} ap {:.2}</text>\n",
            ML + pw + 26.0,
            report.ap_per_threshold[ti]
        ));
    }
    s.push_str("</svg>\n");
    s
}

use super::{GridSpec, GroundTruth, HeadMaps};

#[derive(Clone, Debug)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// IoU needed for a detection to match a ground-truth box.
    pub match_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.05,
            nms_iou: 0.6,
            max_detections: 100,
            match_iou: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// `(x0, y0, x1, y1)` in image pixels.
    pub bbox: [f64; 4],
    pub score: f64,
    pub class: usize,
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Per-class greedy suppression. Output is sorted by descending score.
pub fn nms(mut dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    sort_by_score(&mut dets);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept
            .iter()
            .all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= threshold)
        {
            kept.push(d);
        }
    }
    kept
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scores every (position, class) pair by `sigmoid(cls) * sigmoid(ctr)`,
/// keeps those above the threshold, suppresses overlaps and returns the top
/// detections.
pub fn decode(maps: &HeadMaps, grid: &GridSpec, cfg: &DecodeConfig) -> Vec<Detection> {
    let n = grid.positions();
    let classes = maps.cls_logits.len() / n.max(1);
    let (h, w) = (grid.height, grid.width);
    let mut dets = Vec::new();
    for i in 0..n {
        let ctr = sigmoid(maps.centerness.data()[i]);
        let (y, x) = ((i / w) % h, i % w);
        let (cy, cx) = grid.center(y, x);
        let d = &maps.box_deltas.data()[i * 4..i * 4 + 4];
        let s = grid.stride;
        let bbox = [cx - d[0] * s, cy - d[1] * s, cx + d[2] * s, cy + d[3] * s];
        for c in 0..classes {
            let score = sigmoid(maps.cls_logits.data()[i * classes + c]) * ctr;
            if score > cfg.score_threshold {
                dets.push(Detection { bbox, score, class: c });
            }
        }
    }
    let mut kept = nms(dets, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

/// All-point interpolated average precision for one class, given
/// `(score, is_true_positive)` pairs and the number of ground-truth boxes.
fn class_ap(mut ranked: Vec<(f64, bool)>, num_gt: usize) -> f64 {
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (k, &(_, hit)) in ranked.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope from the right, then area under the step curve.
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Mean over classes present in the ground truth of the per-class AP.
/// Detections are matched greedily in score order to the best still-unmatched
/// box of the same class in the same scene. With no ground truth at all the
/// result is 1 if there are also no detections and 0 otherwise.
pub fn average_precision(
    detections: &[Vec<Detection>],
    gts: &[GroundTruth],
    num_classes: usize,
    match_iou: f64,
) -> f64 {
    let mut per_class = Vec::new();
    for c in 0..num_classes {
        let num_gt: usize = gts
            .iter()
            .map(|g| g.classes.iter().filter(|&&k| k == c).count())
            .sum();
        if num_gt == 0 {
            continue;
        }
        let mut ranked = Vec::new();
        for (dets, gt) in detections.iter().zip(gts) {
            let mut mine: Vec<Detection> = dets.iter().filter(|d| d.class == c).copied().collect();
            sort_by_score(&mut mine);
            let mut matched = vec![false; gt.len()];
            for d in mine {
                let best = gt
                    .boxes
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| gt.classes[j] == c && !matched[j])
                    .map(|(j, b)| (j, iou(&d.bbox, b)))
                    .filter(|&(_, v)| v >= match_iou)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((j, _)) = best {
                    matched[j] = true;
                }
                ranked.push((d.score, best.is_some()));
            }
        }
        per_class.push(class_ap(ranked, num_gt));
    }
    if per_class.is_empty() {
        return if detections.iter().all(Vec::is_empty) { 1.0 } else { 0.0 };
    }
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

/// Decodes every scene and scores the detections against its ground truth.
pub fn decode_and_eval(
    maps: &[HeadMaps],
    gts: &[GroundTruth],
    grid: &GridSpec,
    num_classes: usize,
    cfg: &DecodeConfig,
) -> f64 {
    let dets: Vec<Vec<Detection>> = maps.iter().map(|m| decode(m, grid, cfg)).collect();
    average_precision(&dets, gts, num_classes, cfg.match_iou)
}

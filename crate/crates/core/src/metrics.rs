//! Explanation fidelity and weakly supervised localization metrics.
//!
//! Conventions:
//! - A heatmap pixel is foreground at threshold `τ` when its value is `>= τ`
//!   and strictly positive, so an all-zero map never yields a box.
//! - Components are 4-connected; each image is scored by the best IoU over
//!   all of its component boxes.
//! - The MaxBoxAccV2 sweep uses `τ_i = i / 1000` for `i = 0..=1000`.
//! - PxAP integrates precision over recall increments (step rule) at every
//!   distinct score.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GT_KNOWN_THRESHOLD: f64 = 0.2;
pub const GT_KNOWN_IOU: f64 = 0.5;
pub const MBA_IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
pub const SWEEP_STEPS: usize = 1000;
/// Images whose full-image score is at or below this are left out of Average Drop.
pub const MIN_FULL_SCORE: f64 = 1e-12;

/// Axis-aligned pixel box, inclusive-exclusive: `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Domain(format!("degenerate box ({x0},{y0},{x1},{y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

fn dims(map: &Tensor<f32>) -> Result<(usize, usize)> {
    match map.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::shape("heatmap", format!("expected [H,W], got {s:?}"))),
    }
}

/// `E = M ∘ x`, applied to every channel of a `[C, H, W]` image.
pub fn explanation_image(heatmap: &Tensor<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = dims(heatmap)?;
    let s = image.shape();
    if s.len() != 3 || s[1] != h || s[2] != w {
        return Err(Error::shape(
            "explanation_image",
            format!("heatmap [{h},{w}] vs image {s:?}"),
        ));
    }
    let m = heatmap.data();
    let data = image
        .data()
        .chunks_exact(h * w)
        .flat_map(|plane| plane.iter().zip(m).map(|(x, v)| x * v))
        .collect();
    Tensor::new(s, data)
}

/// Class score on the full image (`Y`) and on its explanation image (`O`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidelityRecord {
    pub full_score: f64,
    pub explanation_score: f64,
}

impl FidelityRecord {
    /// `max(0, Y - O) / Y`, or `None` when `Y` is too small to divide by.
    pub fn drop_term(&self) -> Option<f64> {
        (self.full_score > MIN_FULL_SCORE)
            .then(|| (self.full_score - self.explanation_score).max(0.0) / self.full_score)
    }

    pub fn increased(&self) -> bool {
        self.explanation_score > self.full_score
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AverageDrop {
    pub percent: f64,
    pub included: usize,
    pub excluded: usize,
}

pub fn average_drop(records: &[FidelityRecord]) -> AverageDrop {
    let terms: Vec<f64> = records.iter().filter_map(|r| r.drop_term()).collect();
    let percent = if terms.is_empty() {
        0.0
    } else {
        100.0 * terms.iter().sum::<f64>() / terms.len() as f64
    };
    AverageDrop {
        percent,
        included: terms.len(),
        excluded: records.len() - terms.len(),
    }
}

pub fn increase_in_confidence(records: &[FidelityRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records.iter().filter(|r| r.increased()).count();
    100.0 * hits as f64 / records.len() as f64
}

fn foreground(map: &Tensor<f32>, tau: f64) -> Vec<bool> {
    map.data().iter().map(|&v| v > 0.0 && v as f64 >= tau).collect()
}

/// Tight boxes of the 4-connected components of a binary mask, largest box first.
pub fn mask_to_boxes(mask: &[bool], height: usize, width: usize) -> Vec<BBox> {
    let mut seen = vec![false; mask.len()];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (width, height, 0, 0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / width, p % width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        boxes.push(BBox { x0, y0, x1, y1 });
    }
    boxes.sort_by_key(|b| std::cmp::Reverse(b.area()));
    boxes
}

pub fn heatmap_to_boxes(heatmap: &Tensor<f32>, tau: f64) -> Result<Vec<BBox>> {
    let (h, w) = dims(heatmap)?;
    Ok(mask_to_boxes(&foreground(heatmap, tau), h, w))
}

/// Best IoU between any component box at threshold `tau` and `gt` (0 when there are no boxes).
pub fn best_iou(heatmap: &Tensor<f32>, tau: f64, gt: &BBox) -> Result<f64> {
    Ok(heatmap_to_boxes(heatmap, tau)?
        .iter()
        .map(|b| iou(b, gt))
        .fold(0.0, f64::max))
}

pub fn sweep_threshold(i: usize) -> f64 {
    i as f64 / SWEEP_STEPS as f64
}

/// Best IoU at every sweep threshold. Foreground sets are nested in `τ`, so
/// thresholds selecting the same pixel count share one labeling pass.
pub fn iou_curve(heatmap: &Tensor<f32>, gt: &BBox) -> Result<Vec<f64>> {
    let (h, w) = dims(heatmap)?;
    let mut sorted: Vec<f64> = heatmap
        .data()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v as f64)
        .collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut curve = Vec::with_capacity(SWEEP_STEPS + 1);
    let mut cache: Option<(usize, f64)> = None;
    for i in 0..=SWEEP_STEPS {
        let tau = sweep_threshold(i);
        let count = sorted.len() - sorted.partition_point(|&v| v < tau);
        let value = match cache {
            Some((c, v)) if c == count => v,
            _ => {
                let v = mask_to_boxes(&foreground(heatmap, tau), h, w)
                    .iter()
                    .map(|b| iou(b, gt))
                    .fold(0.0, f64::max);
                cache = Some((count, v));
                v
            }
        };
        curve.push(value);
    }
    Ok(curve)
}

/// Per-image localization outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct WsolRecord {
    pub correct: bool,
    /// Best IoU at the fixed GT-known threshold.
    pub gt_known_iou: f64,
    /// Best IoU at each sweep threshold.
    pub iou_curve: Vec<f64>,
}

impl WsolRecord {
    pub fn new(heatmap: &Tensor<f32>, gt: &BBox, correct: bool) -> Result<Self> {
        let iou_curve = iou_curve(heatmap, gt)?;
        Ok(Self {
            correct,
            gt_known_iou: best_iou(heatmap, GT_KNOWN_THRESHOLD, gt)?,
            iou_curve,
        })
    }

    pub fn gt_known_success(&self) -> bool {
        self.gt_known_iou >= GT_KNOWN_IOU
    }

    pub fn top1_success(&self) -> bool {
        self.correct && self.gt_known_success()
    }
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

pub fn gt_known_from_records(records: &[WsolRecord]) -> f64 {
    percent(
        records.iter().filter(|r| r.gt_known_success()).count(),
        records.len(),
    )
}

pub fn top1_loc_from_records(records: &[WsolRecord]) -> f64 {
    percent(records.iter().filter(|r| r.top1_success()).count(), records.len())
}

pub fn top1_cls_from_records(records: &[WsolRecord]) -> f64 {
    percent(records.iter().filter(|r| r.correct).count(), records.len())
}

pub fn max_box_acc_v2_from_records(records: &[WsolRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for delta in MBA_IOU_THRESHOLDS {
        let best = (0..=SWEEP_STEPS)
            .map(|i| records.iter().filter(|r| r.iou_curve[i] >= delta).count())
            .max()
            .unwrap_or(0);
        total += best as f64 / records.len() as f64;
    }
    100.0 * total / MBA_IOU_THRESHOLDS.len() as f64
}

fn check_lengths(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(what, format!("{a} ground truths vs {b} heatmaps")));
    }
    Ok(())
}

pub fn gt_known_loc(boxes: &[BBox], heatmaps: &[Tensor<f32>]) -> Result<f64> {
    check_lengths("gt_known_loc", boxes.len(), heatmaps.len())?;
    let mut hits = 0;
    for (gt, map) in boxes.iter().zip(heatmaps) {
        if best_iou(map, GT_KNOWN_THRESHOLD, gt)? >= GT_KNOWN_IOU {
            hits += 1;
        }
    }
    Ok(percent(hits, boxes.len()))
}

pub fn top1_loc(
    boxes: &[BBox],
    labels: &[usize],
    predictions: &[usize],
    heatmaps: &[Tensor<f32>],
) -> Result<f64> {
    check_lengths("top1_loc", boxes.len(), heatmaps.len())?;
    check_lengths("top1_loc", labels.len(), predictions.len())?;
    check_lengths("top1_loc", boxes.len(), labels.len())?;
    let mut hits = 0;
    for i in 0..boxes.len() {
        if labels[i] == predictions[i]
            && best_iou(&heatmaps[i], GT_KNOWN_THRESHOLD, &boxes[i])? >= GT_KNOWN_IOU
        {
            hits += 1;
        }
    }
    Ok(percent(hits, boxes.len()))
}

pub fn max_box_acc_v2(boxes: &[BBox], heatmaps: &[Tensor<f32>]) -> Result<f64> {
    check_lengths("max_box_acc_v2", boxes.len(), heatmaps.len())?;
    let records = boxes
        .iter()
        .zip(heatmaps)
        .map(|(gt, map)| WsolRecord::new(map, gt, true))
        .collect::<Result<Vec<_>>>()?;
    Ok(max_box_acc_v2_from_records(&records))
}

/// Pixel-level average precision over all pixels of the split, ×100.
pub fn pxap(masks: &[Vec<bool>], heatmaps: &[Tensor<f32>]) -> Result<f64> {
    check_lengths("pxap", masks.len(), heatmaps.len())?;
    let mut pixels: Vec<(f32, bool)> = Vec::new();
    for (mask, map) in masks.iter().zip(heatmaps) {
        if mask.len() != map.len() {
            return Err(Error::shape(
                "pxap",
                format!("mask of {} pixels vs heatmap of {}", mask.len(), map.len()),
            ));
        }
        pixels.extend(map.data().iter().copied().zip(mask.iter().copied()));
    }
    let positives = pixels.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(Error::Domain("PxAP is undefined without positive pixels".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < pixels.len() {
        let score = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == score {
            if pixels[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(100.0 * ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indicator(h: usize, w: usize, b: BBox) -> Tensor<f32> {
        Tensor::from_fn([h, w], |i| {
            let (y, x) = (i / w, i % w);
            (x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1) as u8 as f32
        })
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0, 0, 10, 10).unwrap();
        let b = BBox::new(5, 5, 15, 15).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20, 20, 30, 30).unwrap()), 0.0);
        assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
        assert!(BBox::new(3, 0, 3, 5).is_err());
    }

    #[test]
    fn average_drop_examples() {
        let r = |y, o| FidelityRecord {
            full_score: y,
            explanation_score: o,
        };
        assert!((average_drop(&[r(0.8, 0.6)]).percent - 25.0).abs() < 1e-9);
        assert_eq!(average_drop(&[r(0.5, 0.7), r(0.3, 0.3)]).percent, 0.0);
        let half: Vec<_> = [0.9, 0.4, 0.2].iter().map(|&y| r(y, y / 2.0)).collect();
        assert!((average_drop(&half).percent - 50.0).abs() < 1e-9);
        let skipped = average_drop(&[r(0.0, 0.1), r(0.8, 0.6)]);
        assert_eq!((skipped.included, skipped.excluded), (1, 1));
    }

    #[test]
    fn increase_in_confidence_examples() {
        let r = |y, o| FidelityRecord {
            full_score: y,
            explanation_score: o,
        };
        assert_eq!(increase_in_confidence(&[r(0.1, 0.2), r(0.3, 0.5)]), 100.0);
        assert_eq!(increase_in_confidence(&[r(0.3, 0.2), r(0.3, 0.1)]), 0.0);
        let mixed = [r(0.1, 0.2), r(0.3, 0.1), r(0.3, 0.3), r(0.9, 0.1)];
        assert_eq!(increase_in_confidence(&mixed), 25.0);
    }

    #[test]
    fn rectangle_yields_itself_at_any_positive_threshold() {
        let b = BBox::new(2, 3, 7, 6).unwrap();
        let map = indicator(8, 8, b);
        for tau in [0.0, 0.001, 0.2, 0.5, 1.0] {
            assert_eq!(heatmap_to_boxes(&map, tau).unwrap(), vec![b]);
        }
    }

    #[test]
    fn two_blobs_two_boxes_largest_first() {
        let mut map = indicator(8, 8, BBox::new(0, 0, 2, 2).unwrap());
        let big = indicator(8, 8, BBox::new(4, 4, 8, 7).unwrap());
        map.data_mut()
            .iter_mut()
            .zip(big.data())
            .for_each(|(a, b)| *a += b);
        let boxes = heatmap_to_boxes(&map, 0.5).unwrap();
        assert_eq!(
            boxes,
            vec![BBox::new(4, 4, 8, 7).unwrap(), BBox::new(0, 0, 2, 2).unwrap()]
        );
    }

    #[test]
    fn diagonal_pixels_are_separate_components() {
        let map = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(heatmap_to_boxes(&map, 0.5).unwrap().len(), 2);
    }

    #[test]
    fn localization_extremes() {
        let boxes = vec![BBox::new(1, 1, 5, 6).unwrap(), BBox::new(0, 2, 8, 8).unwrap()];
        let perfect: Vec<_> = boxes.iter().map(|b| indicator(8, 8, *b)).collect();
        let zeros = vec![Tensor::zeros([8, 8]); 2];
        assert_eq!(gt_known_loc(&boxes, &perfect).unwrap(), 100.0);
        assert_eq!(gt_known_loc(&boxes, &zeros).unwrap(), 0.0);
        assert_eq!(max_box_acc_v2(&boxes, &perfect).unwrap(), 100.0);
        assert_eq!(max_box_acc_v2(&boxes, &zeros).unwrap(), 0.0);
        assert_eq!(top1_loc(&boxes, &[0, 1], &[0, 1], &perfect).unwrap(), 100.0);
        assert_eq!(top1_loc(&boxes, &[0, 1], &[1, 0], &perfect).unwrap(), 0.0);
    }

    #[test]
    fn gt_known_hand_counted() {
        let gt = BBox::new(0, 0, 4, 4).unwrap();
        let boxes = vec![gt; 4];
        let maps = vec![
            // exact
            indicator(8, 8, gt),
            // half overlap: IoU 8/24
            indicator(8, 8, BBox::new(2, 0, 6, 4).unwrap()),
            // larger box 4x5 containing gt: IoU 16/20
            indicator(8, 8, BBox::new(0, 0, 4, 5).unwrap()),
            // below threshold everywhere
            Tensor::full([8, 8], 0.1),
        ];
        assert_eq!(gt_known_loc(&boxes, &maps).unwrap(), 50.0);
    }

    #[test]
    fn pxap_extremes() {
        let mask: Vec<bool> = (0..64).map(|i| i % 8 < 3 && i / 8 < 5).collect();
        let positives = mask.iter().filter(|&&m| m).count() as f64;
        let perfect = Tensor::from_fn([8, 8], |i| mask[i] as u8 as f32);
        let worst = Tensor::from_fn([8, 8], |i| 1.0 - mask[i] as u8 as f32);
        assert!((pxap(std::slice::from_ref(&mask), &[perfect]).unwrap() - 100.0).abs() < 1e-12);
        let expected = 100.0 * positives / 64.0;
        assert!((pxap(std::slice::from_ref(&mask), &[worst]).unwrap() - expected).abs() < 1e-9);
        assert!(pxap(&[vec![false; 64]], &[Tensor::zeros([8, 8])]).is_err());
    }

    #[test]
    fn explanation_image_extremes() {
        let img = Tensor::from_fn([3, 2, 2], |i| i as f32 / 12.0);
        assert_eq!(explanation_image(&Tensor::full([2, 2], 1.0), &img).unwrap(), img);
        let zero = explanation_image(&Tensor::zeros([2, 2]), &img).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(explanation_image(&Tensor::zeros([3, 2]), &img).is_err());
    }
}

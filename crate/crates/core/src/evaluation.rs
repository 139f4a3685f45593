//! Average-precision evaluation over IoU thresholds 0.50:0.05:0.95 with
//! greedy score-ordered matching and 101-point PR interpolation.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::inference::Detection;
use crate::scalar::Real;

pub const NUM_THRESHOLDS: usize = 10;
pub const GRID_POINTS: usize = 101;

/// 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds<T: Real>() -> Vec<T> {
    (0..NUM_THRESHOLDS).map(|i| T::c(0.5) + T::c(0.05) * T::from_count(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult<T: Real = f64> {
    /// Mean of `ap_at` over the 10 thresholds, computed as their sum / 10.
    pub ap: T,
    /// (threshold, AP) in ascending threshold order.
    pub ap_at: Vec<(T, T)>,
    /// Mean AP over thresholds per class, ascending class id. Classes
    /// without any ground truth are omitted.
    pub class_ap: Vec<(usize, T)>,
    /// (threshold, counts summed over every class).
    pub counts: Vec<(T, Counts)>,
}

/// Per-class detections sorted for greedy matching, with gts grouped by image.
struct ClassData<T: Real> {
    /// (image, input order, score, box), sorted by score descending with
    /// ties broken by image id then input order.
    dets: Vec<(usize, usize, T, BBox<T>)>,
    gts: Vec<Vec<BBox<T>>>,
    num_gt: usize,
}

fn class_data<T: Real>(
    dets: &[Vec<Detection<T>>],
    gts: &[Vec<(BBox<T>, usize)>],
    class_id: usize,
) -> ClassData<T> {
    let mut d: Vec<(usize, usize, T, BBox<T>)> = Vec::new();
    for (img, per_image) in dets.iter().enumerate() {
        for (ord, det) in per_image.iter().enumerate() {
            if det.class_id == class_id {
                d.push((img, ord, det.score, det.bbox.clone()));
            }
        }
    }
    d.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("scores are finite")
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let g: Vec<Vec<BBox<T>>> = gts
        .iter()
        .map(|per_image| {
            per_image.iter().filter(|(_, c)| *c == class_id).map(|(b, _)| b.clone()).collect()
        })
        .collect();
    let num_gt = g.iter().map(Vec::len).sum();
    ClassData { dets: d, gts: g, num_gt }
}

/// Greedy matching at one threshold: per sorted detection, the index of the
/// claimed gt within its image's same-class list, or None for a false
/// positive. IoU ties between unmatched gts go to the lower gt index.
fn match_class_at<T: Real>(data: &ClassData<T>, threshold: T) -> Vec<Option<usize>> {
    let mut matched: Vec<Vec<bool>> = data.gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(data.dets.len());
    for (img, _, _, bbox) in &data.dets {
        let mut best: Option<(usize, T)> = None;
        for (j, gt) in data.gts[*img].iter().enumerate() {
            if matched[*img][j] {
                continue;
            }
            let iou = iou_unchecked(gt, bbox);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= threshold => {
                matched[*img][j] = true;
                out.push(Some(j));
            }
            _ => out.push(None),
        }
    }
    out
}

/// 101-point interpolated AP from the true-positive flags of score-ordered
/// detections. None when the class has no ground truth.
fn interpolated_ap<T: Real>(tp_flags: &[bool], num_gt: usize) -> Option<T> {
    if num_gt == 0 {
        return None;
    }
    let n = tp_flags.len();
    let mut recalls = Vec::with_capacity(n);
    let mut precisions = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &flag in tp_flags {
        if flag {
            tp += 1;
        } else {
            fp += 1;
        }
        recalls.push(T::from_count(tp) / T::from_count(num_gt));
        precisions.push(T::from_count(tp) / T::from_count(tp + fp));
    }
    // precision envelope: running max from the tail
    let mut envelope = precisions;
    for k in (0..n.saturating_sub(1)).rev() {
        if envelope[k + 1] > envelope[k] {
            envelope[k] = envelope[k + 1];
        }
    }
    let mut sum = T::zero();
    let mut k = 0usize;
    for i in 0..GRID_POINTS {
        let r = T::from_count(i) / T::from_count(GRID_POINTS - 1);
        while k < n && recalls[k] < r {
            k += 1;
        }
        if k < n {
            sum += envelope[k];
        }
    }
    Some(sum / T::from_count(GRID_POINTS))
}

fn validate_inputs<T: Real>(
    dets: &[Vec<Detection<T>>],
    gts: &[Vec<(BBox<T>, usize)>],
    num_classes: usize,
) -> Result<()> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(format!(
            "detections cover {} images, ground truth covers {}",
            dets.len(),
            gts.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::invalid("num_classes must be positive"));
    }
    for per_image in dets {
        for d in per_image {
            if d.class_id == 0 || d.class_id > num_classes {
                return Err(Error::invalid(format!(
                    "detection class {} outside 1..={num_classes}",
                    d.class_id
                )));
            }
        }
    }
    for per_image in gts {
        for (b, c) in per_image {
            if *c == 0 || *c > num_classes {
                return Err(Error::invalid(format!("gt class {c} outside 1..={num_classes}")));
            }
            if !b.is_valid() {
                return Err(Error::invalid("ground-truth box has non-positive extent"));
            }
        }
    }
    Ok(())
}

/// Image id is the slice position; `dets[i]` and `gts[i]` describe image i.
pub fn evaluate<T: Real>(
    dets: &[Vec<Detection<T>>],
    gts: &[Vec<(BBox<T>, usize)>],
    num_classes: usize,
) -> Result<EvalResult<T>> {
    validate_inputs(dets, gts, num_classes)?;
    let thresholds = coco_thresholds::<T>();
    let per_class: Vec<ClassData<T>> =
        (1..=num_classes).map(|c| class_data(dets, gts, c)).collect();

    let mut ap_at = Vec::with_capacity(NUM_THRESHOLDS);
    let mut counts = Vec::with_capacity(NUM_THRESHOLDS);
    let mut class_sums: Vec<Option<T>> = vec![None; num_classes];
    for &thr in &thresholds {
        let mut ap_sum = T::zero();
        let mut ap_n = 0usize;
        let mut total = Counts::default();
        for (ci, data) in per_class.iter().enumerate() {
            let matches = match_class_at(data, thr);
            let tp_flags: Vec<bool> = matches.iter().map(Option::is_some).collect();
            let tp = tp_flags.iter().filter(|&&f| f).count();
            total.true_positives += tp;
            total.false_positives += tp_flags.len() - tp;
            total.false_negatives += data.num_gt - tp;
            if let Some(ap) = interpolated_ap::<T>(&tp_flags, data.num_gt) {
                ap_sum += ap;
                ap_n += 1;
                *class_sums[ci].get_or_insert(T::zero()) += ap;
            }
        }
        let ap = if ap_n == 0 { T::zero() } else { ap_sum / T::from_count(ap_n) };
        ap_at.push((thr, ap));
        counts.push((thr, total));
    }
    let ap = ap_at.iter().fold(T::zero(), |acc, (_, v)| acc + *v) / T::from_count(NUM_THRESHOLDS);
    let class_ap = class_sums
        .into_iter()
        .enumerate()
        .filter_map(|(ci, s)| s.map(|s| (ci + 1, s / T::from_count(NUM_THRESHOLDS))))
        .collect();
    Ok(EvalResult { ap, ap_at, class_ap, counts })
}

/// Raw (recall, precision) points in detection-score order for one class at
/// one IoU threshold. With no ground truth for the class, recall stays 0.
pub fn pr_curve<T: Real>(
    dets: &[Vec<Detection<T>>],
    gts: &[Vec<(BBox<T>, usize)>],
    class_id: usize,
    iou_threshold: T,
) -> Vec<(T, T)> {
    let data = class_data(dets, gts, class_id);
    let matches = match_class_at(&data, iou_threshold);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(matches.len());
    for m in &matches {
        if m.is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = if data.num_gt == 0 {
            T::zero()
        } else {
            T::from_count(tp) / T::from_count(data.num_gt)
        };
        points.push((recall, T::from_count(tp) / T::from_count(tp + fp)));
    }
    points
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeCutoffs<T: Real = f64> {
    pub small_max: T,
    pub medium_max: T,
}

impl<T: Real> SizeCutoffs<T> {
    /// COCO's 32^2 / 96^2 pixel-area cutoffs rescaled from a 640px reference
    /// side to the given image side.
    pub fn for_image_side(side: usize) -> Self {
        let scale = T::from_count(side * side) / T::from_count(640 * 640);
        SizeCutoffs { small_max: T::c(1024.0) * scale, medium_max: T::c(9216.0) * scale }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SizeAps<T: Real = f64> {
    pub small: Option<T>,
    pub medium: Option<T>,
    pub large: Option<T>,
}

/// AP restricted to a box-area stratum: both gts and detections are filtered
/// by area before evaluation. A stratum without any ground truth yields None.
pub fn size_stratified_ap<T: Real>(
    dets: &[Vec<Detection<T>>],
    gts: &[Vec<(BBox<T>, usize)>],
    num_classes: usize,
    cutoffs: SizeCutoffs<T>,
) -> Result<SizeAps<T>> {
    validate_inputs(dets, gts, num_classes)?;
    let inf = T::infinity();
    let strata = [
        (T::zero(), cutoffs.small_max),
        (cutoffs.small_max, cutoffs.medium_max),
        (cutoffs.medium_max, inf),
    ];
    let mut out = [None, None, None];
    for (s, (lo, hi)) in strata.iter().enumerate() {
        let in_range = |b: &BBox<T>| {
            let a = b.area();
            a >= *lo && a < *hi
        };
        let fd: Vec<Vec<Detection<T>>> = dets
            .iter()
            .map(|per| per.iter().filter(|d| in_range(&d.bbox)).cloned().collect())
            .collect();
        let fg: Vec<Vec<(BBox<T>, usize)>> = gts
            .iter()
            .map(|per| per.iter().filter(|(b, _)| in_range(b)).cloned().collect())
            .collect();
        if fg.iter().all(Vec::is_empty) {
            continue;
        }
        out[s] = Some(evaluate(&fd, &fg, num_classes)?.ap);
    }
    Ok(SizeAps { small: out[0], medium: out[1], large: out[2] })
}

/// `metric,value` rows with a fixed ordering, floats at full precision.
pub fn write_metrics_csv<T: Real>(path: &Path, result: &EvalResult<T>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "metric,value")?;
    writeln!(w, "ap,{}", result.ap.to_f64_lossy())?;
    for (thr, ap) in &result.ap_at {
        writeln!(w, "ap{:02.0},{}", thr.to_f64_lossy() * 100.0, ap.to_f64_lossy())?;
    }
    for (class_id, ap) in &result.class_ap {
        writeln!(w, "ap_class{class_id},{}", ap.to_f64_lossy())?;
    }
    for (thr, c) in &result.counts {
        let t = thr.to_f64_lossy() * 100.0;
        writeln!(w, "tp{t:02.0},{}", c.true_positives)?;
        writeln!(w, "fp{t:02.0},{}", c.false_positives)?;
        writeln!(w, "fn{t:02.0},{}", c.false_negatives)?;
    }
    w.flush()?;
    Ok(())
}

/// One-row percentage table: AP, AP50, AP60, AP70, AP80, AP90.
pub fn format_ap_table<T: Real>(result: &EvalResult<T>) -> String {
    let pick = |want: f64| {
        result
            .ap_at
            .iter()
            .find(|(t, _)| (t.to_f64_lossy() - want).abs() < 1e-9)
            .map(|(_, ap)| ap.to_f64_lossy() * 100.0)
            .unwrap_or(f64::NAN)
    };
    let mut s = String::new();
    s.push_str("    AP  AP50  AP60  AP70  AP80  AP90\n");
    s.push_str(&format!(
        "{:6.1}{:6.1}{:6.1}{:6.1}{:6.1}{:6.1}\n",
        result.ap.to_f64_lossy() * 100.0,
        pick(0.5),
        pick(0.6),
        pick(0.7),
        pick(0.8),
        pick(0.9),
    ));
    s
}

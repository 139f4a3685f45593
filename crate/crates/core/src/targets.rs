//! Anchor label assignment and regression-target construction, for both the
//! original-anchor stage and refined-anchor stages.

use crate::anchors::iou_matrix;
use crate::error::{Error, Result};
use crate::geometry::{decode_clamped, encode, BBox, Offsets};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Negative,
    Ignore,
    Positive { class_id: usize, gt_index: usize },
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive { .. })
    }
}

/// IoU band for one matching stage: max-IoU >= mu_pos is positive, < mu_neg
/// is negative, in between is ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchThresholds<T: Real = f64> {
    pub mu_pos: T,
    pub mu_neg: T,
}

impl<T: Real> MatchThresholds<T> {
    pub fn new(mu_pos: T, mu_neg: T) -> Result<Self> {
        let t = MatchThresholds { mu_pos, mu_neg };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_pos > T::zero() && self.mu_pos <= T::one()) {
            return Err(Error::invalid("mu_pos must be in (0, 1]"));
        }
        if !(self.mu_neg >= T::zero() && self.mu_neg <= self.mu_pos) {
            return Err(Error::invalid("mu_neg must be in [0, mu_pos]"));
        }
        Ok(())
    }

    /// Original-anchor stage default.
    pub fn stage1_default() -> Self {
        MatchThresholds { mu_pos: T::c(0.5), mu_neg: T::c(0.4) }
    }

    /// Refined-anchor stage default.
    pub fn stage2_default() -> Self {
        MatchThresholds { mu_pos: T::c(0.6), mu_neg: T::c(0.5) }
    }

    /// Twice-refined-anchor stage default.
    pub fn stage3_default() -> Self {
        MatchThresholds { mu_pos: T::c(0.7), mu_neg: T::c(0.6) }
    }
}

/// Per-anchor labels and regression targets for one matching stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment<T: Real = f64> {
    pub labels: Vec<AnchorLabel>,
    /// `Some(encode(stage_anchor, matched gt))` for positives, `None` otherwise.
    pub targets: Vec<Option<Offsets<T>>>,
    /// 1 = original anchors, 2 = refined anchors, 3 = twice-refined.
    pub stage_id: usize,
}

impl<T: Real> TargetAssignment<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|l| l.is_positive()).count()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.is_positive().then_some(i))
            .collect()
    }
}

/// Labels every anchor against its argmax-IoU gt, then forces each gt's best
/// anchor positive so no gt goes unmatched. When several gts claim the same
/// anchor, the higher IoU wins; exact ties go to the lower gt index. With zero
/// gts every anchor is negative.
pub fn assign<T: Real>(
    anchors: &[BBox<T>],
    gts: &[(BBox<T>, usize)],
    thresholds: &MatchThresholds<T>,
    stage_id: usize,
    num_classes: usize,
) -> Result<TargetAssignment<T>> {
    thresholds.validate()?;
    for (_, class_id) in gts {
        if *class_id < 1 || *class_id > num_classes {
            return Err(Error::invalid(format!(
                "gt class id {class_id} outside [1, {num_classes}]"
            )));
        }
    }
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let mut matched_gt: Vec<Option<usize>> = vec![None; anchors.len()];
    if !gts.is_empty() {
        let gt_boxes: Vec<BBox<T>> = gts.iter().map(|(b, _)| b.clone()).collect();
        let m = iou_matrix(anchors, &gt_boxes);
        for i in 0..anchors.len() {
            let (j, v) = m.row_argmax(i).expect("gts are non-empty");
            if v >= thresholds.mu_pos {
                labels[i] = AnchorLabel::Positive { class_id: gts[j].1, gt_index: j };
                matched_gt[i] = Some(j);
            } else if v < thresholds.mu_neg {
                labels[i] = AnchorLabel::Negative;
            } else {
                labels[i] = AnchorLabel::Ignore;
            }
        }
        // Forced-positive claims: gt j claims its best anchor.
        let mut claims: Vec<Option<(usize, T)>> = vec![None; anchors.len()];
        for j in 0..gts.len() {
            let (i, v) = m.col_argmax(j).expect("anchors are non-empty at call sites");
            let replace = match claims[i] {
                None => true,
                Some((_, held)) => v > held,
            };
            if replace {
                claims[i] = Some((j, v));
            }
        }
        for (i, claim) in claims.iter().enumerate() {
            if let Some((j, _)) = claim {
                labels[i] = AnchorLabel::Positive { class_id: gts[*j].1, gt_index: *j };
                matched_gt[i] = Some(*j);
            }
        }
    }
    let mut targets = vec![None; anchors.len()];
    for i in 0..anchors.len() {
        if let Some(j) = matched_gt[i] {
            targets[i] = Some(encode(&anchors[i], &gts[j].0)?);
        }
    }
    Ok(TargetAssignment { labels, targets, stage_id })
}

/// Decodes each anchor with its predicted offsets to get the refined anchor
/// list for the next matching stage. Offsets are plain data here: no
/// derivative information flows through this step.
pub fn refine_anchors<T: Real>(anchors: &[BBox<T>], offsets: &[Offsets<T>]) -> Result<Vec<BBox<T>>> {
    if anchors.len() != offsets.len() {
        return Err(Error::invalid(format!(
            "refine_anchors: {} anchors vs {} offset rows",
            anchors.len(),
            offsets.len()
        )));
    }
    anchors
        .iter()
        .zip(offsets)
        .map(|(a, o)| decode_clamped(a, o))
        .collect()
}

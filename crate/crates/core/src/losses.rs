//! Focal classification loss, smooth-L1 regression loss, and their
//! composition into the consistent two-stage objective.
//!
//! The graph builders compose everything from tape primitives so gradients
//! flow only through predictions; labels, matched targets and normalizers are
//! constants of the current step. Scalar reference implementations of both
//! base losses live here too and serve as oracles for the graph versions.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::targets::{AnchorLabel, TargetAssignment};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig<T: Real = f64> {
    /// Weight of every refined-stage classification term.
    pub alpha: T,
    pub focal_gamma: T,
    pub focal_alpha: T,
    /// 1 = original anchors only, 2 = plus refined, 3 = plus twice-refined.
    pub num_cls_stages: usize,
    /// 1 = one regression output layer, 2 = duplicated final layer.
    pub num_reg_stages: usize,
    pub smooth_l1_beta: T,
    /// Normalize every classification term by the stage-1 positive count
    /// (single-factor reading). When false, each term uses its own count.
    pub shared_cls_norm: bool,
}

impl<T: Real> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig {
            alpha: T::one(),
            focal_gamma: T::c(2.0),
            focal_alpha: T::c(0.25),
            num_cls_stages: 2,
            num_reg_stages: 2,
            smooth_l1_beta: T::c(1.0 / 9.0),
            shared_cls_norm: true,
        }
    }
}

impl<T: Real> LossConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < T::zero() {
            return Err(Error::invalid("loss alpha must be >= 0"));
        }
        if self.focal_gamma < T::zero() {
            return Err(Error::invalid("focal_gamma must be >= 0"));
        }
        if !(self.focal_alpha > T::zero() && self.focal_alpha < T::one()) {
            return Err(Error::invalid("focal_alpha must be in (0, 1)"));
        }
        if !(1..=3).contains(&self.num_cls_stages) {
            return Err(Error::invalid("num_cls_stages must be 1, 2 or 3"));
        }
        if !(1..=2).contains(&self.num_reg_stages) {
            return Err(Error::invalid("num_reg_stages must be 1 or 2"));
        }
        if self.num_cls_stages > self.num_reg_stages + 1 {
            return Err(Error::invalid(
                "classification stage k needs k-1 refinement rounds: num_cls_stages <= num_reg_stages + 1",
            ));
        }
        if self.smooth_l1_beta <= T::zero() {
            return Err(Error::invalid("smooth_l1_beta must be positive"));
        }
        Ok(())
    }
}

/// Per-step loss values, after all weighting, so that
/// `total = sum(cls_stage_losses) + sum(reg_stage_losses)`.
#[derive(Debug, Clone)]
pub struct LossReport<T: Real = f64> {
    pub cls_stage_losses: Vec<T>,
    pub reg_stage_losses: Vec<T>,
    pub total: T,
    pub n_cls: usize,
    pub n_reg_per_stage: Vec<usize>,
}

/// Sigmoid focal loss for one logit: -alpha_t * (1 - p_t)^gamma * ln(p_t),
/// with p = sigmoid(logit). Stable for large |logit| via softplus.
pub fn focal_loss<T: Real>(logit: T, is_positive: bool, gamma: T, alpha_f: T) -> T {
    let softplus = |u: T| {
        // max(u, 0) + ln(1 + exp(-|u|))
        u.max(T::zero()) + (T::one() + (-u.abs()).exp()).ln()
    };
    let p = if logit >= T::zero() {
        T::one() / (T::one() + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (T::one() + e)
    };
    let (alpha_t, p_t, ln_pt) = if is_positive {
        (alpha_f, p, -softplus(-logit))
    } else {
        (T::one() - alpha_f, T::one() - p, -softplus(logit))
    };
    -alpha_t * (T::one() - p_t).powf(gamma) * ln_pt
}

/// Huber-style loss: 0.5 x^2 / beta for |x| < beta, |x| - 0.5 beta otherwise.
pub fn smooth_l1<T: Real>(x: T, beta: T) -> T {
    let a = x.abs();
    if a < beta {
        T::c(0.5) * x * x / beta
    } else {
        a - T::c(0.5) * beta
    }
}

/// Classification loss graph plus the report scalars.
pub struct ClsLoss<T: Real = f64> {
    pub total: Tensor<T>,
    pub stage_terms: Vec<Tensor<T>>,
    pub n_cls: usize,
}

/// Builds `(1/N_cls) * sum_i [FL(c_i, stage-1 label) + alpha * FL(c_i,
/// refined-stage labels)]` on the tape of `logits`. `stages[0]` is the
/// original-anchor assignment; one assignment per configured stage.
/// Ignore-labeled anchors contribute nothing to their stage's term.
pub fn consistent_cls_loss<T: Real>(
    logits: &Tensor<T>,
    stages: &[&TargetAssignment<T>],
    config: &LossConfig<T>,
) -> Result<ClsLoss<T>> {
    config.validate()?;
    if stages.len() != config.num_cls_stages {
        return Err(Error::invalid(format!(
            "expected {} stage assignments, got {}",
            config.num_cls_stages,
            stages.len()
        )));
    }
    if logits.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "logits must be [anchors, classes], got {:?}",
            logits.shape()
        )));
    }
    let (a, m) = (logits.shape()[0], logits.shape()[1]);
    for s in stages {
        if s.len() != a {
            return Err(Error::invalid(format!(
                "assignment covers {} anchors, logits have {a} rows",
                s.len()
            )));
        }
    }
    let tape = logits.tape();
    let n1 = stages[0].num_positives().max(1);

    // Shared pieces: p, ln p, ln (1-p), all [A, M].
    let p = logits.sigmoid();
    let one_minus_p = p.affine(-T::one(), T::one());
    let relu_neg_x = logits.affine(-T::one(), T::zero()).relu();
    let relu_pos_x = logits.relu();
    let abs_x = relu_pos_x.add(&relu_neg_x)?;
    let ln1p_exp_neg_abs = abs_x
        .affine(-T::one(), T::zero())
        .exp()
        .affine(T::one(), T::one())
        .log();
    let ln_p = relu_neg_x.add(&ln1p_exp_neg_abs)?.affine(-T::one(), T::zero());
    let ln_1mp = relu_pos_x.add(&ln1p_exp_neg_abs)?.affine(-T::one(), T::zero());

    let mut stage_terms = Vec::with_capacity(stages.len());
    let mut total: Option<Tensor<T>> = None;
    for (k, stage) in stages.iter().enumerate() {
        let mut pos = vec![T::zero(); a * m];
        let mut neg_w = vec![T::zero(); a * m];
        for (i, label) in stage.labels.iter().enumerate() {
            match label {
                AnchorLabel::Ignore => {}
                AnchorLabel::Negative => {
                    for j in 0..m {
                        neg_w[i * m + j] = -(T::one() - config.focal_alpha);
                    }
                }
                AnchorLabel::Positive { class_id, .. } => {
                    if *class_id > m {
                        return Err(Error::invalid(format!(
                            "positive class id {class_id} exceeds {m} logit columns"
                        )));
                    }
                    for j in 0..m {
                        if j == *class_id - 1 {
                            pos[i * m + j] = T::one();
                            neg_w[i * m + j] = -config.focal_alpha;
                        } else {
                            neg_w[i * m + j] = -(T::one() - config.focal_alpha);
                        }
                    }
                }
            }
        }
        let pos_mask = tape.leaf(&[a, m], pos)?;
        let neg_mask = pos_mask.affine(-T::one(), T::one());
        let neg_weight = tape.leaf(&[a, m], neg_w)?;

        let ln_pt = pos_mask.mul(&ln_p)?.add(&neg_mask.mul(&ln_1mp)?)?;
        let one_minus_pt = pos_mask.mul(&one_minus_p)?.add(&neg_mask.mul(&p)?)?;
        let per_entry = one_minus_pt.powf(config.focal_gamma).mul(&ln_pt)?.mul(&neg_weight)?;

        let n = if config.shared_cls_norm { n1 } else { stage.num_positives().max(1) };
        let stage_weight = if k == 0 { T::one() } else { config.alpha };
        let term = per_entry.sum().affine(stage_weight / T::from_count(n), T::zero());
        total = Some(match total {
            None => term.clone(),
            Some(t) => t.add(&term)?,
        });
        stage_terms.push(term);
    }
    Ok(ClsLoss { total: total.expect("at least one stage"), stage_terms, n_cls: n1 })
}

/// Regression loss graph plus the report scalars.
pub struct RegLoss<T: Real = f64> {
    pub total: Tensor<T>,
    pub stage_terms: Vec<Tensor<T>>,
    pub n_reg_per_stage: Vec<usize>,
}

/// Builds `sum_k (1/N_k) * sum_{i in stage-k positives} SL1(offsets_k[i] -
/// target_k[i])` with SL1 summed over the 4 coordinates. `offsets[k]` is the
/// [A, 4] prediction of regression stage k and `stages[k]` the matching
/// assignment (original anchors for k = 0, refined for k = 1).
pub fn consistent_reg_loss<T: Real>(
    offsets: &[&Tensor<T>],
    stages: &[&TargetAssignment<T>],
    beta: T,
) -> Result<RegLoss<T>> {
    if offsets.is_empty() || offsets.len() != stages.len() {
        return Err(Error::invalid(format!(
            "need one assignment per offsets tensor, got {} and {}",
            offsets.len(),
            stages.len()
        )));
    }
    if beta <= T::zero() {
        return Err(Error::invalid("smooth_l1_beta must be positive"));
    }
    let mut stage_terms = Vec::with_capacity(offsets.len());
    let mut n_reg_per_stage = Vec::with_capacity(offsets.len());
    let mut total: Option<Tensor<T>> = None;
    for (pred, stage) in offsets.iter().zip(stages) {
        if pred.shape().len() != 2 || pred.shape()[1] != 4 {
            return Err(Error::invalid(format!(
                "offsets must be [anchors, 4], got {:?}",
                pred.shape()
            )));
        }
        let a = pred.shape()[0];
        if stage.len() != a {
            return Err(Error::invalid(format!(
                "assignment covers {} anchors, offsets have {a} rows",
                stage.len()
            )));
        }
        let tape = pred.tape();
        let mut mask = vec![T::zero(); a * 4];
        let mut target = vec![T::zero(); a * 4];
        let mut n = 0usize;
        for i in 0..a {
            if let Some(t) = &stage.targets[i] {
                debug_assert!(stage.labels[i].is_positive());
                n += 1;
                for (j, v) in [t.tx, t.ty, t.tw, t.th].into_iter().enumerate() {
                    mask[i * 4 + j] = T::one();
                    target[i * 4 + j] = v;
                }
            }
        }
        let mask_t = tape.leaf(&[a, 4], mask)?;
        let target_t = tape.leaf(&[a, 4], target)?;
        // Masked |x|, then min(|x|, beta) via beta - relu(beta - |x|);
        // relu'(0) = 0 makes the subgradients exact at 0 and at the knee.
        let diff = pred.sub(&target_t)?.mul(&mask_t)?;
        let abs = diff.relu().add(&diff.affine(-T::one(), T::zero()).relu())?;
        let m = abs.affine(-T::one(), beta).relu().affine(-T::one(), beta);
        let quad = m.mul(&m)?.affine(T::c(0.5) / beta, T::zero());
        let sl1 = quad.add(&abs.sub(&m)?)?;
        let n_floor = n.max(1);
        let term = sl1.sum().affine(T::one() / T::from_count(n_floor), T::zero());
        total = Some(match total {
            None => term.clone(),
            Some(t) => t.add(&term)?,
        });
        stage_terms.push(term);
        n_reg_per_stage.push(n);
    }
    Ok(RegLoss { total: total.expect("at least one stage"), stage_terms, n_reg_per_stage })
}

//! Single-image SGD training: scenes in, target assignments per stage,
//! consistent losses, backward, parameter update. Also the split-level
//! inference and evaluation drivers built on a trained model.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::anchors::{generate_anchors, AnchorSet};
use crate::config::ExperimentConfig;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalResult};
use crate::geometry::{BBox, Offsets};
use crate::inference::{detect, Detection};
use crate::losses::{consistent_cls_loss, consistent_reg_loss, LossReport};
use crate::scalar::Real;
use crate::synthdata::{flip_horizontal, split_scene, Scene, Split};
use crate::targets::{assign, refine_anchors, TargetAssignment};
use crate::tensor::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Seed streams so that model init and augmentation draws never interleave.
const INIT_STREAM: u64 = 0;
const AUG_STREAM: u64 = 1;

pub struct Trainer<T: Real = f64> {
    pub config: ExperimentConfig<T>,
    pub model: DetectorModel<T>,
    pub anchor_set: AnchorSet<T>,
    aug_rng: Rng,
    step: usize,
}

/// Rows of an [A, 4] offsets tensor as plain per-anchor structs.
fn offset_rows<T: Real>(flat: &[T]) -> Vec<Offsets<T>> {
    flat.chunks_exact(4)
        .map(|c| Offsets { tx: c[0], ty: c[1], tw: c[2], th: c[3] })
        .collect()
}

impl<T: Real> Trainer<T> {
    pub fn new(config: ExperimentConfig<T>) -> Result<Self> {
        config.validate()?;
        let mut init_rng = Rng::derive(config.trainer.seed, INIT_STREAM);
        let model =
            DetectorModel::new(config.model.clone(), config.anchors.clone(), &mut init_rng)?;
        let side = config.scene.image_side;
        let anchor_set = generate_anchors(&config.anchors, side, side)?;
        let aug_rng = Rng::derive(config.trainer.seed, AUG_STREAM);
        Ok(Trainer { config, model, anchor_set, aug_rng, step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Per-stage target assignments for the current outputs. Stage 1 matches
    /// the original anchors; each later stage matches the anchors refined by
    /// the previous regression output, treated as constants.
    fn stage_assignments(
        &self,
        outputs_t0: &Tensor<T>,
        outputs_t1: Option<&Tensor<T>>,
        gts: &[(BBox<T>, usize)],
    ) -> Result<Vec<TargetAssignment<T>>> {
        let m = self.config.scene.num_classes;
        let n_stages = self.config.num_stages();
        let mut assigns = Vec::with_capacity(n_stages);
        assigns.push(assign(&self.anchor_set.boxes, gts, &self.config.matching[0], 1, m)?);
        if n_stages >= 2 {
            let refined = refine_anchors(&self.anchor_set.boxes, &offset_rows(&outputs_t0.value()))?;
            assigns.push(assign(&refined, gts, &self.config.matching[1], 2, m)?);
            if n_stages >= 3 {
                let t1 = outputs_t1.ok_or_else(|| {
                    Error::invalid("stage-3 matching needs a second regression output")
                })?;
                let twice = refine_anchors(&refined, &offset_rows(&t1.value()))?;
                assigns.push(assign(&twice, gts, &self.config.matching[2], 3, m)?);
            }
        }
        Ok(assigns)
    }

    /// One SGD step on one scene. The report's stage losses sum to `total`.
    pub fn training_step(&mut self, scene: &Scene<T>) -> Result<LossReport<T>> {
        let side = scene.image_side;
        if side != self.config.scene.image_side {
            return Err(Error::invalid("scene size does not match the configured image side"));
        }
        let tape: Tape<T> = Tape::new();
        let image = tape.leaf(&[1, 1, side, side], scene.pixels.clone())?;
        let (outputs, leaves) = self.model.forward(&image)?;

        let assigns = self.stage_assignments(
            &outputs.offsets_stage1,
            outputs.offsets_stage2.as_ref(),
            &scene.gts,
        )?;
        let stage_refs: Vec<&TargetAssignment<T>> = assigns.iter().collect();

        let loss_cfg = &self.config.loss;
        let cls = consistent_cls_loss(
            &outputs.cls_logits,
            &stage_refs[..loss_cfg.num_cls_stages],
            loss_cfg,
        )?;
        let mut reg_preds: Vec<&Tensor<T>> = vec![&outputs.offsets_stage1];
        if loss_cfg.num_reg_stages == 2 {
            reg_preds.push(
                outputs
                    .offsets_stage2
                    .as_ref()
                    .ok_or_else(|| Error::invalid("two regression stages need a second head"))?,
            );
        }
        let reg = consistent_reg_loss(
            &reg_preds,
            &stage_refs[..loss_cfg.num_reg_stages],
            loss_cfg.smooth_l1_beta,
        )?;

        let total = cls.total.add(&reg.total)?;
        total.backward()?;
        self.model.params.harvest(&leaves)?;
        let t = &self.config.trainer;
        self.model.params.sgd_step(t.lr, t.momentum, t.weight_decay);
        self.step += 1;
        Ok(LossReport {
            cls_stage_losses: cls.stage_terms.iter().map(Tensor::item).collect(),
            reg_stage_losses: reg.stage_terms.iter().map(Tensor::item).collect(),
            total: total.item(),
            n_cls: cls.n_cls,
            n_reg_per_stage: reg.n_reg_per_stage,
        })
    }

    /// Training scenes cycle through the train split in index order.
    pub fn next_step(&mut self) -> Result<LossReport<T>> {
        let idx = self.step % self.config.data.train_count;
        let mut scene = split_scene(&self.config.scene, Split::Train, idx);
        if self.config.trainer.flip_augment && self.aug_rng.chance(0.5) {
            scene = flip_horizontal(&scene);
        }
        self.training_step(&scene)
    }

    /// Runs the configured number of steps and returns the per-step reports.
    pub fn run(&mut self) -> Result<Vec<LossReport<T>>> {
        let steps = self.config.trainer.steps;
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            log.push(self.next_step()?);
        }
        Ok(log)
    }
}

/// `step,total,...` rows, one per training step, full float precision.
pub fn write_loss_curve<T: Real>(path: &Path, log: &[LossReport<T>]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let (n_cls, n_reg) = log
        .first()
        .map(|r| (r.cls_stage_losses.len(), r.reg_stage_losses.len()))
        .unwrap_or((0, 0));
    write!(w, "step,total")?;
    for k in 0..n_cls {
        write!(w, ",cls_stage{}", k + 1)?;
    }
    for k in 0..n_reg {
        write!(w, ",reg_stage{}", k + 1)?;
    }
    writeln!(w, ",n_cls")?;
    for (i, r) in log.iter().enumerate() {
        write!(w, "{i},{}", r.total.to_f64_lossy())?;
        for v in &r.cls_stage_losses {
            write!(w, ",{}", v.to_f64_lossy())?;
        }
        for v in &r.reg_stage_losses {
            write!(w, ",{}", v.to_f64_lossy())?;
        }
        writeln!(w, ",{}", r.n_cls)?;
    }
    w.flush()?;
    Ok(())
}

/// Inference over one dataset split: scenes with their final detections.
pub struct SplitDetections<T: Real = f64> {
    pub scenes: Vec<Scene<T>>,
    pub detections: Vec<Vec<Detection<T>>>,
}

pub fn detect_on_split<T: Real>(
    model: &DetectorModel<T>,
    config: &ExperimentConfig<T>,
    split: Split,
    count: usize,
) -> Result<SplitDetections<T>> {
    let side = config.scene.image_side;
    let anchor_set = generate_anchors(&config.anchors, side, side)?;
    let mut scenes = Vec::with_capacity(count);
    let mut detections = Vec::with_capacity(count);
    for i in 0..count {
        let scene = split_scene(&config.scene, split, i);
        let outputs = model.forward_image(&scene.pixels, side, side)?;
        detections.push(detect(&outputs, &anchor_set, &config.inference, side, side)?);
        scenes.push(scene);
    }
    Ok(SplitDetections { scenes, detections })
}

pub fn evaluate_split<T: Real>(
    model: &DetectorModel<T>,
    config: &ExperimentConfig<T>,
    split: Split,
    count: usize,
) -> Result<EvalResult<T>> {
    let run = detect_on_split(model, config, split, count)?;
    let gts: Vec<Vec<(BBox<T>, usize)>> = run.scenes.iter().map(|s| s.gts.clone()).collect();
    evaluate(&run.detections, &gts, config.scene.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{AnchorConfig, LevelSpec};
    use crate::targets::AnchorLabel;

    /// Small but real setup: stride-4 single level on 32px scenes.
    fn tiny_config() -> ExperimentConfig<f64> {
        let mut cfg = ExperimentConfig::<f64>::default();
        cfg.anchors = AnchorConfig {
            levels: vec![LevelSpec { stride: 4, base_size: 12.0 }],
            scales: vec![1.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
        };
        cfg.model.backbone_channels = vec![4, 8];
        cfg.model.trunk_channels = 8;
        cfg.model.trunk_depth = 1;
        cfg.scene.image_side = 32;
        cfg.scene.min_size = 8.0;
        cfg.scene.max_size = 20.0;
        cfg.scene.max_objects = 2;
        cfg.data = crate::config::DataConfig { train_count: 4, val_count: 2, test_count: 2 };
        cfg.trainer.steps = 4;
        cfg.trainer.flip_augment = false;
        cfg.finalize().unwrap();
        cfg
    }

    #[test]
    fn report_components_sum_to_total() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        for _ in 0..3 {
            let r = t.next_step().unwrap();
            let sum: f64 = r.cls_stage_losses.iter().sum::<f64>()
                + r.reg_stage_losses.iter().sum::<f64>();
            assert!((r.total - sum).abs() < 1e-12 * r.total.abs().max(1.0));
            assert!(r.total.is_finite() && r.total > 0.0);
            assert_eq!(r.cls_stage_losses.len(), 2);
            assert_eq!(r.reg_stage_losses.len(), 2);
        }
    }

    #[test]
    fn identical_seeds_give_identical_loss_sequences() {
        let cfg = tiny_config();
        let mut a = Trainer::new(cfg.clone()).unwrap();
        let mut b = Trainer::new(cfg).unwrap();
        for _ in 0..5 {
            let ra = a.next_step().unwrap();
            let rb = b.next_step().unwrap();
            assert_eq!(ra.total, rb.total);
            assert_eq!(ra.cls_stage_losses, rb.cls_stage_losses);
            assert_eq!(ra.reg_stage_losses, rb.reg_stage_losses);
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let cfg = tiny_config();
        let mut other = cfg.clone();
        other.trainer.seed = 99;
        let ra = Trainer::new(cfg).unwrap().next_step().unwrap();
        let rb = Trainer::new(other).unwrap().next_step().unwrap();
        assert_ne!(ra.total, rb.total);
    }

    #[test]
    fn flip_augmentation_changes_the_run() {
        let mut with = tiny_config();
        with.trainer.flip_augment = true;
        let mut without = tiny_config();
        without.trainer.steps = 8;
        with.trainer.steps = 8;
        let la = Trainer::new(with).unwrap().run().unwrap();
        let lb = Trainer::new(without).unwrap().run().unwrap();
        assert!(la.iter().zip(&lb).any(|(a, b)| a.total != b.total));
    }

    /// Straight-line single-stage training loop written independently of the
    /// multi-stage machinery; the baseline configuration must reproduce it
    /// bit for bit.
    fn reference_baseline_losses(cfg: &ExperimentConfig<f64>, steps: usize) -> Vec<f64> {
        let mut rng = Rng::derive(cfg.trainer.seed, INIT_STREAM);
        let mut model =
            DetectorModel::new(cfg.model.clone(), cfg.anchors.clone(), &mut rng).unwrap();
        let side = cfg.scene.image_side;
        let anchors = generate_anchors(&cfg.anchors, side, side).unwrap();
        let mut momentum: Vec<Vec<f64>> = (0..model.params.len())
            .map(|i| vec![0.0; model.params.get(i).data.len()])
            .collect();
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let scene = split_scene(&cfg.scene, Split::Train, step % cfg.data.train_count);
            let tape: Tape<f64> = Tape::new();
            let image = tape.leaf(&[1, 1, side, side], scene.pixels.clone()).unwrap();
            let (outputs, leaves) = model.forward(&image).unwrap();
            let st = assign(
                &anchors.boxes,
                &scene.gts,
                &cfg.matching[0],
                1,
                cfg.scene.num_classes,
            )
            .unwrap();

            let logits = &outputs.cls_logits;
            let (a, m) = (logits.shape()[0], logits.shape()[1]);
            let n1 = st.num_positives().max(1);
            let p = logits.sigmoid();
            let one_minus_p = p.affine(-1.0, 1.0);
            let relu_neg_x = logits.affine(-1.0, 0.0).relu();
            let relu_pos_x = logits.relu();
            let abs_x = relu_pos_x.add(&relu_neg_x).unwrap();
            let ln1p = abs_x.affine(-1.0, 0.0).exp().affine(1.0, 1.0).log();
            let ln_p = relu_neg_x.add(&ln1p).unwrap().affine(-1.0, 0.0);
            let ln_1mp = relu_pos_x.add(&ln1p).unwrap().affine(-1.0, 0.0);
            let mut pos = vec![0.0; a * m];
            let mut neg_w = vec![0.0; a * m];
            for (i, label) in st.labels.iter().enumerate() {
                match label {
                    AnchorLabel::Ignore => {}
                    AnchorLabel::Negative => {
                        for j in 0..m {
                            neg_w[i * m + j] = -(1.0 - cfg.loss.focal_alpha);
                        }
                    }
                    AnchorLabel::Positive { class_id, .. } => {
                        for j in 0..m {
                            if j == *class_id - 1 {
                                pos[i * m + j] = 1.0;
                                neg_w[i * m + j] = -cfg.loss.focal_alpha;
                            } else {
                                neg_w[i * m + j] = -(1.0 - cfg.loss.focal_alpha);
                            }
                        }
                    }
                }
            }
            let pos_mask = tape.leaf(&[a, m], pos).unwrap();
            let neg_mask = pos_mask.affine(-1.0, 1.0);
            let neg_weight = tape.leaf(&[a, m], neg_w).unwrap();
            let ln_pt = pos_mask.mul(&ln_p).unwrap().add(&neg_mask.mul(&ln_1mp).unwrap()).unwrap();
            let one_minus_pt =
                pos_mask.mul(&one_minus_p).unwrap().add(&neg_mask.mul(&p).unwrap()).unwrap();
            let per_entry = one_minus_pt
                .powf(cfg.loss.focal_gamma)
                .mul(&ln_pt)
                .unwrap()
                .mul(&neg_weight)
                .unwrap();
            let cls = per_entry.sum().affine(1.0 / n1 as f64, 0.0);

            let preds = &outputs.offsets_stage1;
            let mut mask = vec![0.0; a * 4];
            let mut target = vec![0.0; a * 4];
            let mut n = 0usize;
            for i in 0..a {
                if let Some(t) = &st.targets[i] {
                    n += 1;
                    for (j, v) in [t.tx, t.ty, t.tw, t.th].into_iter().enumerate() {
                        mask[i * 4 + j] = 1.0;
                        target[i * 4 + j] = v;
                    }
                }
            }
            let beta = cfg.loss.smooth_l1_beta;
            let mask_t = tape.leaf(&[a, 4], mask).unwrap();
            let target_t = tape.leaf(&[a, 4], target).unwrap();
            let diff = preds.sub(&target_t).unwrap().mul(&mask_t).unwrap();
            let abs = diff.relu().add(&diff.affine(-1.0, 0.0).relu()).unwrap();
            let mm = abs.affine(-1.0, beta).relu().affine(-1.0, beta);
            let quad = mm.mul(&mm).unwrap().affine(0.5 / beta, 0.0);
            let sl1 = quad.add(&abs.sub(&mm).unwrap()).unwrap();
            let reg = sl1.sum().affine(1.0 / n.max(1) as f64, 0.0);

            let total = cls.add(&reg).unwrap();
            total.backward().unwrap();
            losses.push(total.item());

            let (lr, mom, wd) =
                (cfg.trainer.lr, cfg.trainer.momentum, cfg.trainer.weight_decay);
            for (i, leaf) in leaves.iter().enumerate() {
                let grad = leaf.grad();
                let param = model.params.get_mut(i);
                for j in 0..param.data.len() {
                    let g = grad[j] + wd * param.data[j];
                    momentum[i][j] = mom * momentum[i][j] + g;
                    param.data[j] = param.data[j] - lr * momentum[i][j];
                }
            }
        }
        losses
    }

    #[test]
    fn baseline_mode_is_bit_identical_to_a_single_stage_loop() {
        let mut cfg = tiny_config().to_baseline();
        cfg.trainer.flip_augment = false;
        cfg.finalize().unwrap();
        let want = reference_baseline_losses(&cfg, 20);
        let mut t = Trainer::new(cfg).unwrap();
        for step in 0..20 {
            let r = t.next_step().unwrap();
            assert_eq!(r.total, want[step], "step {step}");
            assert_eq!(r.cls_stage_losses.len(), 1);
            assert_eq!(r.reg_stage_losses.len(), 1);
        }
    }

    #[test]
    fn loss_decreases_on_a_repeated_scene() {
        let mut cfg = tiny_config();
        cfg.data.train_count = 1;
        cfg.trainer.steps = 40;
        cfg.trainer.lr = 0.02;
        let mut t = Trainer::new(cfg).unwrap();
        let log = t.run().unwrap();
        let first = log[0].total;
        let last = log.last().unwrap().total;
        assert!(
            last < 0.7 * first,
            "loss did not decrease: first {first} last {last}"
        );
    }

    #[test]
    fn three_stage_training_runs() {
        let mut cfg = tiny_config();
        cfg.loss.num_cls_stages = 3;
        cfg.loss.num_reg_stages = 2;
        cfg.finalize().unwrap();
        cfg.validate().unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let r = t.next_step().unwrap();
        assert_eq!(r.cls_stage_losses.len(), 3);
        assert!(r.total.is_finite());
    }

    #[test]
    fn loss_curve_csv_has_one_row_per_step() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        let log = t.run().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_curve(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), log.len() + 1);
        assert!(text.starts_with("step,total,cls_stage1,cls_stage2,reg_stage1,reg_stage2,n_cls"));
    }

    #[test]
    fn untrained_model_evaluates_to_finite_ap() {
        let cfg = tiny_config();
        let t = Trainer::new(cfg.clone()).unwrap();
        let r = evaluate_split(&t.model, &cfg, Split::Val, cfg.data.val_count).unwrap();
        assert!(r.ap.is_finite());
        assert!((0.0..=1.0).contains(&r.ap));
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let cfg = tiny_config();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.run().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        crate::tensor::checkpoint::save(&path, &t.model.params).unwrap();

        let mut fresh = Trainer::new(cfg.clone()).unwrap();
        crate::tensor::checkpoint::load_into(&path, &mut fresh.model.params).unwrap();
        let scene = split_scene(&cfg.scene, Split::Test, 0);
        let side = cfg.scene.image_side;
        let a = t.model.forward_image(&scene.pixels, side, side).unwrap();
        let b = fresh.model.forward_image(&scene.pixels, side, side).unwrap();
        assert_eq!(a.cls_logits.value(), b.cls_logits.value());
        assert_eq!(a.offsets_stage1.value(), b.offsets_stage1.value());
    }
}

//! Whole-experiment configuration: a line-oriented `dotted.key = value`
//! format with hard errors on unknown keys, so single-key ablations cannot
//! be invalidated by typos.

use std::path::Path;

use crate::anchors::{AnchorConfig, LevelSpec};
use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::losses::LossConfig;
use crate::scalar::Real;
use crate::synthdata::SceneSpec;
use crate::targets::MatchThresholds;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig<T: Real = f64> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    pub steps: usize,
    pub seed: u64,
    /// Mirror scenes horizontally with probability 0.5 during training.
    pub flip_augment: bool,
}

impl<T: Real> Default for TrainerConfig<T> {
    fn default() -> Self {
        TrainerConfig {
            lr: T::c(0.005),
            momentum: T::c(0.9),
            weight_decay: T::c(1e-4),
            steps: 5000,
            seed: 0,
            flip_augment: true,
        }
    }
}

impl<T: Real> TrainerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= T::zero() {
            return Err(Error::invalid("trainer.lr must be positive"));
        }
        if self.momentum < T::zero() || self.momentum >= T::one() {
            return Err(Error::invalid("trainer.momentum must be in [0, 1)"));
        }
        if self.weight_decay < T::zero() {
            return Err(Error::invalid("trainer.weight_decay must be non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("trainer.steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_count: 500, val_count: 100, test_count: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig<T: Real = f64> {
    pub anchors: AnchorConfig<T>,
    /// Matching thresholds per stage; index 0 matches original anchors.
    pub matching: Vec<MatchThresholds<T>>,
    pub loss: LossConfig<T>,
    pub model: ModelConfig<T>,
    pub inference: InferenceConfig<T>,
    pub scene: SceneSpec<T>,
    pub data: DataConfig,
    pub trainer: TrainerConfig<T>,
}

impl<T: Real> Default for ExperimentConfig<T> {
    fn default() -> Self {
        ExperimentConfig {
            anchors: AnchorConfig::default(),
            matching: vec![MatchThresholds::stage1_default(), MatchThresholds::stage2_default()],
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            inference: InferenceConfig::default(),
            scene: SceneSpec::default(),
            data: DataConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

fn default_stage<T: Real>(index: usize) -> Result<MatchThresholds<T>> {
    match index {
        0 => Ok(MatchThresholds::stage1_default()),
        1 => Ok(MatchThresholds::stage2_default()),
        2 => Ok(MatchThresholds::stage3_default()),
        _ => Err(Error::config("no default matching thresholds beyond stage 3")),
    }
}

impl<T: Real> ExperimentConfig<T> {
    /// Number of target-assignment stages the losses consume.
    pub fn num_stages(&self) -> usize {
        self.loss.num_cls_stages.max(self.loss.num_reg_stages)
    }

    /// Syncs derived fields and pads `matching` with per-stage defaults.
    /// Always called by the parser; call it after programmatic edits too.
    pub fn finalize(&mut self) -> Result<()> {
        self.model.num_classes = self.scene.num_classes;
        self.model.in_channels = 1;
        self.model.with_second_reg = self.loss.num_reg_stages >= 2;
        if !self.model.with_second_reg {
            self.inference.apply_second_regression = false;
        }
        while self.matching.len() < self.num_stages() {
            self.matching.push(default_stage(self.matching.len())?);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        self.loss.validate()?;
        self.model.validate(&self.anchors)?;
        self.inference.validate()?;
        self.scene.validate()?;
        self.trainer.validate()?;
        if self.matching.len() < self.num_stages() {
            return Err(Error::invalid(format!(
                "{} matching stages configured, losses need {}",
                self.matching.len(),
                self.num_stages()
            )));
        }
        for m in &self.matching {
            m.validate()?;
        }
        if self.loss.num_cls_stages > 3 {
            return Err(Error::invalid("at most 3 classification stages are supported"));
        }
        if self.inference.apply_second_regression && !self.model.with_second_reg {
            return Err(Error::invalid(
                "inference.apply_second_regression needs two regression stages",
            ));
        }
        if self.data.train_count == 0 || self.data.val_count == 0 || self.data.test_count == 0 {
            return Err(Error::invalid("data split counts must be positive"));
        }
        if self.scene.image_side % self.anchors.levels.iter().map(|l| l.stride).max().unwrap_or(1)
            != 0
        {
            return Err(Error::invalid(
                "scene.image_side must be divisible by the largest anchor stride",
            ));
        }
        Ok(())
    }

    /// The ablation counterpart: single-stage training with the refined
    /// terms removed and single-step inference.
    pub fn to_baseline(&self) -> Self {
        let mut c = self.clone();
        c.loss.alpha = T::zero();
        c.loss.num_cls_stages = 1;
        c.loss.num_reg_stages = 1;
        c.model.with_second_reg = false;
        c.inference.apply_second_regression = false;
        c
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut strides: Option<Vec<usize>> = None;
        let mut base_sizes: Option<Vec<T>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set_key(key, value, &mut strides, &mut base_sizes).map_err(|e| {
                let msg = match e {
                    Error::Config(m) | Error::InvalidArgument(m) => m,
                    other => other.to_string(),
                };
                Error::config(format!("line {}: {msg}", lineno + 1))
            })?;
        }
        match (strides, base_sizes) {
            (None, None) => {}
            (Some(s), Some(b)) if s.len() == b.len() && !s.is_empty() => {
                cfg.anchors.levels = s
                    .into_iter()
                    .zip(b)
                    .map(|(stride, base_size)| LevelSpec { stride, base_size })
                    .collect();
            }
            _ => {
                return Err(Error::config(
                    "anchors.strides and anchors.base_sizes must both be set, same length",
                ))
            }
        }
        cfg.finalize()?;
        cfg.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    fn set_key(
        &mut self,
        key: &str,
        value: &str,
        strides: &mut Option<Vec<usize>>,
        base_sizes: &mut Option<Vec<T>>,
    ) -> Result<()> {
        fn real<T: Real>(v: &str) -> Result<T> {
            v.parse::<f64>().map(T::c).map_err(|_| Error::config(format!("bad number {v:?}")))
        }
        fn int(v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::config(format!("bad integer {v:?}")))
        }
        fn long(v: &str) -> Result<u64> {
            v.parse().map_err(|_| Error::config(format!("bad integer {v:?}")))
        }
        fn boolean(v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::config(format!("bad boolean {v:?}, use true or false"))),
            }
        }
        fn real_list<T: Real>(v: &str) -> Result<Vec<T>> {
            v.split(',').map(|p| real(p.trim())).collect()
        }
        fn int_list(v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|p| int(p.trim())).collect()
        }
        // matching stages are padded with defaults up to the touched index
        fn stage<'a, T: Real>(
            cfg: &'a mut ExperimentConfig<T>,
            idx: usize,
        ) -> Result<&'a mut MatchThresholds<T>> {
            while cfg.matching.len() <= idx {
                let next = default_stage(cfg.matching.len())?;
                cfg.matching.push(next);
            }
            Ok(&mut cfg.matching[idx])
        }
        match key {
            "anchors.strides" => *strides = Some(int_list(value)?),
            "anchors.base_sizes" => *base_sizes = Some(real_list(value)?),
            "anchors.scales" => self.anchors.scales = real_list(value)?,
            "anchors.aspect_ratios" => self.anchors.aspect_ratios = real_list(value)?,
            "match.stage1.mu_pos" => stage(self, 0)?.mu_pos = real(value)?,
            "match.stage1.mu_neg" => stage(self, 0)?.mu_neg = real(value)?,
            "match.stage2.mu_pos" => stage(self, 1)?.mu_pos = real(value)?,
            "match.stage2.mu_neg" => stage(self, 1)?.mu_neg = real(value)?,
            "match.stage3.mu_pos" => stage(self, 2)?.mu_pos = real(value)?,
            "match.stage3.mu_neg" => stage(self, 2)?.mu_neg = real(value)?,
            "loss.alpha" => self.loss.alpha = real(value)?,
            "loss.focal_gamma" => self.loss.focal_gamma = real(value)?,
            "loss.focal_alpha" => self.loss.focal_alpha = real(value)?,
            "loss.num_cls_stages" => self.loss.num_cls_stages = int(value)?,
            "loss.num_reg_stages" => self.loss.num_reg_stages = int(value)?,
            "loss.smooth_l1_beta" => self.loss.smooth_l1_beta = real(value)?,
            "loss.shared_cls_norm" => self.loss.shared_cls_norm = boolean(value)?,
            "model.backbone_channels" => self.model.backbone_channels = int_list(value)?,
            "model.trunk_channels" => self.model.trunk_channels = int(value)?,
            "model.trunk_depth" => self.model.trunk_depth = int(value)?,
            "model.cls_bias_prior" => self.model.cls_bias_prior = real(value)?,
            "inference.apply_second_regression" => {
                self.inference.apply_second_regression = boolean(value)?
            }
            "inference.score_threshold" => self.inference.score_threshold = real(value)?,
            "inference.pre_nms_topk" => self.inference.pre_nms_topk = int(value)?,
            "inference.nms_iou" => self.inference.nms_iou = real(value)?,
            "inference.max_detections" => self.inference.max_detections = int(value)?,
            "scene.image_side" => self.scene.image_side = int(value)?,
            "scene.num_classes" => self.scene.num_classes = int(value)?,
            "scene.min_objects" => self.scene.min_objects = int(value)?,
            "scene.max_objects" => self.scene.max_objects = int(value)?,
            "scene.min_size" => self.scene.min_size = real(value)?,
            "scene.max_size" => self.scene.max_size = real(value)?,
            "scene.occlusion_rate" => self.scene.occlusion_rate = real(value)?,
            "scene.seed" => self.scene.seed = long(value)?,
            "data.train_count" => self.data.train_count = int(value)?,
            "data.val_count" => self.data.val_count = int(value)?,
            "data.test_count" => self.data.test_count = int(value)?,
            "trainer.lr" => self.trainer.lr = real(value)?,
            "trainer.momentum" => self.trainer.momentum = real(value)?,
            "trainer.weight_decay" => self.trainer.weight_decay = real(value)?,
            "trainer.steps" => self.trainer.steps = int(value)?,
            "trainer.seed" => self.trainer.seed = long(value)?,
            "trainer.flip_augment" => self.trainer.flip_augment = boolean(value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

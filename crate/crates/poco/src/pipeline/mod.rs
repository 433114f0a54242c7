//! End-to-end orchestration: contrastive pretraining on unlabeled images,
//! frozen-backbone fine-tuning on labels, evaluation, and checkpoint
//! persistence.
//!
//! A [`TrainConfig`] drives both loops. Pretraining builds a positive
//! pair per image, optionally polar-warps both views (augment first, then
//! warp), runs a three-stage contrastive loss over progressively harder
//! negatives, and steps Adam. Fine-tuning freezes the backbone, replays
//! its cached pooled features through the head and classifier layers
//! under cross-entropy, and keeps the parameters with the best validation
//! accuracy. Everything is seeded: the same config produces bit-identical
//! checkpoints, loss CSVs and reports on every run, independent of the
//! worker count.

mod checkpoint;
mod history;
mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, MAGIC, VERSION,
};
pub use history::{
    val_curve_to_csv, write_val_curve, BatchRecord, LossHistory, ValPoint, LOSS_CSV_HEADER,
    VAL_CSV_HEADER,
};
pub use train::{
    evaluate_checkpoint, feature_matrix, finetune, pretrain, EvalOutput, PHASE_FINETUNED,
    PHASE_PRETRAINED,
};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::contrastive::{
    derive_stage_plans, FeatureSource, RankingView, StagePlan, Temperature,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

/// Hyper-parameters for one training run (pretraining or fine-tuning).
///
/// The JSON form uses exactly these field names; unknown keys are
/// rejected so config typos fail loudly instead of silently using a
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// override for the derived (n−1, n/2−1, n/4−1) negative counts
    #[serde(default)]
    pub stage_negatives: Option<[usize; 3]>,
    /// polar-warp both views after augmentation
    #[serde(default = "default_true")]
    pub use_polar: bool,
    /// false: train on the stage-1 loss alone
    #[serde(default = "default_true")]
    pub use_pcl: bool,
    #[serde(default)]
    pub ranking_view: RankingView,
    /// draw each stage's negatives from the previous stage's survivors
    #[serde(default = "default_true")]
    pub nested_selection: bool,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// threads preparing augmented views; never changes the result
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_batch_size() -> usize {
    64
}

fn default_tau() -> f64 {
    0.5
}

fn default_learning_rate() -> f64 {
    1e-4
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_true() -> bool {
    true
}

fn default_workers() -> usize {
    1
}

impl TrainConfig {
    /// Desk-scale defaults: batch 32 around the given model.
    pub fn desk(model: ModelConfig, epochs: usize) -> Self {
        TrainConfig {
            model,
            epochs,
            batch_size: 32,
            seed: 0,
            tau: default_tau(),
            learning_rate: default_learning_rate(),
            weight_decay: default_weight_decay(),
            stage_negatives: None,
            use_polar: true,
            use_pcl: true,
            ranking_view: RankingView::default(),
            nested_selection: true,
            augment: AugmentConfig::default(),
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        Temperature::new(self.tau)?;
        self.adam().validate()?;
        self.stage_plans()?;
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1".to_string()));
        }
        Ok(())
    }

    /// The three-stage schedule: derived from the batch size unless
    /// `stage_negatives` overrides the counts. Later stages may never
    /// grow, and stage 1 must use the full set.
    pub fn stage_plans(&self) -> Result<[StagePlan; 3]> {
        let derived = derive_stage_plans(self.batch_size)?;
        let Some(counts) = self.stage_negatives else {
            return Ok(derived);
        };
        let sources = [FeatureSource::F, FeatureSource::H1, FeatureSource::H2];
        let mut plans = [derived[0]; 3];
        for (t, (&n_neg, source)) in counts.iter().zip(sources).enumerate() {
            plans[t] = StagePlan { stage: t + 1, n_neg, source };
            plans[t].validate(self.batch_size)?;
            if t > 0 && n_neg > plans[t - 1].n_neg {
                return Err(Error::config(format!(
                    "stage {} keeps {} negatives, more than stage {}'s {}",
                    t + 1,
                    n_neg,
                    t,
                    plans[t - 1].n_neg
                )));
            }
        }
        Ok(plans)
    }

    pub fn temperature(&self) -> Result<Temperature> {
        Temperature::new(self.tau)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneKind, ProbeOn};

    fn model_json() -> &'static str {
        r#"{"backbone": "tiny", "input_size": 32, "dims": [64, 32, 16], "num_classes": 3}"#
    }

    #[test]
    fn minimal_json_gets_the_documented_defaults() {
        let cfg = TrainConfig::from_json_str(&format!(
            r#"{{"model": {}, "epochs": 5}}"#,
            model_json()
        ))
        .unwrap();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.stage_negatives, None);
        assert!(cfg.use_polar && cfg.use_pcl && cfg.nested_selection);
        assert_eq!(cfg.ranking_view, RankingView::KeyToKey);
        assert_eq!(cfg.augment, AugmentConfig::default());
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.model.backbone, BackboneKind::Tiny);
        assert_eq!(cfg.model.probe_on, ProbeOn::F);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = TrainConfig::from_json_str(&format!(
            r#"{{"model": {}, "epochs": 5, "batchsize": 32}}"#,
            model_json()
        ))
        .unwrap_err();
        assert!(err.to_string().contains("batchsize"), "{err}");
    }

    #[test]
    fn derived_plans_match_the_batch_size() {
        let mut cfg = TrainConfig::desk(ModelConfig::desk(32, 3), 1);
        cfg.batch_size = 64;
        let plans = cfg.stage_plans().unwrap();
        assert_eq!([plans[0].n_neg, plans[1].n_neg, plans[2].n_neg], [63, 31, 15]);
        assert_eq!(
            [plans[0].source, plans[1].source, plans[2].source],
            [FeatureSource::F, FeatureSource::H1, FeatureSource::H2]
        );
        cfg.batch_size = 32;
        let plans = cfg.stage_plans().unwrap();
        assert_eq!([plans[0].n_neg, plans[1].n_neg, plans[2].n_neg], [31, 15, 7]);
    }

    #[test]
    fn batch_size_must_be_a_positive_multiple_of_four() {
        let mut cfg = TrainConfig::desk(ModelConfig::desk(32, 3), 1);
        for bad in [0, 2, 6, 30] {
            cfg.batch_size = bad;
            assert!(cfg.validate().is_err(), "batch {bad} accepted");
        }
        cfg.batch_size = 4;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn stage_overrides_are_checked() {
        let mut cfg = TrainConfig::desk(ModelConfig::desk(32, 3), 1);
        cfg.stage_negatives = Some([31, 15, 7]);
        assert!(cfg.validate().is_ok());
        cfg.stage_negatives = Some([31, 9, 3]);
        assert!(cfg.validate().is_ok());
        // stage 1 must keep the full set
        cfg.stage_negatives = Some([30, 15, 7]);
        assert!(cfg.validate().is_err());
        // stages may not grow
        cfg.stage_negatives = Some([31, 7, 15]);
        assert!(cfg.validate().is_err());
        // cannot exceed batch − 1
        cfg.stage_negatives = Some([31, 32, 7]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_hyperparameters_are_rejected() {
        let base = TrainConfig::desk(ModelConfig::desk(32, 3), 1);
        let mut cfg = base.clone();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base.clone();
        cfg.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base.clone();
        cfg.workers = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = base;
        cfg.augment.flip_prob = 2.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_roundtrip_preserves_the_config() {
        let mut cfg = TrainConfig::desk(ModelConfig::desk(64, 5), 30);
        cfg.stage_negatives = Some([31, 9, 3]);
        cfg.use_polar = false;
        let text = cfg.to_json_string().unwrap();
        let back = TrainConfig::from_json_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}

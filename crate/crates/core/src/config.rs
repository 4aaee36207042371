//! Experiment configuration.
//!
//! Stored as JSON; unknown keys are rejected so a typo cannot silently fall
//! back to a default.

use crate::channel::GroupLayout;
use crate::data::{DatasetName, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::policy::TemperatureSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Keep the source encoder and the policy network fixed.
    #[serde(default)]
    pub freeze_source_and_policy: bool,
}

/// How test-time rate decisions are taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    /// Most likely option.
    #[default]
    Argmax,
    /// Gumbel-Max draw under a fixed seed.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    /// Directory holding the CIFAR-10 binary batches; falls back to the
    /// `ADJSCC_DATA_DIR` environment variable when absent.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    /// Split sizes for the synthetic generator.
    #[serde(default)]
    pub synthetic_train: Option<usize>,
    #[serde(default)]
    pub synthetic_test: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub g_selective: usize,
    pub g_nonselective: usize,
    pub group_length: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Channels of the source feature map (`C_s`).
    pub source_channels: usize,
    /// Channels between the two source-encoder convolutions.
    pub source_hidden: usize,
    pub policy_hidden: usize,
    /// Weight of the channel-usage term.
    pub alpha: f64,
    pub stages: Vec<StageConfig>,
    pub batch_size: usize,
    pub temperature: TemperatureSchedule,
    pub snr_train_db: [f64; 2],
    pub eval_snrs_db: Vec<f64>,
    /// Test images used for per-epoch curve evaluation.
    pub eval_subset: usize,
    /// Evaluate every this many epochs (0 = after the final epoch only).
    pub eval_every: usize,
    pub eval_decision: DecisionMode,
    pub seed: u64,
    pub dataset: DatasetConfig,
}

impl ExperimentConfig {
    /// The published CIFAR-10 setup: 150 + 150 + 100 epochs, batch 128.
    pub fn paper() -> Self {
        Self {
            g_selective: 4,
            g_nonselective: 4,
            group_length: 128,
            image_height: 32,
            image_width: 32,
            source_channels: 64,
            source_hidden: 32,
            policy_hidden: 64,
            alpha: 5e-4,
            stages: vec![
                StageConfig {
                    epochs: 150,
                    learning_rate: 5e-4,
                    freeze_source_and_policy: false,
                },
                StageConfig {
                    epochs: 150,
                    learning_rate: 5e-5,
                    freeze_source_and_policy: false,
                },
                StageConfig {
                    epochs: 100,
                    learning_rate: 5e-5,
                    freeze_source_and_policy: true,
                },
            ],
            batch_size: 128,
            temperature: TemperatureSchedule::default(),
            snr_train_db: [0.0, 20.0],
            eval_snrs_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            eval_subset: 1000,
            eval_every: 1,
            eval_decision: DecisionMode::Argmax,
            seed: 0,
            dataset: DatasetConfig {
                name: DatasetName::Cifar10,
                path: None,
                train_subset: None,
                test_subset: None,
                synthetic_train: None,
                synthetic_test: None,
            },
        }
    }

    /// A two-epoch run on 256 small synthetic images.
    pub fn smoke() -> Self {
        let mut c = Self::paper();
        c.image_height = 16;
        c.image_width = 16;
        c.group_length = 32;
        c.source_channels = 16;
        c.source_hidden = 8;
        c.policy_hidden = 16;
        c.stages = vec![
            StageConfig {
                epochs: 1,
                learning_rate: 1e-3,
                freeze_source_and_policy: false,
            },
            StageConfig {
                epochs: 1,
                learning_rate: 1e-3,
                freeze_source_and_policy: false,
            },
        ];
        c.batch_size = 32;
        c.eval_subset = 64;
        c.eval_every = 1;
        c.dataset = DatasetConfig {
            name: DatasetName::Synthetic,
            path: None,
            train_subset: None,
            test_subset: None,
            synthetic_train: Some(256),
            synthetic_test: Some(64),
        };
        c
    }

    /// Reduced-scale experiment on 16x16 synthetic images: 30 + 30 + 20
    /// epochs over 5000 training images.
    pub fn desk() -> Self {
        let mut c = Self::smoke();
        c.source_channels = 32;
        c.source_hidden = 16;
        c.policy_hidden = 64;
        c.stages = vec![
            StageConfig {
                epochs: 30,
                learning_rate: 2e-3,
                freeze_source_and_policy: false,
            },
            StageConfig {
                epochs: 30,
                learning_rate: 5e-4,
                freeze_source_and_policy: false,
            },
            StageConfig {
                epochs: 20,
                learning_rate: 5e-4,
                freeze_source_and_policy: true,
            },
        ];
        c.eval_subset = 200;
        c.eval_every = 10;
        c.dataset.synthetic_train = Some(5000);
        c.dataset.synthetic_test = Some(1000);
        c
    }

    /// The published architecture on a CIFAR-10 subset (5000 train, 1000
    /// test) with the schedule compressed to 30 + 30 + 20 epochs.
    pub fn desk_cifar() -> Self {
        let mut c = Self::paper();
        for (s, e) in c.stages.iter_mut().zip([30, 30, 20]) {
            s.epochs = e;
        }
        c.eval_every = 10;
        c.dataset.train_subset = Some(5000);
        c.dataset.test_subset = Some(1000);
        c
    }

    /// Looks up a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "desk-cifar" => Ok(Self::desk_cifar()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected paper, desk, desk-cifar or smoke)"
            ))),
        }
    }

    /// Where to read one split from, per the `dataset` section.
    pub fn dataset_spec(&self, split: Split) -> DatasetSpec {
        let d = &self.dataset;
        let (subset, synthetic_size) = match split {
            Split::Train => (d.train_subset, d.synthetic_train.unwrap_or(1000)),
            Split::Test => (d.test_subset, d.synthetic_test.unwrap_or(200)),
        };
        DatasetSpec {
            name: d.name,
            path: d.path.as_ref().map(Into::into),
            split,
            subset,
            seed: self.seed,
            synthetic_size,
            height: self.image_height,
            width: self.image_width,
        }
    }

    pub fn layout(&self) -> Result<GroupLayout> {
        GroupLayout::new(self.g_selective, self.g_nonselective, self.group_length)
    }

    /// Spatial size of the source feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.image_height / 4, self.image_width / 4)
    }

    /// Output channels of the channel encoder's projection before reshaping.
    pub fn projection_channels(&self) -> usize {
        let (h, w) = self.feature_hw();
        (self.g_selective + self.g_nonselective) * self.group_length / (h * w).max(1)
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.layout()?;
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if !self.image_height.is_multiple_of(4) || !self.image_width.is_multiple_of(4) {
            return bad(format!(
                "image {}x{} is not divisible by the source encoder's stride of 4",
                self.image_height, self.image_width
            ));
        }
        let (h, w) = self.feature_hw();
        let total = (self.g_selective + self.g_nonselective) * self.group_length;
        if !total.is_multiple_of(h * w) {
            return bad(format!(
                "{total} channel features do not fold into a {h}x{w} feature map"
            ));
        }
        for (name, v) in [
            ("source_channels", self.source_channels),
            ("source_hidden", self.source_hidden),
            ("policy_hidden", self.policy_hidden),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be a finite non-negative number, got {}", self.alpha));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.epochs == 0) {
            return bad("every stage needs at least one epoch".into());
        }
        if self
            .stages
            .iter()
            .any(|s| !(s.learning_rate > 0.0 && s.learning_rate.is_finite()))
        {
            return bad("learning rates must be positive".into());
        }
        let [lo, hi] = self.snr_train_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!("SNR range [{lo}, {hi}] is empty"));
        }
        if self.eval_snrs_db.iter().any(|s| !s.is_finite()) {
            return bad("evaluation SNRs must be finite".into());
        }
        let t = &self.temperature;
        if !(t.initial > 0.0 && t.floor > 0.0 && t.decay >= 0.0) {
            return bad("temperature schedule must be positive and non-increasing".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

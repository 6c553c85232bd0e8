//! The training loop: seeded shuffling, per-batch drop-feature masks, one
//! joint forward/backward pass over all views and a single Adam step on the
//! union of their parameters.
//!
//! `epochs` counts passes over the data; every epoch visits all samples in
//! batches of `batch_size`, keeping a shorter final batch.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::sample_mask;
use crate::checkpoint::save_checkpoint;
use crate::consensus::{total_loss, CodingMode, ConsensusWeights, LossBreakdown, LossOptions};
use crate::data::{split_batches, MultiviewDataset};
use crate::error::{HcnError, Result};
use crate::model::{forward_all, Architecture, HcnModel};
use crate::nn::{AdamConfig, AdamState, Parameterized};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Drop rate of the feature masks.
    pub rho: f64,
    pub seed: u64,
    /// Cosine (row-normalized) alignment in the global term; off uses the raw trace.
    pub normalize_global: bool,
    pub coding_mode: CodingMode,
    /// Off trains without the reconstruction term.
    pub reconstruction: bool,
    pub adam: AdamConfig,
    pub weights: ConsensusWeights,
    pub architecture: Architecture,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 200,
            batch_size: 256,
            rho: 0.10,
            seed: 0,
            normalize_global: true,
            coding_mode: CodingMode::WeakToStrong,
            reconstruction: true,
            adam: AdamConfig::default(),
            weights: ConsensusWeights::default(),
            architecture: Architecture::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(HcnError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(HcnError::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(HcnError::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        self.weights.validate()?;
        let AdamConfig { lr, beta1, beta2, eps } = self.adam;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(HcnError::Config(format!("learning rate must be finite and nonnegative, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(HcnError::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(HcnError::Config(format!("adam eps must be positive, got {eps}")));
        }
        if self.architecture.d_out == 0 || self.architecture.hidden.contains(&0) {
            return Err(HcnError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            normalize_global: self.normalize_global,
            coding_mode: self.coding_mode,
            reconstruction: self.reconstruction,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: TrainingConfig = toml::from_str(text).map_err(|e| HcnError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(HcnError::MissingFile {
                what: "config".into(),
                path: path.to_path_buf(),
            });
        }
        let text = fs::read_to_string(path).map_err(|e| HcnError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HcnError::Config(m) => HcnError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub const PRESETS: [&str; 4] = ["caltech101-20", "scene-15", "landuse-21", "noisy-mnist"];

/// Published two-view settings for the four benchmark datasets, on top of the defaults.
pub fn preset_config(name: &str) -> Result<TrainingConfig> {
    let (alpha, beta, gamma, lambda1, lambda2, d_out, rho) = match name {
        "caltech101-20" => (3.0, 3.0, 8.0, 0.1, 0.1, 128, 0.10),
        "scene-15" => (3.8, 2.7, 2.2, 0.01, 1.0, 128, 0.08),
        "landuse-21" => (3.0, 3.6, 9.5, 0.01, 5.0, 64, 0.08),
        "noisy-mnist" => (3.0, 3.0, 8.0, 0.3, 0.01, 64, 0.10),
        _ => {
            return Err(HcnError::UnknownPreset {
                name: name.to_string(),
                known: PRESETS.join(", "),
            })
        }
    };
    let mut config = TrainingConfig {
        rho,
        weights: ConsensusWeights {
            alpha,
            beta,
            gamma,
            lambda1,
            lambda2,
        },
        ..TrainingConfig::default()
    };
    config.architecture.d_out = d_out;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based epoch.
    pub epoch: usize,
    /// 1-based step, counted across epochs.
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub steps: Vec<StepRecord>,
    pub epoch_seconds: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainingHistory {
    /// Mean total loss of each epoch's steps.
    pub fn epoch_mean_totals(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for r in &self.steps {
            if sums.len() < r.epoch {
                sums.resize(r.epoch, (0.0, 0));
            }
            let s = &mut sums[r.epoch - 1];
            s.0 += r.loss.total;
            s.1 += 1;
        }
        sums.into_iter().map(|(s, c)| s / c.max(1) as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push('\n');
        for r in &self.steps {
            out.push_str(&r.loss.csv_row(r.epoch, r.step));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| HcnError::io(path, e))
    }
}

/// Initializes a model from `config.seed` and trains it; see [`train_model`].
pub fn train(
    dataset: &MultiviewDataset,
    config: &TrainingConfig,
    checkpoint: Option<&Path>,
) -> Result<(HcnModel, TrainingHistory)> {
    config.validate()?;
    let mut model = HcnModel::new(&dataset.view_dims(), &config.architecture, config.seed)?;
    let history = train_model(&mut model, dataset, config, checkpoint)?;
    Ok((model, history))
}

/// Runs `config.epochs` epochs on an existing model, then checkpoints it if a path is given.
pub fn train_model(
    model: &mut HcnModel,
    dataset: &MultiviewDataset,
    config: &TrainingConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainingHistory> {
    config.validate()?;
    if model.view_dims() != dataset.view_dims() {
        return Err(HcnError::InvalidArgument(format!(
            "model expects view widths {:?}, dataset has {:?}",
            model.view_dims(),
            dataset.view_dims()
        )));
    }
    let opts = config.loss_options();
    let dims = dataset.view_dims();
    let mut adam = AdamState::new(config.adam);
    let mut history = TrainingHistory::default();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let batches = split_batches(dataset.n_samples(), config.batch_size, config.seed, epoch as u64);
        let mut mask_rng = stream_rng(config.seed, Stream::Mask, epoch as u64);
        for indices in batches {
            step += 1;
            let batch = dataset.batch(&indices);
            let masks = dims
                .iter()
                .map(|&d| sample_mask(d, config.rho, &mut mask_rng))
                .collect::<Result<Vec<_>>>()?;
            let bundle = forward_all(model, &batch, &masks)?;
            let (loss, grads) = total_loss(&bundle, &batch, &config.weights, &opts)?;
            if let Some(term) = loss.first_non_finite() {
                return Err(HcnError::NonFiniteLoss { term, epoch, step });
            }
            model.zero_grad();
            model.backward(&bundle, &grads)?;
            adam.step(model);
            history.steps.push(StepRecord { epoch, step, loss });
        }
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    if let Some(path) = checkpoint {
        save_checkpoint(model, path, Some(config))?;
        history.checkpoint = Some(path.to_path_buf());
    }
    Ok(history)
}

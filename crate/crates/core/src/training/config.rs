use serde::{Deserialize, Serialize};

use crate::dataspec::{DatasetManifest, ModalityKind, ModalitySpec};
use crate::error::{Error, Result};
use crate::fusion::{MaskStrategy, Positional};
use crate::nn::Activation;
use crate::objectives::{ContrastiveMode, LossSwitches};

/// Which encoder outputs enter the contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveTokens {
    /// Every token's encoding, masked or not.
    #[default]
    All,
    /// Only tokens left unmasked (rows without an unmasked partner are dropped).
    Unmasked,
}

/// Every knob of a run. Serialises to the TOML config file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub ffn_mult: usize,
    pub buckets: usize,
    /// Largest grid side handled by the positional encodings.
    pub max_grid: usize,
    /// Pool factors for image codecs; empty means the prime factors of the
    /// patch side, largest first.
    pub image_pools: Vec<usize>,
    pub activation: Activation,

    pub gamma: f64,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    pub contrastive_tokens: ContrastiveTokens,

    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub probe_lr: f64,
    pub patience: usize,
    pub decay: f64,
    pub early_stop: usize,
    pub batch_tiles: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub label_fraction: f64,
    /// Modalities used at fine-tuning / evaluation; empty means all.
    pub modalities: Vec<String>,

    /// Masked image tokens unpool at the top-left instead of their trace.
    pub fixed_unpool: bool,
    pub date_filter: bool,
    pub date_fraction: f64,
    /// Series modalities subject to the date filter; empty means all.
    pub date_filter_modalities: Vec<String>,
    pub contrastive: ContrastiveMode,
    pub reconstruction: bool,
    pub positional: Positional,

    pub seed: u64,
    /// Record wall-clock seconds in metrics (breaks byte-identical logs).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 256,
            blocks: 6,
            heads: 8,
            key_dim: 8,
            ffn_mult: 4,
            buckets: 16,
            max_grid: 8,
            image_pools: Vec::new(),
            activation: Activation::Gelu,
            gamma: 0.1,
            mask_ratio: 0.5,
            mask_strategy: MaskStrategy::Random,
            contrastive_tokens: ContrastiveTokens::All,
            pretrain_lr: 1e-4,
            finetune_lr: 2e-5,
            probe_lr: 1e-3,
            patience: 10,
            decay: 0.1,
            early_stop: 30,
            batch_tiles: 128,
            pretrain_epochs: 100,
            finetune_epochs: 50,
            label_fraction: 1.0,
            modalities: Vec::new(),
            fixed_unpool: false,
            date_filter: true,
            date_fraction: 0.25,
            date_filter_modalities: Vec::new(),
            contrastive: ContrastiveMode::Full,
            reconstruction: true,
            positional: Positional::Relative,
            seed: 0,
            record_wall_time: false,
        }
    }
}

/// Architecture-defining subset of the configuration; a checkpoint only
/// loads into a model with an equal `ModelConfig`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: Vec<ModalitySpec>,
    pub num_classes: usize,
    pub cell_m: f64,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub ffn_mult: usize,
    pub buckets: usize,
    pub max_grid: usize,
    pub image_pools: Vec<usize>,
    pub activation: Activation,
    pub positional: Positional,
}

/// Prime factors of `n`, largest first (`50 -> [5, 5, 2]`).
pub fn default_pools(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while n > 1 {
        while n.is_multiple_of(p) {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    out.reverse();
    out
}

/// Names accepted by [`TrainConfig::ablate`].
pub const ABLATIONS: [&str; 8] = [
    "no-bypass",
    "no-date-filter",
    "no-contrastive",
    "naive-contrastive",
    "no-reconstruction",
    "spatial-mask",
    "modality-mask",
    "abs-pos",
];

impl TrainConfig {
    /// Switches one named ablation on.
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name {
            "no-bypass" => self.fixed_unpool = true,
            "no-date-filter" => self.date_filter = false,
            "no-contrastive" => self.contrastive = ContrastiveMode::Off,
            "naive-contrastive" => self.contrastive = ContrastiveMode::Naive,
            "no-reconstruction" => self.reconstruction = false,
            "spatial-mask" => self.mask_strategy = MaskStrategy::Spatial,
            "modality-mask" => self.mask_strategy = MaskStrategy::Modality,
            "abs-pos" => self.positional = Positional::Absolute,
            other => {
                return Err(Error::Config(format!("unknown ablation `{other}` (expected one of {})", ABLATIONS.join(", "))))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.pretrain_lr, self.finetune_lr, self.probe_lr, self.gamma];
        if rates.iter().any(|r| r.is_nan() || *r <= 0.0) {
            return Err(Error::Config("learning rates and gamma must be positive".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!("label_fraction {} outside (0, 1]", self.label_fraction)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if !(self.date_fraction > 0.0 && self.date_fraction <= 1.0) {
            return Err(Error::Config(format!("date_fraction {} outside (0, 1]", self.date_fraction)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1)", self.decay)));
        }
        if self.batch_tiles == 0 || self.patience == 0 {
            return Err(Error::Config("batch_tiles and patience must be positive".into()));
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) || !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!("d={} must be even and divisible by heads={}", self.d, self.heads)));
        }
        Ok(())
    }

    pub fn switches(&self) -> LossSwitches {
        LossSwitches { contrastive: self.contrastive, reconstruction: self.reconstruction }
    }

    pub fn model_config(&self, manifest: &DatasetManifest) -> Result<ModelConfig> {
        self.validate()?;
        let cfg = ModelConfig {
            modalities: manifest.modalities.clone(),
            num_classes: manifest.label_vocab.len(),
            cell_m: manifest.grid_cell_m,
            d: self.d,
            blocks: self.blocks,
            heads: self.heads,
            key_dim: self.key_dim,
            ffn_mult: self.ffn_mult,
            buckets: self.buckets,
            max_grid: self.max_grid,
            image_pools: self.image_pools.clone(),
            activation: self.activation,
            positional: self.positional,
        };
        for s in &cfg.modalities {
            if s.kind == ModalityKind::Image {
                cfg.pools_for(s)?;
            }
        }
        Ok(cfg)
    }

    /// Specs of the evaluation subset, in manifest order.
    pub fn selected_modalities(&self, all: &[ModalitySpec]) -> Result<Vec<ModalitySpec>> {
        if self.modalities.is_empty() {
            return Ok(all.to_vec());
        }
        for name in &self.modalities {
            if !all.iter().any(|s| &s.name == name) {
                return Err(Error::Config(format!("unknown modality `{name}`")));
            }
        }
        Ok(all.iter().filter(|s| self.modalities.contains(&s.name)).cloned().collect())
    }

    pub fn filters_dates(&self, modality: &str) -> bool {
        self.date_filter
            && (self.date_filter_modalities.is_empty() || self.date_filter_modalities.iter().any(|m| m == modality))
    }
}

impl ModelConfig {
    pub fn pools_for(&self, spec: &ModalitySpec) -> Result<Vec<usize>> {
        let pools = if self.image_pools.is_empty() {
            default_pools(spec.patch_side_px)
        } else {
            self.image_pools.clone()
        };
        if pools.is_empty() || pools.iter().product::<usize>() != spec.patch_side_px {
            return Err(Error::Config(format!(
                "pool factors {:?} do not collapse {}'s {} px patches",
                pools, spec.name, spec.patch_side_px
            )));
        }
        Ok(pools)
    }
}

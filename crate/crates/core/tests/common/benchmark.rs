//! Desk-scale pretraining benchmark: 2000 synthetic tiles, three
//! modalities, eight classes, 10% of the training labels.

use std::collections::BTreeMap;
use std::time::Instant;

use omnifuse_core::dataspec::{generate_synthetic, stratified_split, MultimodalTile, SyntheticConfig};
use omnifuse_core::training::{
    derive_seed, evaluate, finetune, label_subset, pretrain, EpochRecord, Model, Phase, TrainConfig, TrainState,
};
use omnifuse_core::Result;

pub const TILES: usize = 2000;
pub const PRETRAIN_EPOCHS: usize = 60;
pub const LABEL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct SeedScores {
    pub seed: u64,
    pub scratch: f64,
    pub pretrained: f64,
    /// Pretrained backbone fine-tuned on one modality.
    pub unimodal: Vec<(String, f64)>,
    pub secs: f64,
}

impl SeedScores {
    pub fn best_unimodal(&self) -> f64 {
        self.unimodal.iter().map(|u| u.1).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        d: 64,
        blocks: 2,
        heads: 4,
        batch_tiles: 16,
        pretrain_epochs: PRETRAIN_EPOCHS,
        finetune_epochs: 50,
        pretrain_lr: 1e-3,
        finetune_lr: 1e-3,
        label_fraction: LABEL_FRACTION,
        seed,
        ..Default::default()
    }
}

fn unlabeled(tiles: &[MultimodalTile]) -> Vec<MultimodalTile> {
    let mut out = tiles.to_vec();
    for t in &mut out {
        t.hide_labels();
    }
    out
}

pub fn run_seed(seed: u64) -> Result<SeedScores> {
    let start = Instant::now();
    let synth = SyntheticConfig { num_tiles: TILES, ..Default::default() };
    let ds = generate_synthetic(&synth, 1000 + seed)?;
    let labels: Vec<Option<Vec<u8>>> =
        ds.tiles.iter().map(|t| t.labels().map(|l| l.map(<[u8]>::to_vec))).collect::<Result<_>>()?;
    let shares: BTreeMap<String, f64> =
        [("train".to_string(), 0.7), ("val".to_string(), 0.1), ("test".to_string(), 0.2)].into();
    let manifest = stratified_split(&ds.manifest, &labels, &shares, seed)?;
    let split = |name: &str| -> Result<Vec<MultimodalTile>> {
        let ids = manifest.split(name)?;
        Ok(ds.tiles.iter().filter(|t| ids.contains(&t.tile_id)).cloned().collect())
    };
    let (train, val, test) = (split("train")?, split("val")?, split("test")?);

    let cfg = config(seed);
    let mc = cfg.model_config(&manifest)?;
    let mut noop = |_: &EpochRecord, _: &Model, _: &TrainState, _: bool| Ok(());

    let mut backbone = Model::new(mc.clone(), seed)?;
    let mut state = TrainState::new(&backbone, Phase::Pretrain, &cfg);
    pretrain(&mut backbone, &mut state, &unlabeled(&train), &unlabeled(&val), &cfg, &mut noop)?;

    let labeled = label_subset(&train, cfg.label_fraction, derive_seed(seed, &[6]))?;
    let tune = |init: Model, cfg: &TrainConfig| -> Result<f64> {
        let mut model = init;
        let mut state = TrainState::new(&model, Phase::Finetune, cfg);
        finetune(&mut model, &mut state, &labeled, &val, cfg, &mut |_, _, _, _| Ok(()))?;
        Ok(evaluate(&model, &test, cfg)?.1.weighted_f1)
    };
    let scratch = tune(Model::new(mc.clone(), seed)?, &cfg)?;
    let pretrained = tune(backbone.clone(), &cfg)?;
    let mut unimodal = Vec::new();
    for spec in &mc.modalities {
        let one = TrainConfig { modalities: vec![spec.name.clone()], ..cfg.clone() };
        unimodal.push((spec.name.clone(), tune(backbone.clone(), &one)?));
    }
    Ok(SeedScores { seed, scratch, pretrained, unimodal, secs: start.elapsed().as_secs_f64() })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

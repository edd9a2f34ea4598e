//! Deterministic synthetic tiles with a class-structured latent field.
//!
//! Every tile carries a per-patch class field (nearest of a few random seed
//! points). Each modality renders the class through its own signature bank:
//! the image modality uses a class mean colour plus an oriented texture, the
//! optical series a seasonal sinusoid with whole-date cloud saturation, and
//! the radar series a class-specific bump curve with multiplicative speckle.
//! A modality may use fewer signatures than classes, in which case a random
//! per-modality grouping makes some classes indistinguishable in that
//! modality alone.

use std::f64::consts::PI;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::store::LatentField;
use super::{DatasetManifest, ModalityData, ModalityKind, ModalitySpec, MultimodalTile, TileEntry, MANIFEST_VERSION};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySignal {
    pub name: String,
    pub channels: usize,
    /// Pixels per patch side (image) or 1 (series).
    pub patch_side_px: usize,
    /// Dates per series, drawn uniformly per tile (series only).
    pub min_len: usize,
    pub max_len: usize,
    /// Number of distinct class signatures this modality can express.
    pub signatures: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub num_tiles: usize,
    pub grid: [usize; 2],
    pub grid_cell_m: f64,
    /// Upper bound on latent seed points (regions) per tile.
    pub max_regions: usize,
    pub cloud_prob: f64,
    pub image: ModalitySignal,
    pub optical: ModalitySignal,
    pub radar: ModalitySignal,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 8,
            num_tiles: 200,
            grid: [2, 2],
            grid_cell_m: 10.0,
            max_regions: 3,
            cloud_prob: 0.2,
            image: ModalitySignal {
                name: "vhr".into(),
                channels: 3,
                patch_side_px: 4,
                min_len: 1,
                max_len: 1,
                signatures: 4,
                noise: 0.1,
            },
            optical: ModalitySignal {
                name: "optical_ts".into(),
                channels: 4,
                patch_side_px: 1,
                min_len: 8,
                max_len: 16,
                signatures: 4,
                noise: 0.05,
            },
            radar: ModalitySignal {
                name: "radar_ts".into(),
                channels: 2,
                patch_side_px: 1,
                min_len: 8,
                max_len: 16,
                signatures: 4,
                noise: 0.2,
            },
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 || self.num_tiles == 0 || self.grid[0] == 0 || self.grid[1] == 0 || self.max_regions == 0 {
            return bad("synthetic dimensions must be positive");
        }
        if self.grid_cell_m.is_nan() || self.grid_cell_m <= 0.0 {
            return bad("grid_cell_m must be positive");
        }
        if !(0.0..1.0).contains(&self.cloud_prob) {
            return bad("cloud probability must lie in [0, 1)");
        }
        for (m, series) in [(&self.image, false), (&self.optical, true), (&self.radar, true)] {
            if m.channels == 0 || m.patch_side_px == 0 || m.signatures == 0 {
                return Err(Error::Config(format!("modality `{}` has a zero dimension", m.name)));
            }
            if m.noise.is_nan() || m.noise < 0.0 {
                return Err(Error::Config(format!("modality `{}` noise must be >= 0", m.name)));
            }
            if series && (m.min_len == 0 || m.min_len > m.max_len || m.max_len > 365) {
                return Err(Error::Config(format!("series `{}` needs 1 <= min_len <= max_len <= 365", m.name)));
            }
        }
        let names = [&self.image.name, &self.optical.name, &self.radar.name];
        if names[0] == names[1] || names[0] == names[2] || names[1] == names[2] {
            return bad("modality names must be distinct");
        }
        Ok(())
    }

    pub fn modality_specs(&self) -> Vec<ModalitySpec> {
        let cell = self.grid_cell_m;
        vec![
            ModalitySpec::image(&self.image.name, self.image.channels, self.image.patch_side_px, cell / self.image.patch_side_px as f64),
            ModalitySpec::time_series(&self.optical.name, self.optical.channels, self.optical.max_len, cell),
            ModalitySpec::time_series(&self.radar.name, self.radar.channels, self.radar.max_len, cell),
        ]
    }
}

pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub tiles: Vec<MultimodalTile>,
    pub latent: Vec<LatentField>,
}

struct ImageSig {
    mean: Vec<f64>,
    freq: f64,
    angle: f64,
    amp: f64,
}

struct OpticalSig {
    base: Vec<f64>,
    amp: Vec<f64>,
    phase: f64,
}

struct RadarSig {
    base: Vec<f64>,
    bump: Vec<f64>,
    center: f64,
    width: f64,
}

struct ClassBank {
    image_group: Vec<usize>,
    optical_group: Vec<usize>,
    radar_group: Vec<usize>,
    image: Vec<ImageSig>,
    optical: Vec<OpticalSig>,
    radar: Vec<RadarSig>,
}

fn grouping(rng: &mut ChaCha8Rng, k: usize, groups: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);
    perm.into_iter().map(|p| p % groups.min(k)).collect()
}

impl ClassBank {
    fn new(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = cfg.num_classes;
        let image_group = grouping(rng, k, cfg.image.signatures);
        let optical_group = grouping(rng, k, cfg.optical.signatures);
        let radar_group = grouping(rng, k, cfg.radar.signatures);
        let image = (0..cfg.image.signatures.min(k))
            .map(|_| ImageSig {
                mean: (0..cfg.image.channels).map(|_| rng.random_range(0.15..0.85)).collect(),
                freq: rng.random_range(0.5..2.5),
                angle: rng.random_range(0.0..PI),
                amp: rng.random_range(0.05..0.25),
            })
            .collect();
        let optical = (0..cfg.optical.signatures.min(k))
            .map(|_| OpticalSig {
                base: (0..cfg.optical.channels).map(|_| rng.random_range(0.1..0.5)).collect(),
                amp: (0..cfg.optical.channels).map(|_| rng.random_range(0.05..0.3)).collect(),
                phase: rng.random_range(0.0..2.0 * PI),
            })
            .collect();
        let radar = (0..cfg.radar.signatures.min(k))
            .map(|_| RadarSig {
                base: (0..cfg.radar.channels).map(|_| rng.random_range(0.2..0.6)).collect(),
                bump: (0..cfg.radar.channels).map(|_| rng.random_range(-0.3..0.3)).collect(),
                center: rng.random_range(60.0..300.0),
                width: rng.random_range(20.0..60.0),
            })
            .collect();
        ClassBank { image_group, optical_group, radar_group, image, optical, radar }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn sample_days(rng: &mut ChaCha8Rng, min_len: usize, max_len: usize) -> Vec<u16> {
    let len = rng.random_range(min_len..=max_len);
    let mut days: Vec<u16> = index::sample(rng, 365, len).into_iter().map(|d| d as u16 + 1).collect();
    days.sort_unstable();
    days
}

/// Nearest-seed class per patch, row-major; ties go to the lower seed index.
fn latent_field(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Vec<usize> {
    let [gx, gy] = cfg.grid;
    let n_seeds = rng.random_range(1..=cfg.max_regions);
    let seeds: Vec<(f64, f64, usize)> = (0..n_seeds)
        .map(|_| {
            (
                rng.random_range(0.0..gx as f64),
                rng.random_range(0.0..gy as f64),
                rng.random_range(0..cfg.num_classes),
            )
        })
        .collect();
    let mut classes = Vec::with_capacity(gx * gy);
    for row in 0..gy {
        for col in 0..gx {
            let (cx, cy) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for &(sx, sy, k) in &seeds {
                let d = (sx - cx).powi(2) + (sy - cy).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            classes.push(best.1);
        }
    }
    classes
}

fn render_tile(cfg: &SyntheticConfig, bank: &ClassBank, seed: u64, index: usize) -> (MultimodalTile, LatentField) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let [gx, gy] = cfg.grid;
    let tile_id = format!("tile_{index:05}");
    let classes = latent_field(&mut rng, cfg);

    // Image: [C, gy*W, gx*W].
    let im = &cfg.image;
    let w = im.patch_side_px;
    let (h_px, w_px) = (gy * w, gx * w);
    let gain = rng.random_range(0.85..1.15);
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut img = vec![0f32; im.channels * h_px * w_px];
    for y in 0..h_px {
        for x in 0..w_px {
            let k = classes[(y / w) * gx + x / w];
            let sig = &bank.image[bank.image_group[k]];
            let proj = (x as f64 * sig.angle.cos() + y as f64 * sig.angle.sin()) / w as f64;
            let tex = sig.amp * (2.0 * PI * sig.freq * proj + phase).sin();
            for c in 0..im.channels {
                let v = gain * sig.mean[c] + tex + im.noise * normal(&mut rng);
                img[(c * h_px + y) * w_px + x] = v as f32;
            }
        }
    }

    // Optical series: [L, C, gy, gx], whole-date clouds.
    let op = &cfg.optical;
    let o_days = sample_days(&mut rng, op.min_len, op.max_len);
    let p = gx * gy;
    let mut optical = vec![0f32; o_days.len() * op.channels * p];
    for (t, &day) in o_days.iter().enumerate() {
        let cloudy = rng.random::<f64>() < cfg.cloud_prob;
        let season = 2.0 * PI * day as f64 / 365.0;
        for c in 0..op.channels {
            for cell in 0..p {
                let v = if cloudy {
                    1.2 + 0.05 * normal(&mut rng)
                } else {
                    let sig = &bank.optical[bank.optical_group[classes[cell]]];
                    sig.base[c] + sig.amp[c] * (season + sig.phase).sin() + op.noise * normal(&mut rng)
                };
                optical[(t * op.channels + c) * p + cell] = v as f32;
            }
        }
    }

    // Radar series: [L, C, gy, gx], multiplicative speckle.
    let ra = &cfg.radar;
    let r_days = sample_days(&mut rng, ra.min_len, ra.max_len);
    let mut radar = vec![0f32; r_days.len() * ra.channels * p];
    for (t, &day) in r_days.iter().enumerate() {
        for c in 0..ra.channels {
            for cell in 0..p {
                let sig = &bank.radar[bank.radar_group[classes[cell]]];
                let z = (day as f64 - sig.center) / sig.width;
                let clean = sig.base[c] + sig.bump[c] * (-z * z).exp();
                let v = clean * (1.0 + ra.noise * normal(&mut rng));
                radar[(t * ra.channels + c) * p + cell] = v as f32;
            }
        }
    }

    let mut labels = vec![0u8; cfg.num_classes];
    for &k in &classes {
        labels[k] = 1;
    }
    let arrays = vec![
        ModalityData {
            name: im.name.clone(),
            kind: ModalityKind::Image,
            shape: vec![im.channels, h_px, w_px],
            values: img,
            days: None,
        },
        ModalityData {
            name: op.name.clone(),
            kind: ModalityKind::TimeSeries,
            shape: vec![o_days.len(), op.channels, gy, gx],
            values: optical,
            days: Some(o_days),
        },
        ModalityData {
            name: ra.name.clone(),
            kind: ModalityKind::TimeSeries,
            shape: vec![r_days.len(), ra.channels, gy, gx],
            values: radar,
            days: Some(r_days),
        },
    ];
    let latent = LatentField { tile_id: tile_id.clone(), grid: [gx, gy], classes };
    (MultimodalTile::new(tile_id, (gx, gy), arrays, Some(labels)), latent)
}

/// Generates `cfg.num_tiles` tiles. Output is a pure function of
/// `(cfg, seed)`; tile `i` draws from its own RNG stream.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if cfg.optical.patch_side_px != 1 || cfg.radar.patch_side_px != 1 {
        return Err(Error::Config("synthetic series use one pixel per patch".into()));
    }
    let mut bank_rng = ChaCha8Rng::seed_from_u64(seed);
    bank_rng.set_stream(0);
    let bank = ClassBank::new(cfg, &mut bank_rng);
    let rendered: Vec<(MultimodalTile, LatentField)> =
        (0..cfg.num_tiles).into_par_iter().map(|i| render_tile(cfg, &bank, seed, i)).collect();
    let (tiles, latent): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        modalities: cfg.modality_specs(),
        label_vocab: (0..cfg.num_classes).map(|k| format!("class_{k}")).collect(),
        grid_cell_m: cfg.grid_cell_m,
        tiles: tiles
            .iter()
            .map(|t| TileEntry { tile_id: t.tile_id.clone(), path: format!("tiles/{}.omt", t.tile_id) })
            .collect(),
        splits: Default::default(),
    };
    Ok(SyntheticDataset { manifest, tiles, latent })
}

//! Dataset types: modality descriptors, multimodal tiles, the on-disk
//! manifest, a deterministic synthetic generator and stratified splitting.

mod omt;
mod split;
mod store;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use omt::{read_tile, write_tile, OMT_MAGIC, OMT_VERSION};
pub use split::{stratified_split, stratify};
pub use store::{load_dataset, save_dataset, write_latent_sidecar, AccessMode, DatasetReader, LatentField};
pub use synth::{generate_synthetic, ModalitySignal, SyntheticConfig, SyntheticDataset};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Image,
    TimeSeries,
}

/// Descriptor of one modality's input space.
///
/// `patch_side_px` is the number of pixels along one patch side. Images use
/// `W x W` pixel patches; time series normally use 1 (one pixel per grid
/// cell) but may carry a finer raster, in which case the sub-cells of a
/// patch are flattened into the channel axis at tokenization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    pub channels: usize,
    pub patch_side_px: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_length: Option<usize>,
    pub ground_resolution_m: f64,
}

impl ModalitySpec {
    pub fn image(name: &str, channels: usize, patch_side_px: usize, ground_resolution_m: f64) -> Self {
        ModalitySpec {
            name: name.to_string(),
            kind: ModalityKind::Image,
            channels,
            patch_side_px,
            max_length: None,
            ground_resolution_m,
        }
    }

    pub fn time_series(name: &str, channels: usize, max_length: usize, ground_resolution_m: f64) -> Self {
        ModalitySpec {
            name: name.to_string(),
            kind: ModalityKind::TimeSeries,
            channels,
            patch_side_px: 1,
            max_length: Some(max_length),
            ground_resolution_m,
        }
    }

    /// Channels seen by the encoder for one token.
    pub fn token_channels(&self) -> usize {
        match self.kind {
            ModalityKind::Image => self.channels,
            ModalityKind::TimeSeries => self.channels * self.patch_side_px * self.patch_side_px,
        }
    }

    /// Scalar count of one token, `dim(Omega^m)`, for a series of `len` dates.
    pub fn token_dim(&self, len: usize) -> usize {
        match self.kind {
            ModalityKind::Image => self.channels * self.patch_side_px * self.patch_side_px,
            ModalityKind::TimeSeries => self.token_channels() * len,
        }
    }

    pub fn validate(&self, grid_cell_m: f64) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("modality name is empty".into()));
        }
        if self.channels == 0 || self.patch_side_px == 0 {
            return Err(Error::Config(format!("modality `{}` has a zero dimension", self.name)));
        }
        if self.ground_resolution_m.is_nan() || self.ground_resolution_m <= 0.0 || !self.ground_resolution_m.is_finite() {
            return Err(Error::Config(format!("modality `{}` has a non-positive resolution", self.name)));
        }
        match (self.kind, self.max_length) {
            (ModalityKind::TimeSeries, None) | (ModalityKind::TimeSeries, Some(0)) => {
                return Err(Error::Config(format!("time series `{}` needs max_length >= 1", self.name)));
            }
            (ModalityKind::Image, Some(_)) => {
                return Err(Error::Config(format!("image `{}` cannot declare max_length", self.name)));
            }
            _ => {}
        }
        let footprint = self.patch_side_px as f64 * self.ground_resolution_m;
        if (footprint - grid_cell_m).abs() > 1e-6 * grid_cell_m.max(1.0) {
            return Err(Error::Config(format!(
                "modality `{}`: {} px x {} m = {} m does not match the {} m grid cell",
                self.name, self.patch_side_px, self.ground_resolution_m, footprint, grid_cell_m
            )));
        }
        Ok(())
    }
}

/// Raw payload of one modality for one tile.
///
/// Images are `[C, Gy*W, Gx*W]`. Time series are rasters over dates,
/// `[L, C, Gy*s, Gx*s]` with `s = patch_side_px`, plus one day-of-year
/// stamp per date shared by every pixel of the tile.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityData {
    pub name: String,
    pub kind: ModalityKind,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub days: Option<Vec<u16>>,
}

impl ModalityData {
    pub fn len_dates(&self) -> usize {
        match self.kind {
            ModalityKind::Image => 1,
            ModalityKind::TimeSeries => self.shape[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum LabelSlot {
    Absent,
    Present(Vec<u8>),
    Hidden,
}

/// One georeferenced multimodal sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalTile {
    pub tile_id: String,
    /// `(Gx, Gy)`: patches per side along x (columns) and y (rows).
    pub grid: (usize, usize),
    pub arrays: Vec<ModalityData>,
    labels: LabelSlot,
}

impl MultimodalTile {
    pub fn new(tile_id: impl Into<String>, grid: (usize, usize), arrays: Vec<ModalityData>, labels: Option<Vec<u8>>) -> Self {
        MultimodalTile {
            tile_id: tile_id.into(),
            grid,
            arrays,
            labels: match labels {
                Some(l) => LabelSlot::Present(l),
                None => LabelSlot::Absent,
            },
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn modality(&self, name: &str) -> Option<&ModalityData> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Multilabel target; fails when the tile was loaded in unlabeled mode.
    pub fn labels(&self) -> Result<Option<&[u8]>> {
        match &self.labels {
            LabelSlot::Absent => Ok(None),
            LabelSlot::Present(l) => Ok(Some(l)),
            LabelSlot::Hidden => Err(Error::LabelAccess(self.tile_id.clone())),
        }
    }

    /// Drops the target and makes any later [`labels`](Self::labels) call fail.
    pub fn hide_labels(&mut self) {
        self.labels = LabelSlot::Hidden;
    }

    pub(crate) fn raw_labels(&self) -> Option<&[u8]> {
        match &self.labels {
            LabelSlot::Present(l) => Some(l),
            _ => None,
        }
    }

    /// Checks the tile against the declared modalities.
    pub fn validate(&self, specs: &[ModalitySpec], num_classes: usize) -> Result<()> {
        let (gx, gy) = self.grid;
        if gx == 0 || gy == 0 {
            return Err(Error::Shape(format!("tile `{}` has an empty grid", self.tile_id)));
        }
        for spec in specs {
            let arr = self.modality(&spec.name).ok_or_else(|| {
                Error::Shape(format!("tile `{}` lacks modality `{}`", self.tile_id, spec.name))
            })?;
            if arr.kind != spec.kind {
                return Err(Error::Shape(format!("tile `{}` modality `{}` has the wrong kind", self.tile_id, spec.name)));
            }
            let s = spec.patch_side_px;
            let expect_tail = [spec.channels, gy * s, gx * s];
            let ok = match spec.kind {
                ModalityKind::Image => arr.shape == expect_tail,
                ModalityKind::TimeSeries => arr.shape.len() == 4 && arr.shape[1..] == expect_tail,
            };
            if !ok {
                return Err(Error::Shape(format!(
                    "tile `{}` modality `{}` has shape {:?}, grid {}x{} expects {:?}",
                    self.tile_id, spec.name, arr.shape, gx, gy, expect_tail
                )));
            }
            if arr.values.len() != arr.shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tile `{}` modality `{}` payload length", self.tile_id, spec.name)));
            }
            if let Some(bad) = arr.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tile `{}` modality `{}` index {bad}", self.tile_id, spec.name)));
            }
            if spec.kind == ModalityKind::TimeSeries {
                let days = arr.days.as_ref().ok_or_else(|| {
                    Error::Shape(format!("tile `{}` series `{}` has no timestamps", self.tile_id, spec.name))
                })?;
                let l = arr.shape[0];
                if days.len() != l || l == 0 || l > spec.max_length.unwrap_or(usize::MAX) {
                    return Err(Error::Shape(format!(
                        "tile `{}` series `{}` has {} dates / {} stamps (max {:?})",
                        self.tile_id,
                        spec.name,
                        l,
                        days.len(),
                        spec.max_length
                    )));
                }
                if days.iter().any(|d| !(1..=365).contains(d)) || days.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Shape(format!(
                        "tile `{}` series `{}` timestamps must be strictly increasing days in 1..=365",
                        self.tile_id, spec.name
                    )));
                }
            }
        }
        if let LabelSlot::Present(l) = &self.labels {
            if l.len() != num_classes || l.iter().any(|v| *v > 1) {
                return Err(Error::Shape(format!("tile `{}` label vector is not binary over {num_classes} classes", self.tile_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileEntry {
    pub tile_id: String,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub modalities: Vec<ModalitySpec>,
    pub label_vocab: Vec<String>,
    pub grid_cell_m: f64,
    pub tiles: Vec<TileEntry>,
    #[serde(default)]
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    pub fn spec(&self, name: &str) -> Option<&ModalitySpec> {
        self.modalities.iter().find(|m| m.name == name)
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invalid(format!("dataset has no split `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Version { what: "manifest", found: self.version, expected: MANIFEST_VERSION });
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("manifest declares no modalities".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            m.validate(self.grid_cell_m)?;
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("duplicate modality `{}`", m.name)));
            }
        }
        let mut known = std::collections::HashSet::new();
        for t in &self.tiles {
            if !known.insert(t.tile_id.as_str()) {
                return Err(Error::Config(format!("duplicate tile id `{}`", t.tile_id)));
            }
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, ids) in &self.splits {
            for id in ids {
                if !known.contains(id.as_str()) {
                    return Err(Error::MissingTile(id.clone()));
                }
                if let Some(prev) = seen.insert(id, split) {
                    return Err(Error::Config(format!("tile `{id}` is in both `{prev}` and `{split}`")));
                }
            }
        }
        Ok(())
    }
}

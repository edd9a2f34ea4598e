//! Dataset directory layout: `root/manifest.json` plus `root/tiles/<id>.omt`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::omt::{encode_tile, read_tile};
use super::{DatasetManifest, MultimodalTile};
use crate::error::{Error, Result};

/// Whether tiles handed out by a reader expose their labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessMode {
    Labeled,
    /// Labels are stripped and any attempt to read them is an error.
    Unlabeled,
}

/// Latent class field of a synthetic tile, one class per patch (row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentField {
    pub tile_id: String,
    pub grid: [usize; 2],
    pub classes: Vec<usize>,
}

pub fn save_dataset(manifest: &DatasetManifest, tiles: &[MultimodalTile], root: &Path) -> Result<()> {
    manifest.validate()?;
    if manifest.tiles.len() != tiles.len() {
        return Err(Error::Invalid(format!(
            "manifest lists {} tiles but {} were given",
            manifest.tiles.len(),
            tiles.len()
        )));
    }
    let specs = &manifest.modalities;
    for (entry, tile) in manifest.tiles.iter().zip(tiles) {
        if entry.tile_id != tile.tile_id {
            return Err(Error::Invalid(format!("manifest entry `{}` vs tile `{}`", entry.tile_id, tile.tile_id)));
        }
        tile.validate(specs, manifest.label_vocab.len())?;
    }
    let tiles_dir = root.join("tiles");
    fs::create_dir_all(&tiles_dir).map_err(|e| Error::io(&tiles_dir, e))?;
    let encoded: Vec<Vec<u8>> = tiles.par_iter().map(encode_tile).collect::<Result<_>>()?;
    for (entry, bytes) in manifest.tiles.iter().zip(encoded) {
        let path = root.join(&entry.path);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = root.join("manifest.json");
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn write_latent_sidecar(root: &Path, fields: &[LatentField]) -> Result<()> {
    let dir = root.join("tiles");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for f in fields {
        let path = dir.join(format!("{}.latent.json", f.tile_id));
        fs::write(&path, serde_json::to_vec(f)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, DatasetReader)> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.validate()?;
    let reader = DatasetReader { root: root.to_path_buf(), manifest: manifest.clone(), mode: AccessMode::Labeled };
    Ok((manifest, reader))
}

/// Lazy, read-only tile accessor. Safe to share across threads.
#[derive(Clone, Debug)]
pub struct DatasetReader {
    root: PathBuf,
    manifest: DatasetManifest,
    mode: AccessMode,
}

impl DatasetReader {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn mode(&self) -> AccessMode {
        self.mode
    }

    pub fn with_mode(&self, mode: AccessMode) -> Self {
        DatasetReader { mode, ..self.clone() }
    }

    pub fn tile(&self, tile_id: &str) -> Result<MultimodalTile> {
        let entry = self
            .manifest
            .tiles
            .iter()
            .find(|t| t.tile_id == tile_id)
            .ok_or_else(|| Error::MissingTile(tile_id.to_string()))?;
        let path = self.root.join(&entry.path);
        if !path.exists() {
            return Err(Error::MissingTile(tile_id.to_string()));
        }
        let mut tile = read_tile(&path)?;
        if tile.tile_id != tile_id {
            return Err(Error::format(&path, format!("file holds tile `{}`", tile.tile_id)));
        }
        tile.validate(&self.manifest.modalities, self.manifest.label_vocab.len())?;
        if self.mode == AccessMode::Unlabeled {
            tile.hide_labels();
        }
        Ok(tile)
    }

    pub fn tiles(&self, ids: &[String]) -> Result<Vec<MultimodalTile>> {
        ids.par_iter().map(|id| self.tile(id)).collect()
    }

    pub fn split_tiles(&self, split: &str) -> Result<Vec<MultimodalTile>> {
        let ids = self.manifest.split(split)?.to_vec();
        self.tiles(&ids)
    }
}

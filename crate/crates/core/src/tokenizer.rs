//! Splits tiles along the shared patch grid into `(modality, patch)` tokens.
//!
//! Token order is fixed: tiles in batch order, then modalities in the order
//! of the given specs, then patches row-major (`p = row * Gx + col`).

use std::ops::Range;

use crate::dataspec::{ModalityKind, ModalitySpec, MultimodalTile};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TokenIndex {
    /// Index into [`TokenBatch::specs`].
    pub modality: usize,
    /// Row-major patch index within the tile.
    pub patch: usize,
    /// Index into [`TokenBatch::tile_ids`].
    pub tile: usize,
    /// Patch centre in metres, tile frame.
    pub position_m: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TokenRaw {
    /// `[C, W, W]`.
    Image { values: Vec<f64> },
    /// `[C, L]` (channel-major) with one day stamp and validity flag per date.
    Series { values: Vec<f64>, days: Vec<u16>, valid: Vec<bool> },
}

impl TokenRaw {
    pub fn values(&self) -> &[f64] {
        match self {
            TokenRaw::Image { values } | TokenRaw::Series { values, .. } => values,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub specs: Vec<ModalitySpec>,
    pub tile_ids: Vec<String>,
    pub grids: Vec<(usize, usize)>,
    pub indices: Vec<TokenIndex>,
    pub raw: Vec<TokenRaw>,
    /// Token range of each tile, aligned with `tile_ids`.
    pub tile_partition: Vec<Range<usize>>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_tiles(&self) -> usize {
        self.tile_ids.len()
    }

    pub fn tile_id(&self, token: usize) -> &str {
        &self.tile_ids[self.indices[token].tile]
    }

    /// Positions of every patch of tile `t`, row-major.
    pub fn patch_positions(&self, t: usize) -> Vec<(f64, f64)> {
        let (gx, gy) = self.grids[t];
        let cell = cell_size(&self.specs);
        (0..gx * gy).map(|p| patch_center(p, gx, cell)).collect()
    }
}

pub fn patch_center(p: usize, gx: usize, cell_m: f64) -> (f64, f64) {
    let (row, col) = (p / gx, p % gx);
    ((col as f64 + 0.5) * cell_m, (row as f64 + 0.5) * cell_m)
}

fn cell_size(specs: &[ModalitySpec]) -> f64 {
    specs
        .first()
        .map(|s| s.patch_side_px as f64 * s.ground_resolution_m)
        .unwrap_or(1.0)
}

/// Tokenizes one tile against the given modalities (a subset of the tile's
/// modalities is allowed, e.g. for unimodal evaluation).
pub fn tokenize(tile: &MultimodalTile, specs: &[ModalitySpec]) -> Result<TokenBatch> {
    let mut batch = TokenBatch {
        specs: specs.to_vec(),
        tile_ids: Vec::new(),
        grids: Vec::new(),
        indices: Vec::new(),
        raw: Vec::new(),
        tile_partition: Vec::new(),
    };
    push_tile(&mut batch, tile)?;
    Ok(batch)
}

fn push_tile(batch: &mut TokenBatch, tile: &MultimodalTile) -> Result<()> {
    let (gx, gy) = tile.grid;
    if gx == 0 || gy == 0 {
        return Err(Error::Shape(format!("tile `{}` has an empty grid", tile.tile_id)));
    }
    let t = batch.tile_ids.len();
    let start = batch.indices.len();
    let cell = cell_size(&batch.specs);
    for (m, spec) in batch.specs.iter().enumerate() {
        let arr = tile
            .modality(&spec.name)
            .ok_or_else(|| Error::Shape(format!("tile `{}` lacks modality `{}`", tile.tile_id, spec.name)))?;
        let s = spec.patch_side_px;
        let (c, h, w, len) = match (spec.kind, arr.shape.as_slice()) {
            (ModalityKind::Image, &[c, h, w]) => (c, h, w, 1),
            (ModalityKind::TimeSeries, &[l, c, h, w]) => (c, h, w, l),
            _ => {
                return Err(Error::Shape(format!(
                    "tile `{}` modality `{}` has shape {:?}",
                    tile.tile_id, spec.name, arr.shape
                )))
            }
        };
        if h != gy * s || w != gx * s || c != spec.channels {
            return Err(Error::Shape(format!(
                "tile `{}` modality `{}`: {}x{}x{} is not divisible into a {}x{} grid of {} px patches",
                tile.tile_id, spec.name, c, h, w, gx, gy, s
            )));
        }
        for p in 0..gx * gy {
            let (row, col) = (p / gx, p % gx);
            let raw = match spec.kind {
                ModalityKind::Image => {
                    let mut values = Vec::with_capacity(c * s * s);
                    for ch in 0..c {
                        for i in 0..s {
                            let base = (ch * h + row * s + i) * w + col * s;
                            values.extend(arr.values[base..base + s].iter().map(|&v| v as f64));
                        }
                    }
                    TokenRaw::Image { values }
                }
                ModalityKind::TimeSeries => {
                    let days = arr.days.clone().ok_or_else(|| {
                        Error::Shape(format!("tile `{}` series `{}` lacks timestamps", tile.tile_id, spec.name))
                    })?;
                    let flat_c = c * s * s;
                    let mut values = vec![0.0; flat_c * len];
                    for t in 0..len {
                        for ch in 0..c {
                            for i in 0..s {
                                for j in 0..s {
                                    let src = ((t * c + ch) * h + row * s + i) * w + col * s + j;
                                    let fc = (ch * s + i) * s + j;
                                    values[fc * len + t] = arr.values[src] as f64;
                                }
                            }
                        }
                    }
                    TokenRaw::Series { values, valid: vec![true; len], days }
                }
            };
            batch.indices.push(TokenIndex { modality: m, patch: p, tile: t, position_m: patch_center(p, gx, cell) });
            batch.raw.push(raw);
        }
    }
    batch.tile_ids.push(tile.tile_id.clone());
    batch.grids.push(tile.grid);
    batch.tile_partition.push(start..batch.indices.len());
    Ok(())
}

/// Concatenates per-tile tokenizations, recording tile boundaries.
pub fn assemble_batch(tiles: &[MultimodalTile], specs: &[ModalitySpec]) -> Result<TokenBatch> {
    let first = tiles.first().ok_or_else(|| Error::Invalid("cannot assemble an empty batch".into()))?;
    fn names(t: &MultimodalTile) -> Vec<&str> {
        let mut v: Vec<&str> = t.arrays.iter().map(|a| a.name.as_str()).collect();
        v.sort_unstable();
        v
    }
    let reference = names(first);
    let mut batch = TokenBatch {
        specs: specs.to_vec(),
        tile_ids: Vec::new(),
        grids: Vec::new(),
        indices: Vec::new(),
        raw: Vec::new(),
        tile_partition: Vec::new(),
    };
    for tile in tiles {
        if names(tile) != reference {
            return Err(Error::Invalid(format!(
                "tile `{}` has modalities {:?}, expected {:?}",
                tile.tile_id,
                names(tile),
                reference
            )));
        }
        if batch.tile_ids.contains(&tile.tile_id) {
            return Err(Error::Invalid(format!("tile `{}` appears twice in the batch", tile.tile_id)));
        }
        push_tile(&mut batch, tile)?;
    }
    Ok(batch)
}

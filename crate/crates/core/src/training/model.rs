use std::ops::Range;

use rayon::prelude::*;

use crate::autograd::{Gradients, ParamId, ParamStore, Tape, Var};
use crate::dataspec::{ModalityKind, ModalitySpec};
use crate::encoders::{
    select_reconstruction_dates, series_rows, AttentionTrace, ImageCodec, ImageCodecConfig, PoolTrace, TemporalCodec,
    TemporalCodecConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{mask_tokens, Fusion, FusionConfig, FusionLayout, MaskSet, Slot};
use crate::nn::{Init, Linear};
use crate::objectives::{
    build_match_matrix, build_naive_match_matrix, contrastive_loss, date_mask, reconstruction_loss, total_loss,
    ContrastiveMode, Match, MatchMatrix, ReconTerm,
};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenBatch, TokenRaw};

use super::config::{ContrastiveTokens, ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum Codec {
    Image(ImageCodec),
    Series(TemporalCodec),
}

/// All learnable state: per-modality codecs, the combiner and a linear
/// classification head, over one shared parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub codecs: Vec<Codec>,
    pub fusion: Fusion,
    pub head: Linear,
}

/// Encoder outputs of one modality inside one tile.
pub struct GroupEncoding {
    /// Index into `Model::codecs`.
    pub codec: usize,
    /// Local token rows within the tile.
    pub rows: Range<usize>,
    pub pool: Option<PoolTrace>,
    pub attention: Vec<AttentionTrace>,
    pub days: Vec<u16>,
    pub valid: Vec<bool>,
}

pub struct TileEncoding {
    /// `[T_tile, d]`, rows in token order.
    pub emb: Var,
    pub groups: Vec<GroupEncoding>,
}

/// Loss breakdown of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub con: f64,
    pub mae: f64,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let mut codecs = Vec::with_capacity(config.modalities.len());
        for spec in &config.modalities {
            let prefix = format!("codec.{}", spec.name);
            codecs.push(match spec.kind {
                ModalityKind::Image => Codec::Image(ImageCodec::new(
                    &mut init,
                    &prefix,
                    ImageCodecConfig {
                        channels: spec.channels,
                        patch_px: spec.patch_side_px,
                        d: config.d,
                        pools: config.pools_for(spec)?,
                        activation: config.activation,
                        bypass: true,
                    },
                )?),
                ModalityKind::TimeSeries => Codec::Series(TemporalCodec::new(
                    &mut init,
                    &prefix,
                    TemporalCodecConfig {
                        channels: spec.token_channels(),
                        d: config.d,
                        heads: config.heads,
                        key_dim: config.key_dim,
                    },
                )?),
            });
        }
        let fusion = Fusion::new(
            &mut init,
            "fusion",
            FusionConfig {
                d: config.d,
                blocks: config.blocks,
                heads: config.heads,
                ffn_mult: config.ffn_mult,
                buckets: config.buckets,
                positional: config.positional,
                cell_m: config.cell_m,
                max_grid: config.max_grid,
            },
        )?;
        let head = init.linear("head", config.d, config.num_classes.max(1));
        Ok(Model { config, store, codecs, fusion, head })
    }

    pub fn head_params(&self) -> [ParamId; 2] {
        [self.head.w, self.head.b]
    }

    /// Every parameter except the head.
    pub fn backbone_params(&self) -> Vec<ParamId> {
        let head = self.head_params();
        self.store.ids().filter(|id| !head.contains(id)).collect()
    }

    fn codec_index(&self, spec: &ModalitySpec) -> Result<usize> {
        self.config
            .modalities
            .iter()
            .position(|s| s.name == spec.name)
            .ok_or_else(|| Error::Config(format!("model has no codec for modality `{}`", spec.name)))
    }

    /// Encodes the tokens of tile `t` of `batch` on `tape`.
    pub fn encode_tile(&self, tape: &mut Tape, batch: &TokenBatch, t: usize) -> Result<TileEncoding> {
        let range = batch.tile_partition[t].clone();
        let mut parts = Vec::new();
        let mut groups = Vec::new();
        let mut start = range.start;
        while start < range.end {
            let m = batch.indices[start].modality;
            let mut end = start;
            while end < range.end && batch.indices[end].modality == m {
                end += 1;
            }
            let ci = self.codec_index(&batch.specs[m])?;
            let n = end - start;
            let rows = start - range.start..end - range.start;
            match &self.codecs[ci] {
                Codec::Image(codec) => {
                    let mut data = Vec::with_capacity(n * codec.patch_dim());
                    for raw in &batch.raw[start..end] {
                        data.extend_from_slice(raw.values());
                    }
                    let x = tape.constant(Tensor::from_vec(&[n, codec.patch_dim()], data));
                    let (e, trace) = codec.encode(tape, x)?;
                    parts.push(e);
                    groups.push(GroupEncoding {
                        codec: ci,
                        rows,
                        pool: Some(trace),
                        attention: Vec::new(),
                        days: Vec::new(),
                        valid: Vec::new(),
                    });
                }
                Codec::Series(codec) => {
                    let c = codec.cfg.channels;
                    let (days, _) = series_meta(&batch.raw[start])?;
                    let mut data = Vec::new();
                    let mut valid = Vec::new();
                    for raw in &batch.raw[start..end] {
                        let (d2, v) = series_meta(raw)?;
                        if d2 != days {
                            return Err(Error::Shape("series tokens of one tile disagree on dates".into()));
                        }
                        data.extend(series_rows(raw.values(), c));
                        valid.extend_from_slice(v);
                    }
                    let x = tape.constant(Tensor::from_vec(&[n * days.len(), c], data));
                    let (e, attention) = codec.encode(tape, x, days, &valid)?;
                    parts.push(e);
                    groups.push(GroupEncoding {
                        codec: ci,
                        rows,
                        pool: None,
                        attention,
                        days: days.to_vec(),
                        valid,
                    });
                }
            }
            start = end;
        }
        let emb = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
        Ok(TileEncoding { emb, groups })
    }

    /// Fused `[P, d]` patch features of tile `t` (no masking).
    pub fn fuse_tile(&self, tape: &mut Tape, batch: &TokenBatch, t: usize, enc: &TileEncoding, masked: &[usize]) -> Result<Var> {
        let layout = tile_layout(batch, t);
        self.fusion.combine(tape, enc.emb, &layout, masked)
    }

    /// Class logits `[1, K]` of tile `t`.
    pub fn tile_logits(&self, tape: &mut Tape, batch: &TokenBatch, t: usize) -> Result<Var> {
        let enc = self.encode_tile(tape, batch, t)?;
        let fused = self.fuse_tile(tape, batch, t, &enc, &[])?;
        let pooled = tape.mean_rows(fused);
        Ok(self.head.forward(tape, pooled))
    }

    /// Mean fused feature `[d]` of every tile, without gradients.
    pub fn tile_features(&self, batch: &TokenBatch) -> Result<Vec<Vec<f64>>> {
        (0..batch.num_tiles())
            .into_par_iter()
            .map(|t| {
                let mut tape = Tape::new(&self.store);
                let enc = self.encode_tile(&mut tape, batch, t)?;
                let fused = self.fuse_tile(&mut tape, batch, t, &enc, &[])?;
                let pooled = tape.mean_rows(fused);
                Ok(tape.value(pooled).data().to_vec())
            })
            .collect()
    }

    /// Sigmoid-free logits per tile.
    pub fn predict_logits(&self, batch: &TokenBatch) -> Result<Vec<Vec<f64>>> {
        (0..batch.num_tiles())
            .into_par_iter()
            .map(|t| {
                let mut tape = Tape::new(&self.store);
                let l = self.tile_logits(&mut tape, batch, t)?;
                Ok(tape.value(l).data().to_vec())
            })
            .collect()
    }

    /// Mean binary cross-entropy over tiles and its gradient. `targets`
    /// holds one label row per tile.
    pub fn supervised_step(&self, batch: &TokenBatch, targets: &[Vec<f64>], with_grads: bool) -> Result<(f64, Option<Gradients>)> {
        let n = batch.num_tiles();
        let per_tile: Vec<(f64, Option<Gradients>)> = (0..n)
            .into_par_iter()
            .map(|t| {
                let mut tape = Tape::new(&self.store);
                let logits = self.tile_logits(&mut tape, batch, t)?;
                let loss = tape.bce_with_logits(logits, &targets[t]);
                let value = tape.value(loss).item();
                let grads = with_grads.then(|| tape.backward(&[(loss, Tensor::scalar(1.0 / n as f64))]));
                Ok((value, grads))
            })
            .collect::<Result<_>>()?;
        let loss = per_tile.iter().map(|(l, _)| l).sum::<f64>() / n as f64;
        let grads = with_grads.then(|| reduce(per_tile.into_iter().map(|(_, g)| g.unwrap()), self.store.len()));
        Ok((loss, grads))
    }

    /// Self-supervised loss of one batch, with parameter gradients when
    /// `with_grads`. `mask_seed` drives the token mask.
    pub fn pretrain_step(
        &self,
        batch: &TokenBatch,
        cfg: &TrainConfig,
        mask_seed: u64,
        with_grads: bool,
    ) -> Result<(BatchLoss, Option<Gradients>)> {
        let switches = cfg.switches();
        let n = batch.num_tiles();
        let d = self.config.d;

        // 1. Encode every tile on its own tape.
        let mut tiles: Vec<(Tape, TileEncoding)> = (0..n)
            .into_par_iter()
            .map(|t| {
                let mut tape = Tape::new(&self.store);
                let enc = self.encode_tile(&mut tape, batch, t)?;
                Ok((tape, enc))
            })
            .collect::<Result<_>>()?;

        let mask = if cfg.reconstruction || cfg.contrastive_tokens == ContrastiveTokens::Unmasked {
            mask_tokens(batch, cfg.mask_ratio, cfg.mask_strategy, mask_seed)?
        } else {
            MaskSet::default()
        };

        // 2. Contrastive loss over the batch's encoder outputs.
        let mut con = 0.0;
        let mut con_grad: Option<Tensor> = None;
        if switches.contrastive != ContrastiveMode::Off {
            let parts: Vec<&Tensor> = tiles.iter().map(|(tape, enc)| tape.value(enc.emb)).collect();
            let all = Tensor::concat_rows(&parts);
            let matrix = match switches.contrastive {
                ContrastiveMode::Naive => build_naive_match_matrix(batch)?,
                _ => build_match_matrix(batch)?,
            };
            match cfg.contrastive_tokens {
                ContrastiveTokens::All => {
                    let (l, g) = contrastive_loss(&all, &matrix, cfg.gamma)?;
                    con = l;
                    con_grad = Some(g);
                }
                ContrastiveTokens::Unmasked => {
                    let keep = unmasked_with_partner(&matrix, &mask);
                    if !keep.is_empty() {
                        let sub = restrict(&matrix, &keep);
                        let rows: Vec<f64> = keep.iter().flat_map(|&i| all.row(i).to_vec()).collect();
                        let (l, g) = contrastive_loss(&Tensor::from_vec(&[keep.len(), d], rows), &sub, cfg.gamma)?;
                        con = l;
                        let mut full = Tensor::zeros(&[batch.len(), d]);
                        for (k, &i) in keep.iter().enumerate() {
                            full.row_mut(i).copy_from_slice(g.row(k));
                        }
                        con_grad = Some(full);
                    }
                }
            }
        }

        // 3. Mask, combine and decode masked tokens per tile.
        struct Decoded {
            var: Var,
            /// (global token, row offset within `var`, values per token)
            items: Vec<(usize, usize, usize)>,
            targets: Vec<Vec<f64>>,
            include: Vec<Option<Vec<bool>>>,
        }
        let mut decoded: Vec<Vec<Decoded>> = Vec::new();
        if switches.reconstruction && !mask.is_empty() {
            decoded = tiles
                .par_iter_mut()
                .enumerate()
                .map(|(t, (tape, enc))| {
                    let range = batch.tile_partition[t].clone();
                    let local: Vec<usize> = mask.0.iter().filter(|i| range.contains(i)).map(|i| i - range.start).collect();
                    let mut out = Vec::new();
                    if local.is_empty() {
                        return Ok(out);
                    }
                    let fused = self.fuse_tile(tape, batch, t, enc, &local)?;
                    for g in &enc.groups {
                        let rows: Vec<usize> = local.iter().copied().filter(|r| g.rows.contains(r)).collect();
                        if rows.is_empty() {
                            continue;
                        }
                        let patches: Vec<usize> = rows.iter().map(|&r| batch.indices[range.start + r].patch).collect();
                        let e = tape.gather_rows(fused, &patches);
                        let spec = &self.config.modalities[g.codec];
                        match &self.codecs[g.codec] {
                            Codec::Image(codec) => {
                                let local_idx: Vec<usize> = rows.iter().map(|r| r - g.rows.start).collect();
                                let trace = g.pool.as_ref().unwrap().select(&local_idx);
                                let trace = (!cfg.fixed_unpool).then_some(&trace);
                                let var = codec.decode(tape, e, trace)?;
                                let k = codec.patch_dim();
                                out.push(Decoded {
                                    var,
                                    items: rows.iter().enumerate().map(|(j, &r)| (range.start + r, j * k, k)).collect(),
                                    targets: rows.iter().map(|&r| batch.raw[range.start + r].values().to_vec()).collect(),
                                    include: vec![None; rows.len()],
                                });
                            }
                            Codec::Series(codec) => {
                                let c = codec.cfg.channels;
                                let l = g.days.len();
                                let var = codec.decode(tape, e, &g.days)?;
                                let mut include = Vec::with_capacity(rows.len());
                                for &r in &rows {
                                    let j = r - g.rows.start;
                                    let valid = &g.valid[j * l..(j + 1) * l];
                                    let dates: Vec<usize> = if cfg.filters_dates(&spec.name) {
                                        select_reconstruction_dates(&g.attention[j], valid, cfg.date_fraction)?
                                    } else {
                                        (0..l).filter(|&i| valid[i]).collect()
                                    };
                                    include.push(Some(date_mask(&dates, l, c)));
                                }
                                out.push(Decoded {
                                    var,
                                    items: rows.iter().enumerate().map(|(j, &r)| (range.start + r, j * l * c, l * c)).collect(),
                                    targets: rows.iter().map(|&r| series_rows(batch.raw[range.start + r].values(), c)).collect(),
                                    include,
                                });
                            }
                        }
                    }
                    Ok(out)
                })
                .collect::<Result<_>>()?;
        }

        // 4. Reconstruction loss, ordered by global token index.
        let mut mae = 0.0;
        let mut recon_grads: Vec<Vec<(Var, Tensor)>> = vec![Vec::new(); n];
        if !decoded.is_empty() {
            let mut refs: Vec<(usize, usize, usize, usize)> = Vec::new(); // (token, tile, group, item)
            for (t, groups) in decoded.iter().enumerate() {
                for (gi, g) in groups.iter().enumerate() {
                    for (ii, item) in g.items.iter().enumerate() {
                        refs.push((item.0, t, gi, ii));
                    }
                }
            }
            refs.sort_unstable();
            let terms: Vec<ReconTerm> = refs
                .iter()
                .map(|&(_, t, gi, ii)| {
                    let g = &decoded[t][gi];
                    let (_, off, k) = g.items[ii];
                    ReconTerm {
                        decoded: &tiles[t].0.value(g.var).data()[off..off + k],
                        target: &g.targets[ii],
                        include: g.include[ii].as_deref(),
                    }
                })
                .collect();
            let (l, grads) = reconstruction_loss(&terms)?;
            mae = l;
            if with_grads {
                let mut seeds: Vec<Vec<Tensor>> = decoded
                    .iter()
                    .enumerate()
                    .map(|(t, gs)| gs.iter().map(|g| Tensor::zeros(tiles[t].0.shape(g.var))).collect())
                    .collect();
                for (&(_, t, gi, ii), gr) in refs.iter().zip(grads) {
                    let (_, off, k) = decoded[t][gi].items[ii];
                    seeds[t][gi].data_mut()[off..off + k].copy_from_slice(&gr);
                }
                for (t, tile_seeds) in seeds.into_iter().enumerate() {
                    for (gi, s) in tile_seeds.into_iter().enumerate() {
                        recon_grads[t].push((decoded[t][gi].var, s));
                    }
                }
            }
        }

        let loss = BatchLoss { total: total_loss(con, mae, switches), con, mae };
        if !with_grads {
            return Ok((loss, None));
        }

        // 5. Per-tile backward with injected seeds, reduced in tile order.
        let per_tile: Vec<Gradients> = tiles
            .par_iter()
            .zip(recon_grads.into_par_iter())
            .enumerate()
            .map(|(t, ((tape, enc), mut seeds))| {
                if let Some(g) = &con_grad {
                    let range = batch.tile_partition[t].clone();
                    let rows: Vec<f64> = range.flat_map(|i| g.row(i).to_vec()).collect();
                    seeds.push((enc.emb, Tensor::from_vec(tape.shape(enc.emb), rows)));
                }
                tape.backward(&seeds)
            })
            .collect();
        Ok((loss, Some(reduce(per_tile.into_iter(), self.store.len()))))
    }
}

fn series_meta(raw: &TokenRaw) -> Result<(&[u16], &[bool])> {
    match raw {
        TokenRaw::Series { days, valid, .. } => Ok((days, valid)),
        TokenRaw::Image { .. } => Err(Error::Shape("expected a series token".into())),
    }
}

/// Fusion layout of a single tile with local token rows.
pub fn tile_layout(batch: &TokenBatch, t: usize) -> FusionLayout {
    let range = batch.tile_partition[t].clone();
    let gx = batch.grids[t].0;
    let tokens = range
        .map(|i| {
            let ix = &batch.indices[i];
            Slot { tile: 0, patch: ix.patch, cell: (ix.patch / gx, ix.patch % gx), position: ix.position_m }
        })
        .collect();
    let outputs = batch
        .patch_positions(t)
        .into_iter()
        .enumerate()
        .map(|(p, position)| Slot { tile: 0, patch: p, cell: (p / gx, p % gx), position })
        .collect();
    FusionLayout { tokens, outputs }
}

fn reduce(parts: impl Iterator<Item = Gradients>, num_params: usize) -> Gradients {
    let mut total = Gradients::new(num_params);
    for g in parts {
        total.accumulate(&g);
    }
    total
}

fn unmasked_with_partner(matrix: &MatchMatrix, mask: &MaskSet) -> Vec<usize> {
    (0..matrix.size)
        .filter(|&i| {
            !mask.contains(i) && (0..matrix.size).any(|j| matrix.get(i, j) == Match::Positive && !mask.contains(j))
        })
        .collect()
}

fn restrict(matrix: &MatchMatrix, keep: &[usize]) -> MatchMatrix {
    let mut entries = Vec::with_capacity(keep.len() * keep.len());
    for &i in keep {
        for &j in keep {
            entries.push(matrix.get(i, j));
        }
    }
    MatchMatrix { size: keep.len(), entries }
}

//! Modality combiner: token masking, distance-bucketed relative position
//! biases, residual self-attention over each tile's tokens, and
//! cross-attention from one combiner-token copy per patch.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear};
use crate::tensor::Tensor;
use crate::tokenizer::TokenBatch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    #[default]
    Relative,
    /// Learned embedding per grid cell, added to tokens and combiner copies.
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub buckets: usize,
    pub positional: Positional,
    /// Side of one grid cell in metres.
    pub cell_m: f64,
    /// Largest grid side supported (sets the bucket range and the size of
    /// the absolute embedding table).
    pub max_grid: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d={} must be a positive multiple of heads={}", self.d, self.heads)));
        }
        if self.buckets < 2 || self.ffn_mult == 0 || self.max_grid == 0 || self.cell_m.is_nan() || self.cell_m <= 0.0 {
            return Err(Error::Config("fusion needs >= 2 buckets, ffn_mult > 0, max_grid > 0, cell_m > 0".into()));
        }
        Ok(())
    }
}

/// Geometric distance buckets with one learned bias per head and bucket.
/// Pairs from different tiles fall in the cross-tile bucket, which is fixed
/// at `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPosTable {
    /// `buckets - 1` increasing edges in metres; bucket `b` holds distances
    /// in `[edges[b-1], edges[b])`.
    pub edges: Vec<f64>,
    pub table: ParamId,
}

impl RelPosTable {
    pub fn new(init: &mut Init, name: &str, cfg: &FusionConfig) -> Self {
        let lo = 0.5 * cfg.cell_m;
        let hi = (cfg.max_grid as f64 * cfg.cell_m * std::f64::consts::SQRT_2).max(lo * 2.0);
        let n = cfg.buckets - 1;
        let edges = (0..n)
            .map(|i| if n == 1 { lo } else { lo * (hi / lo).powf(i as f64 / (n - 1) as f64) })
            .collect();
        RelPosTable { edges, table: init.zeros(name, &[cfg.heads, cfg.buckets]) }
    }

    pub fn bucket(&self, dist: f64) -> usize {
        self.edges.iter().take_while(|&&e| e <= dist).count()
    }

    fn buckets(&self, q: &[(f64, f64)], k: &[(f64, f64)]) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(q.len() * k.len());
        for a in q {
            for b in k {
                out.push(Some(self.bucket(dist(*a, *b))));
            }
        }
        out
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Per-head `T x T` bias: the table entry of the distance bucket for pairs
/// in the same tile, `-inf` across tiles.
pub fn relative_bias(positions: &[(f64, f64)], tiles: &[usize], rel: &RelPosTable, store: &ParamStore) -> Vec<Tensor> {
    let table = store.get(rel.table);
    let (heads, k) = (table.rows(), table.cols());
    let t = positions.len();
    (0..heads)
        .map(|h| {
            let mut data = Vec::with_capacity(t * t);
            for i in 0..t {
                for j in 0..t {
                    data.push(if tiles[i] == tiles[j] {
                        table.data()[h * k + rel.bucket(dist(positions[i], positions[j]))]
                    } else {
                        f64::NEG_INFINITY
                    });
                }
            }
            Tensor::from_vec(&[t, t], data)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    #[default]
    Random,
    /// The same patches are masked in every modality.
    Spatial,
    /// One whole modality is masked per tile.
    Modality,
}

/// Sorted token indices into a [`TokenBatch`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskSet(pub Vec<usize>);

impl MaskSet {
    pub fn contains(&self, token: usize) -> bool {
        self.0.binary_search(&token).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn mask_tokens(batch: &TokenBatch, ratio: f64, strategy: MaskStrategy, seed: u64) -> Result<MaskSet> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    match strategy {
        MaskStrategy::Random => {
            let t = batch.len();
            let k = (ratio * t as f64).floor() as usize;
            out = index::sample(&mut rng, t, k).into_vec();
        }
        MaskStrategy::Spatial => {
            for (t, range) in batch.tile_partition.iter().enumerate() {
                let (gx, gy) = batch.grids[t];
                let p = gx * gy;
                let k = (ratio * p as f64).floor() as usize;
                let chosen = index::sample(&mut rng, p, k).into_vec();
                out.extend(range.clone().filter(|&i| chosen.contains(&batch.indices[i].patch)));
            }
        }
        MaskStrategy::Modality => {
            let m = batch.specs.len();
            for range in &batch.tile_partition {
                if m == 0 {
                    break;
                }
                let pick = rng.random_range(0..m);
                out.extend(range.clone().filter(|&i| batch.indices[i].modality == pick));
            }
        }
    }
    out.sort_unstable();
    Ok(MaskSet(out))
}

/// Where each token sits and which `(tile, patch)` outputs are wanted.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub tile: usize,
    pub patch: usize,
    /// `(row, col)` grid cell.
    pub cell: (usize, usize),
    pub position: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayout {
    pub tokens: Vec<Slot>,
    /// One entry per fused output row.
    pub outputs: Vec<Slot>,
}

impl FusionLayout {
    /// Tokens in batch order; outputs tile by tile, patches row-major.
    pub fn from_batch(batch: &TokenBatch) -> Self {
        let tokens = batch
            .indices
            .iter()
            .map(|ix| {
                let gx = batch.grids[ix.tile].0;
                Slot { tile: ix.tile, patch: ix.patch, cell: (ix.patch / gx, ix.patch % gx), position: ix.position_m }
            })
            .collect();
        let mut outputs = Vec::new();
        for t in 0..batch.num_tiles() {
            let gx = batch.grids[t].0;
            for (p, position) in batch.patch_positions(t).into_iter().enumerate() {
                outputs.push(Slot { tile: t, patch: p, cell: (p / gx, p % gx), position });
            }
        }
        FusionLayout { tokens, outputs }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SelfBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct CrossBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    q: Linear,
    kv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub cfg: FusionConfig,
    blocks: Vec<SelfBlock>,
    cross: CrossBlock,
    pub rel: RelPosTable,
    pub f_mask: ParamId,
    pub f_comb: ParamId,
    pub abs_pos: Option<ParamId>,
}

impl Fusion {
    pub fn new(init: &mut Init, prefix: &str, cfg: FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.d, cfg.d * cfg.ffn_mult);
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let p = format!("{prefix}.block{b}");
                SelfBlock {
                    ln1: init.layer_norm(&format!("{p}.ln1"), d),
                    qkv: init.linear(&format!("{p}.qkv"), d, 3 * d),
                    proj: init.linear(&format!("{p}.proj"), d, d),
                    ln2: init.layer_norm(&format!("{p}.ln2"), d),
                    ff1: init.linear(&format!("{p}.ff1"), d, f),
                    ff2: init.linear(&format!("{p}.ff2"), f, d),
                }
            })
            .collect();
        let p = format!("{prefix}.cross");
        let cross = CrossBlock {
            ln_q: init.layer_norm(&format!("{p}.ln_q"), d),
            ln_kv: init.layer_norm(&format!("{p}.ln_kv"), d),
            q: init.linear(&format!("{p}.q"), d, d),
            kv: init.linear(&format!("{p}.kv"), d, 2 * d),
            proj: init.linear(&format!("{p}.proj"), d, d),
            ln2: init.layer_norm(&format!("{p}.ln2"), d),
            ff1: init.linear(&format!("{p}.ff1"), d, f),
            ff2: init.linear(&format!("{p}.ff2"), f, d),
        };
        let rel = RelPosTable::new(init, &format!("{prefix}.relpos"), &cfg);
        let f_mask = init.normal(&format!("{prefix}.f_mask"), &[1, d], 0.02);
        let f_comb = init.normal(&format!("{prefix}.f_comb"), &[1, d], 0.02);
        let abs_pos = (cfg.positional == Positional::Absolute)
            .then(|| init.normal(&format!("{prefix}.abs_pos"), &[cfg.max_grid * cfg.max_grid, d], 0.02));
        Ok(Fusion { cfg, blocks, cross, rel, f_mask, f_comb, abs_pos })
    }

    /// Cross-attention value path and output projections, for closed-form
    /// checks: `(ln_kv, kv, proj, ff2)`.
    pub fn cross_value_path(&self) -> (LayerNorm, Linear, Linear, Linear) {
        (self.cross.ln_kv, self.cross.kv, self.cross.proj, self.cross.ff2)
    }

    /// Fuses `emb: [T, d]` (rows aligned with `layout.tokens`) into one
    /// row per `layout.outputs` entry. Rows listed in `masked` are replaced
    /// by the learned mask embedding first. Attention never crosses tiles.
    pub fn combine(&self, tape: &mut Tape, emb: Var, layout: &FusionLayout, masked: &[usize]) -> Result<Var> {
        let d = self.cfg.d;
        if tape.shape(emb) != [layout.tokens.len(), d] {
            return Err(Error::Shape(format!(
                "combiner expects [{}, {}], got {:?}",
                layout.tokens.len(),
                d,
                tape.shape(emb)
            )));
        }
        if let Some(&bad) = masked.iter().find(|&&i| i >= layout.tokens.len()) {
            return Err(Error::Shape(format!("masked row {bad} outside {} tokens", layout.tokens.len())));
        }
        let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        let mut order = Vec::new();
        for (o, s) in layout.outputs.iter().enumerate() {
            groups
                .entry(s.tile)
                .or_insert_with(|| {
                    order.push(s.tile);
                    Default::default()
                })
                .1
                .push(o);
        }
        for (i, s) in layout.tokens.iter().enumerate() {
            groups
                .get_mut(&s.tile)
                .ok_or_else(|| Error::Shape(format!("token {i} belongs to tile {} with no outputs", s.tile)))?
                .0
                .push(i);
        }
        let mut parts = Vec::with_capacity(order.len());
        let mut placed = Vec::with_capacity(layout.outputs.len());
        for t in &order {
            let (toks, outs) = &groups[t];
            if toks.is_empty() {
                return Err(Error::Shape(format!("tile {t} has no tokens")));
            }
            let local_mask: Vec<usize> =
                toks.iter().enumerate().filter(|(_, i)| masked.contains(i)).map(|(j, _)| j).collect();
            let tok_slots: Vec<&Slot> = toks.iter().map(|&i| &layout.tokens[i]).collect();
            let out_slots: Vec<&Slot> = outs.iter().map(|&o| &layout.outputs[o]).collect();
            let x = tape.gather_rows(emb, toks);
            parts.push(self.combine_tile(tape, x, &tok_slots, &out_slots, &local_mask)?);
            placed.extend_from_slice(outs);
        }
        let fused = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
        if placed.iter().enumerate().all(|(i, &o)| i == o) {
            return Ok(fused);
        }
        let mut inverse = vec![0; placed.len()];
        for (row, &o) in placed.iter().enumerate() {
            inverse[o] = row;
        }
        Ok(tape.gather_rows(fused, &inverse))
    }

    fn cell_rows(&self, slots: &[&Slot]) -> Result<Vec<usize>> {
        let g = self.cfg.max_grid;
        slots
            .iter()
            .map(|s| {
                if s.cell.0 >= g || s.cell.1 >= g {
                    Err(Error::Shape(format!("grid cell {:?} beyond max_grid {g}", s.cell)))
                } else {
                    Ok(s.cell.0 * g + s.cell.1)
                }
            })
            .collect()
    }

    fn combine_tile(&self, tape: &mut Tape, x: Var, toks: &[&Slot], outs: &[&Slot], masked: &[usize]) -> Result<Var> {
        let mut g = x;
        if !masked.is_empty() {
            let m = tape.param(self.f_mask);
            g = tape.replace_rows(g, masked, m);
        }
        let tok_pos: Vec<(f64, f64)> = toks.iter().map(|s| s.position).collect();
        let out_pos: Vec<(f64, f64)> = outs.iter().map(|s| s.position).collect();
        let (self_buckets, cross_buckets) = match self.abs_pos {
            Some(table) => {
                let tv = tape.param(table);
                let pe = tape.gather_rows(tv, &self.cell_rows(toks)?);
                g = tape.add(g, pe);
                (None, None)
            }
            None => (Some(self.rel.buckets(&tok_pos, &tok_pos)), Some(self.rel.buckets(&out_pos, &tok_pos))),
        };
        for b in &self.blocks {
            g = self.self_block(tape, b, g, self_buckets.as_deref());
        }
        let comb = tape.param(self.f_comb);
        let mut c = tape.repeat_rows(comb, outs.len());
        if let Some(table) = self.abs_pos {
            let tv = tape.param(table);
            let pe = tape.gather_rows(tv, &self.cell_rows(outs)?);
            c = tape.add(c, pe);
        }
        Ok(self.cross_block(tape, c, g, cross_buckets.as_deref()))
    }

    fn attend(&self, tape: &mut Tape, q: Var, k: Var, v: Var, buckets: Option<&[Option<usize>]>) -> Var {
        let heads = self.cfg.heads;
        let hd = self.cfg.d / heads;
        let (nq, nk) = (tape.shape(q)[0], tape.shape(k)[0]);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(v, h * hd, hd);
            let s = tape.matmul(qh, kh, true);
            let mut s = tape.scale(s, scale);
            if let Some(b) = buckets {
                let table = tape.param(self.rel.table);
                let bias = tape.table_bias(table, h, b, nq, nk);
                s = tape.add(s, bias);
            }
            let a = tape.softmax_rows(s);
            outs.push(tape.matmul(a, vh, false));
        }
        if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        }
    }

    fn feed_forward(tape: &mut Tape, ln: &LayerNorm, ff1: &Linear, ff2: &Linear, x: Var) -> Var {
        let h = ln.forward(tape, x);
        let h = ff1.forward(tape, h);
        let h = tape.gelu(h);
        let h = ff2.forward(tape, h);
        tape.add(x, h)
    }

    fn self_block(&self, tape: &mut Tape, b: &SelfBlock, x: Var, buckets: Option<&[Option<usize>]>) -> Var {
        let d = self.cfg.d;
        let h = b.ln1.forward(tape, x);
        let qkv = b.qkv.forward(tape, h);
        let q = tape.slice_cols(qkv, 0, d);
        let k = tape.slice_cols(qkv, d, d);
        let v = tape.slice_cols(qkv, 2 * d, d);
        let a = self.attend(tape, q, k, v, buckets);
        let a = b.proj.forward(tape, a);
        let x = tape.add(x, a);
        Self::feed_forward(tape, &b.ln2, &b.ff1, &b.ff2, x)
    }

    fn cross_block(&self, tape: &mut Tape, c: Var, g: Var, buckets: Option<&[Option<usize>]>) -> Var {
        let d = self.cfg.d;
        let cb = &self.cross;
        let hq = cb.ln_q.forward(tape, c);
        let q = cb.q.forward(tape, hq);
        let hk = cb.ln_kv.forward(tape, g);
        let kv = cb.kv.forward(tape, hk);
        let k = tape.slice_cols(kv, 0, d);
        let v = tape.slice_cols(kv, d, d);
        let a = self.attend(tape, q, k, v, buckets);
        let a = cb.proj.forward(tape, a);
        let x = tape.add(c, a);
        Self::feed_forward(tape, &cb.ln2, &cb.ff1, &cb.ff2, x)
    }
}

/// Shuffled copy of `0..n`, handy for permutation checks.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

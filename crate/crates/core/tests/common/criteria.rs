//! One check per acceptance criterion. Each returns whether it passed and
//! a short measurement summary.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use omnifuse_core::autograd::{Gradients, ParamId, ParamStore, Tape};
use omnifuse_core::dataspec::{generate_synthetic, MultimodalTile, SyntheticConfig};
use omnifuse_core::encoders::{
    select_reconstruction_dates, AttentionTrace, ImageCodec, ImageCodecConfig, TemporalCodec,
    TemporalCodecConfig,
};
use omnifuse_core::fusion::{permutation, Fusion, FusionConfig, FusionLayout, Positional};
use omnifuse_core::nn::{Activation, Init};
use omnifuse_core::objectives::{
    build_match_matrix, build_naive_match_matrix, contrastive_loss, date_mask, naive_contrastive_loss,
    reconstruction_loss, ReconTerm,
};
use omnifuse_core::tensor::Tensor;
use omnifuse_core::tokenizer::assemble_batch;
use omnifuse_core::training::{
    adam_step, encode_checkpoint, f1_scores, gradient_check, load_checkpoint, pretrain, save_checkpoint, Adam, EpochRecord,
    GradCheckReport, MetricsLog, Model, Phase, Plateau, TrainConfig, TrainState, ADAM_EPS,
};
use omnifuse_core::Result;

use super::oracles::{
    brute_matrix, contrastive_oracle, random_batch, random_layout, random_tensor, reconstruction_oracle, top_k_dates,
    ReconItem,
};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

pub fn match_matrix_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (m, patches) = random_layout(&mut rng, usize::MAX);
        let batch = random_batch(&mut rng, m, &patches);
        if build_match_matrix(&batch).unwrap().entries != brute_matrix(&batch, false) {
            mismatches += 1;
        }
        if build_naive_match_matrix(&batch).unwrap().entries != brute_matrix(&batch, true) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(mismatches == 0 && secs < 5.0, format!("100 configurations, {mismatches} mismatches, {secs:.3} s"))
}

pub fn contrastive_closed_form() -> Outcome {
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(0), 3, &[2, 2]);
    let emb = Tensor::from_vec(&[12, 3], [0.4, -0.3, 0.8].repeat(12));
    let full = contrastive_loss(&emb, &build_match_matrix(&batch).unwrap(), 0.1).unwrap().0;
    let naive = naive_contrastive_loss(&emb, &batch, 0.1).unwrap().0;
    let (ef, en) = ((full + (0.2f64).ln()).abs(), (naive + (2.0f64 / 11.0).ln()).abs());
    Outcome::new(ef <= 1e-9 && en <= 1e-9, format!("|full + log(2/10)| = {ef:.1e}, |naive + log(2/11)| = {en:.1e}"))
}

pub fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (m, patches) = random_layout(&mut rng, 64);
        let batch = random_batch(&mut rng, m, &patches);
        let d = rng.random_range(1..=8);
        let gamma = rng.random_range(0.05..1.0);
        let emb = random_tensor(&mut rng, &[batch.len(), d], 1.0);
        let full = contrastive_loss(&emb, &build_match_matrix(&batch).unwrap(), gamma).unwrap().0;
        let naive = naive_contrastive_loss(&emb, &batch, gamma).unwrap().0;
        worst = worst.max((full - contrastive_oracle(&emb, &batch, gamma, false)).abs());
        worst = worst.max((naive - contrastive_oracle(&emb, &batch, gamma, true)).abs());

        let items: Vec<ReconItem> = (0..rng.random_range(1..=batch.len()))
            .map(|_| {
                if rng.random_bool(0.5) {
                    let n = rng.random_range(1..=48);
                    let v = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                    ReconItem::Image { decoded: v(&mut rng), target: v(&mut rng) }
                } else {
                    let (l, c) = (rng.random_range(1..=20), rng.random_range(1..=4));
                    let v = |rng: &mut ChaCha8Rng| (0..l * c).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let mut dates: Vec<usize> = (0..l).filter(|_| rng.random_bool(0.4)).collect();
                    if dates.is_empty() {
                        dates.push(rng.random_range(0..l));
                    }
                    ReconItem::Series { decoded: v(&mut rng), target: v(&mut rng), channels: c, dates }
                }
            })
            .collect();
        let masks: Vec<Option<Vec<bool>>> = items
            .iter()
            .map(|it| match it {
                ReconItem::Image { .. } => None,
                ReconItem::Series { target, channels, dates, .. } => {
                    Some(date_mask(dates, target.len() / channels, *channels))
                }
            })
            .collect();
        let terms: Vec<ReconTerm> = items
            .iter()
            .zip(&masks)
            .map(|(it, mask)| match it {
                ReconItem::Image { decoded, target } | ReconItem::Series { decoded, target, .. } => {
                    ReconTerm { decoded, target, include: mask.as_deref() }
                }
            })
            .collect();
        let rec = reconstruction_loss(&terms).unwrap().0;
        worst = worst.max((rec - reconstruction_oracle(&items)).abs());
    }
    Outcome::new(worst <= 1e-6, format!("50 instances, max |loss - oracle| = {worst:.2e}"))
}

fn grads_of(store: &ParamStore, pairs: &[(ParamId, &Tensor)]) -> Gradients {
    let mut g = Gradients::new(store.len());
    for (id, t) in pairs {
        g.accumulate_param(*id, t);
    }
    g
}

fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

pub fn grad_contrastive() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let batch = random_batch(&mut rng, 3, &[2, 3]);
    let mut store = ParamStore::new();
    let emb = store.add("emb", random_tensor(&mut rng, &[batch.len(), 4], 1.0));
    let full = build_match_matrix(&batch)?;
    let naive = build_naive_match_matrix(&batch)?;
    let loss = |s: &ParamStore| -> Result<(f64, Tensor)> {
        let (a, ga) = contrastive_loss(s.get(emb), &full, 0.5)?;
        let (b, gb) = contrastive_loss(s.get(emb), &naive, 0.5)?;
        let mut g = ga;
        g.add_assign(&gb);
        Ok((a + b, g))
    };
    let (_, g) = loss(&store)?;
    gradient_check(&store, &grads_of(&store, &[(emb, &g)]), |s| Ok(loss(s)?.0), 1e-4, 1000, 0)
}

pub fn grad_reconstruction() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut store = ParamStore::new();
    let lens = [8usize, 12, 12];
    let ids: Vec<ParamId> = lens
        .iter()
        .enumerate()
        .map(|(i, &n)| store.add(format!("dec{i}"), random_tensor(&mut rng, &[n], 1.0)))
        .collect();
    let targets: Vec<Vec<f64>> = lens.iter().map(|&n| random_tensor(&mut rng, &[n], 1.0).into_data()).collect();
    let include = [None, Some(date_mask(&[0, 3], 4, 3)), None];
    let loss = |s: &ParamStore| -> Result<(f64, Vec<Vec<f64>>)> {
        let terms: Vec<ReconTerm> = (0..3)
            .map(|k| ReconTerm { decoded: s.get(ids[k]).data(), target: &targets[k], include: include[k].as_deref() })
            .collect();
        reconstruction_loss(&terms)
    };
    let (_, g) = loss(&store)?;
    let gt: Vec<Tensor> = g.into_iter().map(|v| Tensor::from_vec(&[v.len()], v)).collect();
    let pairs: Vec<(ParamId, &Tensor)> = ids.iter().copied().zip(gt.iter()).collect();
    gradient_check(&store, &grads_of(&store, &pairs), |s| Ok(loss(s)?.0), 1e-4, 1000, 0)
}

pub fn grad_image_codec() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let cfg = ImageCodecConfig {
        channels: 2,
        patch_px: 4,
        d: 6,
        pools: vec![2, 2],
        activation: Activation::Gelu,
        bypass: true,
    };
    let codec = ImageCodec::new(&mut Init::new(&mut store, 3), "img", cfg)?;
    perturb(&mut store, &mut rng, 0.1);
    let x = random_tensor(&mut rng, &[2, 32], 1.0);
    let w = random_tensor(&mut rng, &[2, 6], 1.0);
    let run = |s: &ParamStore, grads: bool| -> Result<(f64, Option<Gradients>)> {
        let mut tape = Tape::new(s);
        let xv = tape.constant(x.clone());
        let (e, trace) = codec.encode(&mut tape, xv)?;
        let y = codec.decode(&mut tape, e, Some(&trace))?;
        let rec = tape.sq_err_sum(y, x.data());
        let wv = tape.constant(w.clone());
        let lin = tape.mul(e, wv);
        let lin = tape.sum_all(lin);
        let l = tape.add(rec, lin);
        let value = tape.value(l).item();
        Ok((value, grads.then(|| tape.backward(&[(l, Tensor::scalar(1.0))]))))
    };
    let g = run(&store, true)?.1.unwrap();
    gradient_check(&store, &g, |s| Ok(run(s, false)?.0), 1e-3, 2000, 0)
}

pub fn grad_temporal_codec() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut store = ParamStore::new();
    let cfg = TemporalCodecConfig { channels: 3, d: 8, heads: 2, key_dim: 4 };
    let codec = TemporalCodec::new(&mut Init::new(&mut store, 4), "ts", cfg)?;
    perturb(&mut store, &mut rng, 0.1);
    let days = [12u16, 40, 101, 200, 333];
    let mut valid = vec![true; 10];
    valid[3] = false;
    let x = random_tensor(&mut rng, &[10, 3], 1.0);
    let w = random_tensor(&mut rng, &[2, 8], 1.0);
    let run = |s: &ParamStore, grads: bool| -> Result<(f64, Option<Gradients>)> {
        let mut tape = Tape::new(s);
        let xv = tape.constant(x.clone());
        let (e, _) = codec.encode(&mut tape, xv, &days, &valid)?;
        let y = codec.decode(&mut tape, e, &days)?;
        let rec = tape.sq_err_sum(y, x.data());
        let wv = tape.constant(w.clone());
        let lin = tape.mul(e, wv);
        let lin = tape.sum_all(lin);
        let l = tape.add(rec, lin);
        let value = tape.value(l).item();
        Ok((value, grads.then(|| tape.backward(&[(l, Tensor::scalar(1.0))]))))
    };
    let g = run(&store, true)?.1.unwrap();
    gradient_check(&store, &g, |s| Ok(run(s, false)?.0), 1e-3, 2000, 0)
}

fn fusion_config(d: usize, blocks: usize, heads: usize, positional: Positional) -> FusionConfig {
    FusionConfig { d, blocks, heads, ffn_mult: 2, buckets: 16, positional, cell_m: 10.0, max_grid: 4 }
}

fn synthetic_tiles(n: usize, classes: usize, seed: u64) -> (Vec<MultimodalTile>, omnifuse_core::dataspec::DatasetManifest) {
    let c = SyntheticConfig { num_tiles: n, num_classes: classes, ..Default::default() };
    let ds = generate_synthetic(&c, seed).unwrap();
    (ds.tiles, ds.manifest)
}

pub fn grad_fusion() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (tiles, manifest) = synthetic_tiles(2, 3, 5);
    let batch = assemble_batch(&tiles, &manifest.modalities)?;
    let layout = FusionLayout::from_batch(&batch);
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut Init::new(&mut store, 5), "fusion", fusion_config(8, 1, 2, Positional::Relative))?;
    perturb(&mut store, &mut rng, 0.2);
    let emb = store.add("emb", random_tensor(&mut rng, &[batch.len(), 8], 1.0));
    let masked = [2usize, 7, 15, 20];
    let w = random_tensor(&mut rng, &[layout.outputs.len(), 8], 1.0);
    let run = |s: &ParamStore, grads: bool| -> Result<(f64, Option<Gradients>)> {
        let mut tape = Tape::new(s);
        let e = tape.param(emb);
        let out = fusion.combine(&mut tape, e, &layout, &masked)?;
        let wv = tape.constant(w.clone());
        let l = tape.mul(out, wv);
        let l = tape.sum_all(l);
        let value = tape.value(l).item();
        Ok((value, grads.then(|| tape.backward(&[(l, Tensor::scalar(1.0))]))))
    };
    let g = run(&store, true)?.1.unwrap();
    gradient_check(&store, &g, |s| Ok(run(s, false)?.0), 1e-3, 1500, 0)
}

/// d=8, one block, two heads, one 2x1 tile with three modalities (6 tokens).
pub fn tiny_model() -> (Model, omnifuse_core::tokenizer::TokenBatch, TrainConfig, Vec<Vec<f64>>) {
    let c = SyntheticConfig { num_tiles: 1, num_classes: 3, grid: [2, 1], ..Default::default() };
    let ds = generate_synthetic(&c, 6).unwrap();
    let cfg = TrainConfig { d: 8, blocks: 1, heads: 2, key_dim: 4, ffn_mult: 2, ..Default::default() };
    let mut model = Model::new(cfg.model_config(&ds.manifest).unwrap(), 6).unwrap();
    perturb(&mut model.store, &mut ChaCha8Rng::seed_from_u64(45), 0.05);
    let batch = assemble_batch(&ds.tiles, &ds.manifest.modalities).unwrap();
    let y = vec![ds.tiles[0].labels().unwrap().unwrap().iter().map(|&v| v as f64).collect()];
    (model, batch, cfg, y)
}

pub fn grad_tiny_model() -> Result<(GradCheckReport, GradCheckReport)> {
    let (model, batch, cfg, y) = tiny_model();
    let with = |s: &ParamStore| {
        let mut m = model.clone();
        m.store = s.clone();
        m
    };
    let g = model.pretrain_step(&batch, &cfg, 7, true)?.1.unwrap();
    let pre = gradient_check(
        &model.store,
        &g,
        |s| Ok(with(s).pretrain_step(&batch, &cfg, 7, false)?.0.total),
        1e-3,
        1500,
        1,
    )?;
    let g = model.supervised_step(&batch, &y, true)?.1.unwrap();
    let sup = gradient_check(&model.store, &g, |s| Ok(with(s).supervised_step(&batch, &y, false)?.0), 1e-3, 1500, 2)?;
    Ok((pre, sup))
}

pub fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    let mut record = |name: &str, r: Result<GradCheckReport>| match r {
        Ok(r) => {
            pass &= r.passed();
            parts.push(format!("{name} {:.1e}", r.max_rel_err));
        }
        Err(e) => {
            pass = false;
            parts.push(format!("{name} error: {e}"));
        }
    };
    record("contrastive", grad_contrastive());
    record("reconstruction", grad_reconstruction());
    record("image", grad_image_codec());
    record("temporal", grad_temporal_codec());
    record("fusion", grad_fusion());
    match grad_tiny_model() {
        Ok((a, b)) => {
            record("model/pretrain", Ok(a));
            record("model/finetune", Ok(b));
        }
        Err(e) => record("model", Err(e)),
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(pass && secs < 120.0, format!("max rel err: {}; {secs:.1} s", parts.join(", ")))
}

/// Follows the trace from the pooled 1x1 cell back to the patch plane.
fn traced_position(trace: &omnifuse_core::encoders::PoolTrace, patch: usize, channel: usize) -> usize {
    let mut pos = 0;
    for s in trace.stages.iter().rev() {
        let o = s.side / s.factor;
        pos = s.indices[(patch * s.channels + channel) * o * o + pos];
    }
    pos
}

pub fn unpool_placement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0;
    let mut trials = 0;
    for (c, w, pools) in [(3usize, 8usize, vec![2usize, 2, 2]), (2, 6, vec![3, 2]), (4, 4, vec![4])] {
        for bypass in [true, false] {
            let mut store = ParamStore::new();
            let cfg = ImageCodecConfig { channels: c, patch_px: w, d: c, pools: pools.clone(), activation: Activation::Identity, bypass };
            let codec = ImageCodec::new(&mut Init::new(&mut store, 0), "img", cfg).unwrap();
            codec.set_identity_weights(&mut store);
            for _ in 0..10 {
                trials += 1;
                let n = 3;
                let plane = w * w;
                // Negative background with one positive peak per channel.
                let mut x: Vec<f64> = (0..n * c * plane).map(|_| rng.random_range(-1.0..-0.01)).collect();
                let mut peaks = Vec::new();
                for p in 0..n {
                    for ch in 0..c {
                        let at = rng.random_range(0..plane);
                        let v = rng.random_range(0.5..2.0);
                        x[(p * c + ch) * plane + at] = v;
                        peaks.push((p, ch, at, v));
                    }
                }
                let mut tape = Tape::new(&store);
                let xv = tape.constant(Tensor::from_vec(&[n, c * plane], x));
                let (e, trace) = codec.encode(&mut tape, xv).unwrap();
                let y = codec.decode(&mut tape, e, Some(&trace)).unwrap();
                let out = tape.value(y).data();
                for &(p, ch, at, v) in &peaks {
                    let expect_at = if bypass { traced_position(&trace, p, ch) } else { 0 };
                    let planev = &out[(p * c + ch) * plane..(p * c + ch + 1) * plane];
                    let ok = (!bypass || expect_at == at)
                        && planev[expect_at] == v
                        && planev.iter().enumerate().all(|(i, &u)| i == expect_at || u == 0.0);
                    if !ok {
                        failures += 1;
                    }
                }
            }
        }
    }
    Outcome::new(failures == 0, format!("{trials} identity-codec trials, {failures} misplaced peaks"))
}

pub fn date_filter_sweep() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = 0;
    for l in [4usize, 8, 12, 61] {
        let k = ((0.25 * l as f64).ceil() as usize).max(1);
        for _ in 0..100 {
            // Coarse values so ties are common.
            let trace: Vec<f64> = (0..l).map(|_| rng.random_range(0..6) as f64 / 10.0).collect();
            let got = select_reconstruction_dates(&AttentionTrace(trace.clone()), &vec![true; l], 0.25).unwrap();
            if got.len() != k || got != top_k_dates(&trace, k) {
                failures += 1;
            }
        }
    }
    Outcome::new(failures == 0, format!("400 traces over L in {{4, 8, 12, 61}}, {failures} mismatches"))
}

pub fn fusion_invariants() -> Outcome {
    let mut drift: f64 = 0.0;
    let (mut isolation, mut substitution) = (true, true);
    for (trial, positional) in [Positional::Relative, Positional::Absolute].into_iter().cycle().take(6).enumerate() {
        let seed = trial as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (tiles, manifest) = synthetic_tiles(3, 4, seed);
        let batch = assemble_batch(&tiles, &manifest.modalities).unwrap();
        let layout = FusionLayout::from_batch(&batch);
        let mut store = ParamStore::new();
        let fusion = Fusion::new(&mut Init::new(&mut store, seed), "fusion", fusion_config(8, 2, 2, positional)).unwrap();
        perturb(&mut store, &mut rng, 0.2);
        let t = batch.len();
        let emb = random_tensor(&mut rng, &[t, 8], 1.0);
        let masked: Vec<usize> = (0..t).filter(|_| rng.random_bool(0.3)).collect();
        let fuse = |emb: &Tensor, layout: &FusionLayout, masked: &[usize]| {
            let mut tape = Tape::new(&store);
            let e = tape.constant(emb.clone());
            let out = fusion.combine(&mut tape, e, layout, masked).unwrap();
            tape.value(out).clone()
        };
        let base = fuse(&emb, &layout, &masked);

        let perm = permutation(t, 7 + seed);
        let pl = FusionLayout { tokens: perm.iter().map(|&i| layout.tokens[i].clone()).collect(), outputs: layout.outputs.clone() };
        let pe = Tensor::from_vec(&[t, 8], perm.iter().flat_map(|&i| emb.row(i).to_vec()).collect());
        let pm: Vec<usize> = (0..t).filter(|&j| masked.contains(&perm[j])).collect();
        drift = drift.max(fuse(&pe, &pl, &pm).max_abs_diff(&base));

        // Zero every tile except the first; its outputs must not move a bit.
        let mut z = emb.clone();
        for i in batch.tile_partition[0].end..t {
            z.row_mut(i).fill(0.0);
        }
        let first = layout.outputs.iter().filter(|s| s.tile == 0).count() * 8;
        isolation &= fuse(&z, &layout, &masked).data()[..first] == base.data()[..first];

        let mut r = emb.clone();
        for &i in &masked {
            for v in r.row_mut(i) {
                *v = rng.random_range(-50.0..50.0);
            }
        }
        substitution &= fuse(&r, &layout, &masked) == base;
    }
    Outcome::new(
        drift <= 1e-5 && isolation && substitution,
        format!("permutation drift {drift:.1e}, tile isolation {isolation}, mask substitution {substitution}"),
    )
}

fn split_tiles(tiles: &[MultimodalTile], n_val: usize) -> (Vec<MultimodalTile>, Vec<MultimodalTile>) {
    let mut train = tiles[..tiles.len() - n_val].to_vec();
    for t in &mut train {
        t.hide_labels();
    }
    (train, tiles[tiles.len() - n_val..].to_vec())
}

/// Pretrains a fresh small model and returns the checkpoint and metrics
/// file bytes.
pub fn pretrain_run(dir: &Path, tiles: &[MultimodalTile], model: Model, cfg: &TrainConfig) -> Result<(Vec<u8>, Vec<u8>)> {
    fs::create_dir_all(dir).unwrap();
    let (train, val) = split_tiles(tiles, 4);
    let mut model = model;
    let mut state = TrainState::new(&model, Phase::Pretrain, cfg);
    let metrics = dir.join("metrics.jsonl");
    let ckpt = dir.join("pretrain.omnf");
    let mut log = MetricsLog::create(&metrics)?;
    let mut hook = |r: &EpochRecord, m: &Model, s: &TrainState, improved: bool| {
        log.write(r)?;
        if improved {
            save_checkpoint(&ckpt, m, s, cfg)?;
        }
        Ok(())
    };
    pretrain(&mut model, &mut state, &train, &val, cfg, &mut hook)?;
    save_checkpoint(&ckpt, &model, &state, cfg)?;
    Ok((fs::read(&ckpt).unwrap(), fs::read(&metrics).unwrap()))
}

pub fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig { d: 16, blocks: 1, heads: 2, key_dim: 4, batch_tiles: 4, pretrain_epochs: epochs, pretrain_lr: 1e-3, ..Default::default() }
}

pub fn determinism(root: &Path) -> Outcome {
    let (tiles, manifest) = synthetic_tiles(16, 8, 8);
    let cfg = small_config(3);
    let run = |name: &str| {
        let model = Model::new(cfg.model_config(&manifest)?, cfg.seed)?;
        pretrain_run(&root.join(name), &tiles, model, &cfg)
    };
    match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => {
            let lines = String::from_utf8_lossy(&a.1).lines().count();
            Outcome::new(
                a == b && lines == 3,
                format!("checkpoints identical {}, metric logs identical {} ({lines} records)", a.0 == b.0, a.1 == b.1),
            )
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, format!("run failed: {e}")),
    }
}

pub fn plateau_boundary() -> bool {
    let mut p = Plateau::new(1.0, 10, 0.1);
    p.observe(1.0);
    for _ in 0..9 {
        p.observe(1.0);
    }
    let before = p.lr;
    p.observe(1.0 - 1e-7); // Not better by more than the threshold.
    before == 1.0 && p.lr == 0.1 && p.bad_epochs == 0 && p.since_best == 10
}

pub fn adam_closed_form() -> bool {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]));
    let g = [0.25, -3.0, 0.0];
    let mut grads = Gradients::new(1);
    grads.accumulate_param(id, &Tensor::from_vec(&[3], g.to_vec()));
    let mut adam = Adam::new(&store);
    adam_step(&mut store, &grads, &mut adam, 0.01, None).unwrap();
    // Bias-corrected first step: m_hat = g, v_hat = g^2.
    let start = [0.5, -1.0, 2.0];
    (0..3).all(|i| {
        let expect = (start[i] - 0.01 * g[i] / (g[i].abs() + ADAM_EPS)) as f32 as f64;
        store.get(id).data()[i] == expect
            && adam.m[0].data()[i] == (0.1 * g[i]) as f32 as f64
            && adam.v[0].data()[i] == (0.001 * g[i] * g[i]) as f32 as f64
    }) && adam.step == 1
}

pub fn resume_matches(root: &Path) -> Result<bool> {
    let (tiles, manifest) = synthetic_tiles(12, 8, 9);
    let (train, val) = split_tiles(&tiles, 4);
    let cfg = small_config(4);
    let mut noop = |_: &EpochRecord, _: &Model, _: &TrainState, _: bool| Ok(());

    let mut full = Model::new(cfg.model_config(&manifest)?, 3)?;
    let mut full_state = TrainState::new(&full, Phase::Pretrain, &cfg);
    pretrain(&mut full, &mut full_state, &train, &val, &cfg, &mut noop)?;

    let half_cfg = TrainConfig { pretrain_epochs: 2, ..cfg.clone() };
    let mut half = Model::new(cfg.model_config(&manifest)?, 3)?;
    let mut half_state = TrainState::new(&half, Phase::Pretrain, &half_cfg);
    pretrain(&mut half, &mut half_state, &train, &val, &half_cfg, &mut noop)?;
    fs::create_dir_all(root).unwrap();
    let path = root.join("half.omnf");
    save_checkpoint(&path, &half, &half_state, &half_cfg)?;
    let ck = load_checkpoint(&path)?;
    let (mut resumed, mut state) = (ck.model, ck.state);
    pretrain(&mut resumed, &mut state, &train, &val, &cfg, &mut noop)?;

    Ok(encode_checkpoint(&resumed, &state, &cfg)? == encode_checkpoint(&full, &full_state, &cfg)?)
}

pub fn scheduler_optimizer(root: &Path) -> Outcome {
    let plateau = plateau_boundary();
    let adam = adam_closed_form();
    let resume = resume_matches(root);
    let resume_ok = matches!(resume, Ok(true));
    Outcome::new(
        plateau && adam && resume_ok,
        format!("plateau boundary {plateau}, Adam first step {adam}, resume bit-exact {}", match resume {
            Ok(b) => b.to_string(),
            Err(e) => format!("error: {e}"),
        }),
    )
}

pub fn f1_conventions() -> Outcome {
    // Class A: TP=1 FP=1 FN=0; class B: TP=1 FP=0 FN=1.
    let r = f1_scores(&[vec![1, 1], vec![1, 0], vec![0, 0]], &[vec![1, 1], vec![0, 0], vec![0, 1]]).unwrap();
    let hand = r.macro_f1 == 2.0 / 3.0 && r.per_class == [2.0 / 3.0, 2.0 / 3.0] && r.micro_f1 == 2.0 / 3.0;
    // Second class never occurs and is never predicted: F1 0, weight 0.
    let z = f1_scores(&[vec![1, 0], vec![0, 0]], &[vec![1, 0], vec![0, 0]]).unwrap();
    let zero = z.per_class == [1.0, 0.0] && z.macro_f1 == 0.5 && z.weighted_f1 == 1.0 && z.support == [1, 0];
    // Nothing positive anywhere: every score is 0.
    let e = f1_scores(&[vec![0, 0]], &[vec![0, 0]]).unwrap();
    let empty = e.weighted_f1 == 0.0 && e.macro_f1 == 0.0 && e.micro_f1 == 0.0;
    Outcome::new(hand && zero && empty, format!("two-class macro 2/3 {hand}, zero support {zero}, all-negative {empty}"))
}

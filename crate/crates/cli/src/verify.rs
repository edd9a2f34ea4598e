//! Self-checks against straightforward reference computations.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use omnifuse_core::autograd::{Gradients, ParamStore, Tape};
use omnifuse_core::dataspec::{generate_synthetic, SyntheticConfig};
use omnifuse_core::encoders::{
    select_reconstruction_dates, AttentionTrace, ImageCodec, ImageCodecConfig, PoolTrace, TemporalCodec,
    TemporalCodecConfig,
};
use omnifuse_core::nn::{Activation, Init};
use omnifuse_core::objectives::{
    build_match_matrix, build_naive_match_matrix, contrastive_loss, date_mask, naive_contrastive_loss,
    reconstruction_loss, Match, ReconTerm,
};
use omnifuse_core::tensor::Tensor;
use omnifuse_core::tokenizer::{assemble_batch, TokenBatch, TokenIndex, TokenRaw};
use omnifuse_core::training::{gradient_check, GradCheckReport, Model, TrainConfig};
use omnifuse_core::Result;

use crate::{CliError, VerifyArgs};

struct Check {
    name: String,
    pass: bool,
    detail: String,
}

fn classify(a: &TokenIndex, b: &TokenIndex, is_self: bool, naive: bool) -> Match {
    if is_self {
        Match::Ignored
    } else if a.tile == b.tile && a.modality == b.modality {
        if naive {
            Match::Negative
        } else {
            Match::Ignored
        }
    } else if a.tile == b.tile && a.patch == b.patch {
        Match::Positive
    } else {
        Match::Negative
    }
}

fn shuffled_batch(rng: &mut ChaCha8Rng, modalities: usize, patches: &[usize]) -> TokenBatch {
    let mut indices = Vec::new();
    let mut tile_partition = Vec::new();
    for (t, &p) in patches.iter().enumerate() {
        let start = indices.len();
        let mut tile: Vec<TokenIndex> = (0..modalities)
            .flat_map(|m| (0..p).map(move |q| TokenIndex { modality: m, patch: q, tile: t, position_m: (q as f64, 0.0) }))
            .collect();
        tile.shuffle(rng);
        indices.extend(tile);
        tile_partition.push(start..indices.len());
    }
    let n = indices.len();
    TokenBatch {
        specs: Vec::new(),
        tile_ids: (0..patches.len()).map(|t| format!("t{t}")).collect(),
        grids: patches.iter().map(|&p| (p, 1)).collect(),
        indices,
        raw: vec![TokenRaw::Image { values: Vec::new() }; n],
        tile_partition,
    }
}

fn random_batch(rng: &mut ChaCha8Rng) -> TokenBatch {
    let m = rng.random_range(2..=4);
    let patches: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(1..=4)).collect();
    shuffled_batch(rng, m, &patches)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn reference_contrastive(emb: &Tensor, batch: &TokenBatch, gamma: f64, naive: bool) -> f64 {
    let t = batch.len();
    let mut total = 0.0;
    for i in 0..t {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..t {
            let class = classify(&batch.indices[i], &batch.indices[j], i == j, naive);
            if class == Match::Ignored {
                continue;
            }
            let s: f64 = emb.row(i).iter().zip(emb.row(j)).map(|(a, b)| a * b).sum();
            den += (s / gamma).exp();
            if class == Match::Positive {
                num += (s / gamma).exp();
            }
        }
        total -= (num / den).ln();
    }
    total / t as f64
}

fn match_matrix(seeds: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad = 0;
    for _ in 0..seeds {
        let batch = random_batch(&mut rng);
        for naive in [false, true] {
            let built = if naive { build_naive_match_matrix(&batch) } else { build_match_matrix(&batch) };
            let t = batch.len();
            let ok = built.is_ok_and(|m| {
                (0..t * t).all(|k| m.entries[k] == classify(&batch.indices[k / t], &batch.indices[k % t], k / t == k % t, naive))
            });
            bad += usize::from(!ok);
        }
    }
    Check { name: "match matrix".into(), pass: bad == 0, detail: format!("{} matrices, {bad} mismatches", 2 * seeds) }
}

fn closed_forms() -> Check {
    let batch = shuffled_batch(&mut ChaCha8Rng::seed_from_u64(0), 3, &[2, 2]);
    let emb = Tensor::from_vec(&[12, 3], [0.4, -0.3, 0.8].repeat(12));
    let full = build_match_matrix(&batch).and_then(|m| contrastive_loss(&emb, &m, 0.1)).map(|r| r.0);
    let naive = naive_contrastive_loss(&emb, &batch, 0.1).map(|r| r.0);
    let (ef, en) = match (full, naive) {
        (Ok(f), Ok(n)) => ((f + 0.2f64.ln()).abs(), (n + (2.0f64 / 11.0).ln()).abs()),
        _ => (f64::INFINITY, f64::INFINITY),
    };
    Check {
        name: "contrastive closed forms".into(),
        pass: ef <= 1e-9 && en <= 1e-9,
        detail: format!("errors {ef:.1e} (full), {en:.1e} (naive)"),
    }
}

fn worse(w: f64, e: f64) -> f64 {
    if e.is_nan() {
        f64::INFINITY
    } else {
        w.max(e)
    }
}

fn loss_values(seeds: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..seeds {
        let batch = random_batch(&mut rng);
        let gamma = rng.random_range(0.05..1.0);
        let d = rng.random_range(1..=8);
        let emb = random_tensor(&mut rng, &[batch.len(), d]);
        let full = build_match_matrix(&batch).and_then(|m| contrastive_loss(&emb, &m, gamma)).map_or(f64::NAN, |r| r.0);
        let naive = naive_contrastive_loss(&emb, &batch, gamma).map_or(f64::NAN, |r| r.0);
        worst = worse(worst, (full - reference_contrastive(&emb, &batch, gamma, false)).abs());
        worst = worse(worst, (naive - reference_contrastive(&emb, &batch, gamma, true)).abs());

        let (l, c) = (rng.random_range(1..=12), rng.random_range(1..=4));
        let dec = random_tensor(&mut rng, &[l * c]).into_data();
        let tgt = random_tensor(&mut rng, &[l * c]).into_data();
        let img_dec = random_tensor(&mut rng, &[16]).into_data();
        let img_tgt = random_tensor(&mut rng, &[16]).into_data();
        let dates: Vec<usize> = (0..l).filter(|&t| t == 0 || rng.random_bool(0.4)).collect();
        let mask = date_mask(&dates, l, c);
        let terms = [
            ReconTerm { decoded: &img_dec, target: &img_tgt, include: None },
            ReconTerm { decoded: &dec, target: &tgt, include: Some(&mask) },
        ];
        let got = reconstruction_loss(&terms).map_or(f64::NAN, |r| r.0);
        let img: f64 = img_dec.iter().zip(&img_tgt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 16.0;
        let ser: f64 = dates
            .iter()
            .flat_map(|&t| (0..c).map(move |k| t * c + k))
            .map(|i| (dec[i] - tgt[i]).powi(2))
            .sum::<f64>()
            / (dates.len() * c) as f64;
        worst = worse(worst, (got - (img + ser) / 2.0).abs());
    }
    Check { name: "loss values".into(), pass: worst <= 1e-6, detail: format!("{seeds} instances, max error {worst:.1e}") }
}

fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn corrupt(g: &mut Gradients, store: &ParamStore) {
    if let Some(id) = store.ids().find(|&id| g.get(id).is_some()) {
        g.get_mut(id).unwrap().data_mut()[0] += 0.5;
    }
}

fn grad_contrastive(fault: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let batch = shuffled_batch(&mut rng, 3, &[2, 3]);
    let matrix = build_match_matrix(&batch)?;
    let mut store = ParamStore::new();
    let emb = store.add("emb", random_tensor(&mut rng, &[batch.len(), 4]));
    let (_, g) = contrastive_loss(store.get(emb), &matrix, 0.5)?;
    let mut grads = Gradients::new(store.len());
    grads.accumulate_param(emb, &g);
    if fault {
        corrupt(&mut grads, &store);
    }
    gradient_check(&store, &grads, |s| Ok(contrastive_loss(s.get(emb), &matrix, 0.5)?.0), 1e-4, 500, 0)
}

fn grad_tape<F>(store: &ParamStore, run: F, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<omnifuse_core::autograd::Var>,
{
    let mut tape = Tape::new(store);
    let l = run(&mut tape)?;
    let g = tape.backward(&[(l, Tensor::scalar(1.0))]);
    gradient_check(
        store,
        &g,
        |s| {
            let mut t = Tape::new(s);
            let l = run(&mut t)?;
            Ok(t.value(l).item())
        },
        tol,
        600,
        0,
    )
}

fn grad_image() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let cfg = ImageCodecConfig { channels: 2, patch_px: 4, d: 6, pools: vec![2, 2], activation: Activation::Gelu, bypass: true };
    let codec = ImageCodec::new(&mut Init::new(&mut store, 3), "img", cfg)?;
    perturb(&mut store, &mut rng, 0.1);
    let x = random_tensor(&mut rng, &[2, 32]);
    grad_tape(
        &store,
        |tape| {
            let xv = tape.constant(x.clone());
            let (e, trace) = codec.encode(tape, xv)?;
            let y = codec.decode(tape, e, Some(&trace))?;
            let rec = tape.sq_err_sum(y, x.data());
            let s = tape.sum_all(e);
            Ok(tape.add(rec, s))
        },
        1e-3,
    )
}

fn grad_temporal() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let codec = TemporalCodec::new(
        &mut Init::new(&mut store, 4),
        "ts",
        TemporalCodecConfig { channels: 3, d: 8, heads: 2, key_dim: 4 },
    )?;
    perturb(&mut store, &mut rng, 0.1);
    let days = [12u16, 40, 101, 200, 333];
    let mut valid = vec![true; 10];
    valid[3] = false;
    let x = random_tensor(&mut rng, &[10, 3]);
    grad_tape(
        &store,
        |tape| {
            let xv = tape.constant(x.clone());
            let (e, _) = codec.encode(tape, xv, &days, &valid)?;
            let y = codec.decode(tape, e, &days)?;
            let rec = tape.sq_err_sum(y, x.data());
            let s = tape.sum_all(e);
            Ok(tape.add(rec, s))
        },
        1e-3,
    )
}

fn grad_model() -> Result<(GradCheckReport, GradCheckReport)> {
    let synth = SyntheticConfig { num_tiles: 1, num_classes: 3, grid: [2, 1], ..Default::default() };
    let ds = generate_synthetic(&synth, 6)?;
    let cfg = TrainConfig { d: 8, blocks: 1, heads: 2, key_dim: 4, ffn_mult: 2, ..Default::default() };
    let mut model = Model::new(cfg.model_config(&ds.manifest)?, 6)?;
    perturb(&mut model.store, &mut ChaCha8Rng::seed_from_u64(16), 0.05);
    let batch = assemble_batch(&ds.tiles, &ds.manifest.modalities)?;
    let y: Vec<Vec<f64>> =
        vec![ds.tiles[0].labels()?.unwrap_or_default().iter().map(|&v| f64::from(v)).collect()];
    let with = |s: &ParamStore| {
        let mut m = model.clone();
        m.store = s.clone();
        m
    };
    let g = model.pretrain_step(&batch, &cfg, 7, true)?.1.unwrap_or_else(|| Gradients::new(0));
    let pre = gradient_check(
        &model.store,
        &g,
        |s| Ok(with(s).pretrain_step(&batch, &cfg, 7, false)?.0.total),
        1e-3,
        800,
        1,
    )?;
    let g = model.supervised_step(&batch, &y, true)?.1.unwrap_or_else(|| Gradients::new(0));
    let sup = gradient_check(&model.store, &g, |s| Ok(with(s).supervised_step(&batch, &y, false)?.0), 1e-3, 800, 2)?;
    Ok((pre, sup))
}

fn gradient_report(name: &str, r: Result<GradCheckReport>) -> Check {
    let name = format!("gradient/{name}");
    match r {
        Ok(r) => {
            let mut detail = format!("{} entries, max rel err {:.1e}", r.checked, r.max_rel_err);
            if let Some(w) = r.failures.first() {
                detail += &format!(
                    "; `{}`[{}] analytic {:.6} numeric {:.6}",
                    w.param, w.index, w.analytic, w.numeric
                );
            }
            Check { name, pass: r.passed(), detail }
        }
        Err(e) => Check { name, pass: false, detail: e.to_string() },
    }
}

fn traced_position(trace: &PoolTrace, patch: usize, channel: usize) -> usize {
    let mut pos = 0;
    for s in trace.stages.iter().rev() {
        let o = s.side / s.factor;
        pos = s.indices[(patch * s.channels + channel) * o * o + pos];
    }
    pos
}

fn unpool(seeds: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut bad, mut trials) = (0, 0);
    for (c, w, pools) in [(3usize, 8usize, vec![2usize, 2, 2]), (2, 6, vec![3, 2])] {
        let mut store = ParamStore::new();
        let cfg = ImageCodecConfig { channels: c, patch_px: w, d: c, pools, activation: Activation::Identity, bypass: true };
        let Ok(codec) = ImageCodec::new(&mut Init::new(&mut store, 0), "img", cfg) else {
            bad += 1;
            continue;
        };
        codec.set_identity_weights(&mut store);
        let plane = w * w;
        for _ in 0..seeds {
            trials += 1;
            let mut x: Vec<f64> = (0..c * plane).map(|_| rng.random_range(-1.0..-0.01)).collect();
            let peaks: Vec<(usize, usize, f64)> =
                (0..c).map(|ch| (ch, rng.random_range(0..plane), rng.random_range(0.5..2.0))).collect();
            for &(ch, at, v) in &peaks {
                x[ch * plane + at] = v;
            }
            let mut tape = Tape::new(&store);
            let xv = tape.constant(Tensor::from_vec(&[1, c * plane], x));
            let ok = codec
                .encode(&mut tape, xv)
                .and_then(|(e, trace)| Ok((codec.decode(&mut tape, e, Some(&trace))?, trace)))
                .is_ok_and(|(y, trace)| {
                    let out = tape.value(y).data();
                    peaks.iter().all(|&(ch, at, v)| {
                        let p = &out[ch * plane..(ch + 1) * plane];
                        traced_position(&trace, 0, ch) == at
                            && p[at] == v
                            && p.iter().enumerate().all(|(i, &u)| i == at || u == 0.0)
                    })
                });
            bad += usize::from(!ok);
        }
    }
    Check { name: "unpool placement".into(), pass: bad == 0, detail: format!("{trials} trials, {bad} misplaced") }
}

fn date_filter(seeds: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut bad = 0;
    for l in [4usize, 8, 12, 61] {
        let k = (l as f64 * 0.25).ceil() as usize;
        for _ in 0..seeds {
            let trace: Vec<f64> = (0..l).map(|_| f64::from(rng.random_range(0..6u8)) / 10.0).collect();
            let mut order: Vec<usize> = (0..l).collect();
            order.sort_by(|&a, &b| trace[b].total_cmp(&trace[a]).then(a.cmp(&b)));
            let mut want = order[..k].to_vec();
            want.sort_unstable();
            let got = select_reconstruction_dates(&AttentionTrace(trace), &vec![true; l], 0.25);
            bad += usize::from(got.ok() != Some(want));
        }
    }
    Check { name: "date filter".into(), pass: bad == 0, detail: format!("{} traces, {bad} mismatches", 4 * seeds) }
}

pub fn run(a: &VerifyArgs) -> std::result::Result<(), CliError> {
    if a.seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let start = Instant::now();
    let fault = a.inject_fault.as_deref() == Some("grad");
    let mut checks = vec![match_matrix(a.seeds), closed_forms(), loss_values(a.seeds)];
    checks.push(gradient_report("contrastive", grad_contrastive(fault)));
    checks.push(gradient_report("image codec", grad_image()));
    checks.push(gradient_report("temporal codec", grad_temporal()));
    match grad_model() {
        Ok((pre, sup)) => {
            checks.push(gradient_report("model pretrain", Ok(pre)));
            checks.push(gradient_report("model supervised", Ok(sup)));
        }
        Err(e) => checks.push(gradient_report("model", Err(e))),
    }
    checks.push(unpool(a.seeds));
    checks.push(date_filter(a.seeds));
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    println!(
        "{} passed, {} failed in {:.1} s",
        checks.len() - failed.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("verification failed: {}", failed.join(", "))))
    }
}

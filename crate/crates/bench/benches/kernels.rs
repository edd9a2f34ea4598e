use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use omnifuse_core::autograd::{ParamStore, Tape};
use omnifuse_core::dataspec::{generate_synthetic, SyntheticConfig};
use omnifuse_core::encoders::{ImageCodec, ImageCodecConfig};
use omnifuse_core::nn::{Activation, Init};
use omnifuse_core::objectives::{build_match_matrix, contrastive_loss};
use omnifuse_core::tensor::{matmul, Tensor};
use omnifuse_core::tokenizer::assemble_batch;
use omnifuse_core::training::{Model, TrainConfig};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, b) = (random(&mut rng, &[256, 64]), random(&mut rng, &[256, 64]));
    c.bench_function("matmul 256x64 * 64x256", |bench| bench.iter(|| matmul(black_box(&a), black_box(&b), true)));

    let mut store = ParamStore::new();
    let cfg = ImageCodecConfig { channels: 3, patch_px: 4, d: 64, pools: vec![2, 2], activation: Activation::Gelu, bypass: true };
    let codec = ImageCodec::new(&mut Init::new(&mut store, 1), "img", cfg).unwrap();
    let x = random(&mut rng, &[16, 48]);
    c.bench_function("image codec encode+decode 16 patches", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new(&store);
            let xv = tape.constant(x.clone());
            let (e, trace) = codec.encode(&mut tape, xv).unwrap();
            black_box(codec.decode(&mut tape, e, Some(&trace)).unwrap());
        })
    });

    let synth = SyntheticConfig { num_tiles: 16, ..Default::default() };
    let ds = generate_synthetic(&synth, 2).unwrap();
    let batch = assemble_batch(&ds.tiles, &ds.manifest.modalities).unwrap();
    let matrix = build_match_matrix(&batch).unwrap();
    let emb = random(&mut rng, &[batch.len(), 64]);
    c.bench_function("contrastive loss 16 tiles d64", |bench| {
        bench.iter(|| contrastive_loss(black_box(&emb), &matrix, 0.1).unwrap())
    });

    let train = TrainConfig { d: 64, blocks: 2, heads: 4, ..Default::default() };
    let model = Model::new(train.model_config(&ds.manifest).unwrap(), 0).unwrap();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("pretrain step 16 tiles d64", |bench| {
        bench.iter(|| model.pretrain_step(black_box(&batch), &train, 3, true).unwrap())
    });
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);

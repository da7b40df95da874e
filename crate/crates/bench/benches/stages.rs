use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use uglyduck_bench::{random_boxes, random_crops};
use uglyduck_core::detector::{baseline_blob_detect, crop_lesion, ClassicalParams};
use uglyduck_core::image::RgbImage;
use uglyduck_core::nn::Tensor;
use uglyduck_core::scoring::embedding_distances;
use uglyduck_core::segmenter::build_compact_unet;
use uglyduck_core::synthgen::{generate_patient, SynthConfig};
use uglyduck_core::tiling::{nms, tile_image};
use uglyduck_core::vae::{build_vae, LatentEmbedding};

fn geometry(c: &mut Criterion) {
    let boxes = random_boxes(200, 1);
    c.bench_function("nms_200", |b| b.iter(|| nms(black_box(&boxes), 0.45)));
    let (img, truth) = generate_patient(&SynthConfig { seed: 1, ..SynthConfig::default() }).unwrap();
    c.bench_function("tile_1640x1116", |b| b.iter(|| tile_image(black_box(&img), 512, 0.5).unwrap()));
    let tile = tile_image(&img, 512, 0.5).unwrap().swap_remove(5);
    c.bench_function("classical_detect_tile", |b| b.iter(|| baseline_blob_detect(black_box(&tile.pixels), &ClassicalParams::default())));
    c.bench_function("crop_lesion", |b| b.iter(|| crop_lesion(&img, black_box(&truth.boxes[0]), 64, 0)));
}

fn networks(c: &mut Criterion) {
    let mut g = c.benchmark_group("networks");
    g.sample_size(10);
    let crops = random_crops(8, 64, 2);
    let tensors: Vec<Tensor> = crops.iter().map(RgbImage::to_tensor).collect();
    let x = Tensor::stack(&tensors.iter().collect::<Vec<_>>());
    let unet = build_compact_unet(16, 0).unwrap();
    g.bench_function("unet_forward_8", |b| b.iter(|| unet.net.forward(black_box(&x))));
    let vae = build_vae(32, 4.0, 0).unwrap();
    g.bench_function("vae_encode_8", |b| b.iter(|| vae.encode_mu(black_box(&x))));
    g.finish();
    let emb: Vec<LatentEmbedding> = (0..80).map(|i| LatentEmbedding { lesion_id: i, mu: (0..32).map(|j| ((i * 7 + j) % 13) as f32).collect() }).collect();
    c.bench_function("embedding_distances_80", |b| b.iter(|| embedding_distances("p", black_box(&emb)).unwrap()));
}

criterion_group!(benches, geometry, networks);
criterion_main!(benches);

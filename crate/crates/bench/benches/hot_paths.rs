use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmhfs::augment::{AugPipeline, DEFAULT_HW};
use tmhfs::backbone::{Backbone, BackboneConfig, NormMode};
use tmhfs::checkpoint;
use tmhfs::heads::ConfidenceParams;
use tmhfs::image::Image;
use tmhfs::pipeline::ModelState;
use tmhfs::transduction::transduce;
use tmhfs::{Tape, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn backbone_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("backbone_forward_backward");
    group.sample_size(10);
    for (hw, k) in [(32, 16), (84, 64)] {
        let cfg = BackboneConfig {
            channels: k,
            input_hw: hw,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(cfg, &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[16, hw, hw, 3]);
        group.bench_function(BenchmarkId::from_parameter(format!("{hw}px_k{k}_batch16")), |b| {
            b.iter(|| {
                let mut tape = Tape::<f32>::new();
                let vars = bb.bind(&mut tape);
                let input = tape.constant(&x);
                let out = bb.forward(&mut tape, &vars, input, NormMode::Batch).unwrap();
                let sq = tape.square(out.pooled);
                let loss = tape.sum(sq);
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn transduction(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = 64;
    let support = random_tensor(&mut rng, &[25, k]);
    let query = random_tensor(&mut rng, &[75, k]);
    let labels: Vec<usize> = (0..5).flat_map(|c| [c; 5]).collect();
    let phi = ConfidenceParams::new(k, &mut rng);
    let mut group = c.benchmark_group("transduce_5way_5shot_15query");
    for t in [0, 1, 10] {
        group.bench_function(BenchmarkId::from_parameter(format!("t{t}")), |b| {
            b.iter(|| transduce(&support, &labels, 5, Some(&query), &phi, t).unwrap())
        });
    }
    group.finish();
}

fn augmentation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Image::new(96, 96, (0..96 * 96 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let mut group = c.benchmark_group("augment_84px");
    for id in ["S", "SJHR", "CJH"] {
        let p = AugPipeline::parse(id, DEFAULT_HW).unwrap();
        group.bench_function(BenchmarkId::from_parameter(id), |b| b.iter(|| p.apply_seeded(&img, 7, 0, 0)));
    }
    group.finish();
}

fn checkpoint_codec(c: &mut Criterion) {
    let model = ModelState::new(BackboneConfig::default(), 64, 4).unwrap();
    let bytes = checkpoint::encode(&model).unwrap();
    let path = std::path::Path::new("bench.ckpt");
    c.bench_function("checkpoint_encode_conv4_k64", |b| b.iter(|| checkpoint::encode(&model).unwrap()));
    c.bench_function("checkpoint_decode_conv4_k64", |b| b.iter(|| checkpoint::decode(path, &bytes).unwrap()));
}

criterion_group!(benches, backbone_step, transduction, augmentation, checkpoint_codec);
criterion_main!(benches);

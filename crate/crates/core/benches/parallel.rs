//! Rayon data-parallel path against the sequential fallback on the two hot
//! spots: one convolution layer and one full pretraining forward/backward.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use edmae::graph::Graph;
use edmae::masking::sample_mask;
use edmae::model::EdmaeModel;
use edmae::par;
use edmae::tensor::Tensor;

const BATCH: usize = 16;

fn image(n: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, 1, 64, 64], |i| ((i * 7919) % 1009) as f32 / 1009.0)
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn conv_layer(c: &mut Criterion) {
    let x = Tensor::from_fn(&[BATCH, 16, 32, 32], |i| ((i % 97) as f32 - 48.0) / 48.0);
    let w = Tensor::from_fn(&[8, 16, 3, 3], |i| ((i % 13) as f32 - 6.0) / 20.0);
    let b = Tensor::<f32>::zeros(&[8]);
    let mut group = c.benchmark_group("conv3x3_fwd_bwd");
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::set_sequential(seq);
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let (xv, wv, bv) = (g.param(x.clone()).unwrap(), g.param(w.clone()).unwrap(), g.param(b.clone()).unwrap());
                let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
                let s = g.sum(y).unwrap();
                g.backward(s).unwrap();
            });
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn pretrain_step(c: &mut Criterion) {
    let model = EdmaeModel::new(Default::default(), 0).unwrap();
    let img = image(BATCH);
    let specs: Vec<_> = (0..BATCH as u64).map(|s| sample_mask(8, 8, 8, 0.75, s).unwrap()).collect();
    let mut group = c.benchmark_group("pretrain_step");
    group.sample_size(10);
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::set_sequential(seq);
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let bound = model.bind(&mut g).unwrap();
                let v = model.pretrain_graph(&mut g, &bound, &img, &specs).unwrap();
                g.backward(v.total_loss).unwrap();
            });
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, conv_layer, pretrain_step);
criterion_main!(benches);

use camlab::cam::{self, CamConfig, CamMethod};
use camlab::data::{generate_sample, DatasetSpec, Split};
use camlab::metrics::{self, BBox};
use camlab::model::{Arch, Branch, DualBranchModel};
use camlab::{ops, Tensor};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn conv(c: &mut Criterion) {
    let x = Tensor::<f32>::from_fn([8, 16, 16, 16], |i| ((i * 7919) % 97) as f32 / 97.0);
    let k = Tensor::<f32>::from_fn([32, 16, 3, 3], |i| ((i * 104729) % 61) as f32 / 61.0 - 0.5);
    c.bench_function("conv2d_forward 8x16x16x16 -> 32", |b| {
        b.iter(|| ops::conv2d_forward(black_box(&x), black_box(&k), 1, 1).unwrap())
    });
}

fn heatmap(side: usize) -> Tensor<f32> {
    let c = side as f32 / 2.0;
    Tensor::from_fn([side, side], |p| {
        let (x, y) = ((p % side) as f32 - c, (p / side) as f32 - c);
        (-(x * x + y * y) / (side as f32 * 2.0)).exp()
    })
}

fn boxes(c: &mut Criterion) {
    let map = heatmap(64);
    c.bench_function("heatmap_to_boxes 64x64", |b| {
        b.iter(|| metrics::heatmap_to_boxes(black_box(&map), 0.5).unwrap())
    });
    let maps: Vec<_> = (0..16).map(|_| map.clone()).collect();
    let gt = vec![BBox::new(16, 16, 48, 48).unwrap(); 16];
    c.bench_function("max_box_acc_v2 16 maps", |b| {
        b.iter(|| metrics::max_box_acc_v2(black_box(&gt), black_box(&maps)).unwrap())
    });
}

fn explain(c: &mut Criterion) {
    let mut model = DualBranchModel::new(Arch::default(), 4, 7).unwrap();
    model.replicate_head(8, false).unwrap();
    let image = generate_sample(&DatasetSpec::default(), Split::Test, 0)
        .unwrap()
        .image;
    let mut group = c.benchmark_group("explain");
    for method in CamMethod::ALL {
        let cfg = CamConfig::new(method, Branch::Sigmoid, true);
        group.bench_function(method.name(), |b| {
            b.iter(|| cam::explain(&model, black_box(&image), &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, boxes, explain);
criterion_main!(benches);

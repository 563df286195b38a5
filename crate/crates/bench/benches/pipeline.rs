use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxseg_core::inference::{predict_volume, TileConfig};
use voxseg_core::losses::{generalized_dice_grad, generalized_dice_loss, one_hot_labels, WeightMode};
use voxseg_core::metrics::hd95;
use voxseg_core::nets::{NetConfig, Network, Variant};
use voxseg_core::nn::to_f64;
use voxseg_core::preprocess::normalize_case;
use voxseg_core::sampler::extract_patch;
use voxseg_core::trainer::compute_batch_gradients;
use voxseg_core::volume::phantom::{make_phantom, PhantomSpec};
use voxseg_core::volume::regions_from_labels;

fn bench_phantom(c: &mut Criterion) {
    c.bench_function("phantom_64", |b| {
        b.iter(|| make_phantom(&PhantomSpec::default()).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let case = normalize_case(make_phantom(&PhantomSpec::default()).unwrap()).unwrap();
    let net = Network::build(&NetConfig::toy(Variant::UnetResidual), 3).unwrap();
    let patch = extract_patch(&case, [32, 32, 32], [32, 32, 32]);
    let batch = vec![(patch.modalities.clone(), patch.labels.clone().unwrap())];
    c.bench_function("train_step_res_unet_32", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            compute_batch_gradients(
                &net,
                &batch,
                1e-5,
                WeightMode::InverseVolume,
                1e-5,
                &mut rng,
            )
            .unwrap()
        })
    });
}

fn bench_gdl(c: &mut Criterion) {
    let case = make_phantom(&PhantomSpec::default()).unwrap();
    let patch = extract_patch(&case, [32, 32, 32], [32, 32, 32]);
    let onehot = one_hot_labels(&patch.labels.as_ref().unwrap().view());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probs = to_f64(&patch.modalities.mapv(|_| rng.random_range(0.0..1.0f32)));
    c.bench_function("gdl_loss_and_grad_32", |b| {
        b.iter(|| {
            let l = generalized_dice_loss(
                &probs.view(),
                &onehot.view(),
                1e-5,
                WeightMode::SquaredInverseVolume,
            )
            .unwrap();
            let g = generalized_dice_grad(
                &probs.view(),
                &onehot.view(),
                1e-5,
                WeightMode::SquaredInverseVolume,
            )
            .unwrap();
            (l, g)
        })
    });
}

fn bench_sliding_window(c: &mut Criterion) {
    let case = normalize_case(make_phantom(&PhantomSpec::default()).unwrap()).unwrap();
    let net = Network::build(&NetConfig::toy(Variant::UnetBasic), 5).unwrap();
    let tile = TileConfig {
        patch_size: 32,
        overlap: 0.5,
    };
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    group.bench_function("sliding_window_64_patch32_overlap05", |b| {
        b.iter(|| predict_volume(&net, &case, &tile).unwrap())
    });
    group.finish();
}

fn bench_hd95(c: &mut Criterion) {
    let case = make_phantom(&PhantomSpec::default()).unwrap();
    let regions = regions_from_labels(case.labels.as_ref().unwrap());
    let shifted = {
        let mut m = regions.wt.clone();
        m.swap_axes(1, 2);
        m.as_standard_layout().into_owned()
    };
    c.bench_function("hd95_64", |b| {
        b.iter(|| hd95(&regions.wt, &shifted, [1.0; 3]).unwrap())
    });
}

criterion_group!(
    benches,
    bench_phantom,
    bench_train_step,
    bench_gdl,
    bench_sliding_window,
    bench_hd95
);
criterion_main!(benches);

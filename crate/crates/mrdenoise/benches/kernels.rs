//! Parallel-vs-sequential comparison of the hot kernels at desk-scale
//! training shapes. The sequential numbers come from the same binary via the
//! sequential override, so both paths are measured on identical inputs;
//! outputs are bit-identical either way.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mrdenoise::data::Volume;
use mrdenoise::exec::SequentialGuard;
use mrdenoise::metrics::ssim;
use mrdenoise::noise::{add_rician, NoiseSpec};
use mrdenoise::tensor::kernels::{self, KernelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Runs `f` under both execution modes as two bench entries in one group.
fn both_modes<F: FnMut()>(c: &mut Criterion, group: &str, mut f: F) {
    let mut g = c.benchmark_group(group);
    g.bench_function("parallel", |b| b.iter(&mut f));
    g.bench_function("sequential", |b| {
        let _guard = SequentialGuard::new();
        b.iter(&mut f)
    });
    g.finish();
}

fn bench_linear(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (rows, d_in, d_out) = (32usize, 1536usize, 3072usize);
    let x = randv(&mut rng, rows * d_in);
    let w = randv(&mut rng, d_out * d_in);
    let bias = randv(&mut rng, d_out);
    let mut out = vec![0.0f32; rows * d_out];
    both_modes(c, "linear_fwd_32x1536x3072", || {
        kernels::linear_fwd(&x, &w, &bias, rows, d_in, d_out, &mut out);
    });

    let dout = randv(&mut rng, rows * d_out);
    both_modes(c, "linear_bwd_w_32x1536x3072", || {
        let mut dw = vec![0.0f32; d_out * d_in];
        kernels::linear_bwd_w(&dout, &x, rows, d_in, d_out, &mut dw);
    });
}

fn bench_conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, cin, cout, dims) = (32usize, 16usize, 32usize, (6usize, 16usize, 16usize));
    let dhw = dims.0 * dims.1 * dims.2;
    let x = randv(&mut rng, n * cin * dhw);
    let k = randv(&mut rng, cout * cin * 27);
    let mut out = vec![0.0f32; n * cout * dhw];
    both_modes(c, "conv3d_fwd_32x16to32_6x16x16", || {
        out.iter_mut().for_each(|v| *v = 0.0);
        kernels::corr3(&x, &k, KernelMap::conv(cin), n, cin, cout, dims, &mut out);
    });

    let dout = randv(&mut rng, n * cout * dhw);
    both_modes(c, "conv3d_bwd_kernel_32x16to32", || {
        let mut dk = vec![0.0f32; cout * cin * 27];
        kernels::corr3_kernel_grad(&dout, &x, n, cout, cin, dims, &mut dk);
    });
}

fn bench_rician(c: &mut Criterion) {
    let volume = Volume::new(
        (176, 256, 6),
        (0..176 * 256 * 6)
            .map(|i| (i % 251) as f32 / 251.0)
            .collect(),
    )
    .unwrap();
    let spec = NoiseSpec::new(0.15, 7).unwrap();
    c.bench_function("rician_noise_176x256x6", |b| {
        b.iter_batched(
            || volume.clone(),
            |v| add_rician(&v, &spec).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn bench_ssim(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clean = Volume::new(
        (64, 64, 6),
        randv(&mut rng, 64 * 64 * 6).iter().map(|v| v.abs()).collect(),
    )
    .unwrap();
    let noisy = add_rician(&clean, &NoiseSpec::new(0.09, 5).unwrap()).unwrap();
    c.bench_function("ssim_64x64x6", |b| b.iter(|| ssim(&noisy, &clean).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_linear, bench_conv3d, bench_rician, bench_ssim
}
criterion_main!(benches);

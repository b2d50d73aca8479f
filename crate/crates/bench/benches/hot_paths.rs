use criterion::{black_box, criterion_group, criterion_main, Criterion};

use clmr_core::data::{argmax_mask, dice_foreground, generate_phantoms, stack_batch, PhantomMode};
use clmr_core::grad::{BnMode, Graph, Padding, Tensor};
use clmr_core::model::{Arch, ModelSpec, Network};
use clmr_core::optim::{HyperParams, Optimizer, OptimizerKind};
use clmr_core::schedule::CycleConfig;

fn bench_schedule(c: &mut Criterion) {
    let cfg = CycleConfig::with_defaults(20, 20, 169).unwrap();
    c.bench_function("schedule_lr_mr_16900", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for i in 0..16900 {
                acc += cfg.lr_at(black_box(i)) + cfg.mr_at(black_box(i));
            }
            acc
        })
    });
}

fn conv_inputs() -> (Tensor, Tensor, Tensor) {
    let x = Tensor::new(
        [2, 8, 32, 32],
        (0..2 * 8 * 32 * 32).map(|i| (i % 97) as f64 / 97.0).collect::<Vec<_>>(),
    )
    .unwrap();
    let w = Tensor::new(
        [16, 8, 3, 3],
        (0..16 * 8 * 9).map(|i| ((i % 31) as f64 - 15.0) / 40.0).collect::<Vec<_>>(),
    )
    .unwrap();
    let b = Tensor::zeros([16]);
    (x, w, b)
}

fn bench_conv(c: &mut Criterion) {
    let (x, w, b) = conv_inputs();
    c.bench_function("conv2d_same_forward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.param(w.clone());
            let bv = g.param(b.clone());
            g.conv2d(black_box(xv), wv, bv, Padding::Same).unwrap()
        })
    });
    c.bench_function("conv2d_same_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.param(w.clone());
            let bv = g.param(b.clone());
            let y = g.conv2d(black_box(xv), wv, bv, Padding::Same).unwrap();
            let y2 = g.mul(y, y).unwrap();
            let loss = g.sum(y2);
            g.backward(loss).unwrap();
            g.grad(wv).unwrap()[0]
        })
    });
}

fn bench_train_iteration(c: &mut Criterion) {
    let ds = generate_phantoms(8, 32, 7, PhantomMode::Multi).unwrap();
    let samples: Vec<_> = ds.train_ids.iter().take(4).map(|&i| &ds.samples[i]).collect();
    let (images, labels) = stack_batch(&samples).unwrap();
    let spec = ModelSpec::micro(Arch::UNet, 4);

    c.bench_function("unet_micro_train_iteration", |bench| {
        let mut net = Network::build(&spec, 3).unwrap();
        let mut opt = Optimizer::new(
            OptimizerKind::Nesterov,
            HyperParams::default(),
            None,
            net.param_count(),
        )
        .unwrap();
        bench.iter(|| {
            let shifted = opt.lookahead(net.params()).unwrap().unwrap();
            let orig = net.params().to_vec();
            net.params_mut().copy_from_slice(&shifted);
            let mut g = Graph::new();
            let pass = net.forward(&mut g, &images, BnMode::Train).unwrap();
            let loss = g.softmax_cross_entropy(pass.logits, &labels).unwrap();
            g.backward(loss).unwrap();
            let grad = net.flat_grad(&g, &pass).unwrap();
            net.params_mut().copy_from_slice(&orig);
            opt.step(net.params_mut(), &grad).unwrap();
            g.value(loss).data()[0]
        })
    });
}

fn bench_dice(c: &mut Criterion) {
    let ds = generate_phantoms(2, 64, 11, PhantomMode::Multi).unwrap();
    let sample = &ds.samples[0];
    let (_, mask) = stack_batch(&[sample]).unwrap();
    // Logits that argmax to a noisy copy of the mask.
    let (n, h, w) = (1, 64, 64);
    let mut logits = vec![0.0; n * 4 * h * w];
    for (i, &m) in mask.data().iter().enumerate() {
        let class = ((m as usize) + i % 7 / 6) % 4;
        logits[class * h * w + i] = 3.0;
    }
    let logits = Tensor::new([n, 4, h, w], logits).unwrap();

    c.bench_function("dice_foreground_64x64", |bench| {
        bench.iter(|| {
            let pred = argmax_mask(black_box(&logits)).unwrap();
            dice_foreground(&pred, &mask, 4).unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_schedule,
    bench_conv,
    bench_train_iteration,
    bench_dice
);
criterion_main!(benches);

//! Rough kernel throughput probe for the shapes the training step uses.

use std::time::Instant;
use udi_core::tensor::kernels;

fn bench(name: &str, m: usize, k: usize, n: usize, iters: usize) {
    let a: Vec<f32> = (0..m * k).map(|i| (i % 7) as f32 * 0.1).collect();
    let b: Vec<f32> = (0..k * n).map(|i| (i % 5) as f32 * 0.1).collect();
    let mut out = vec![0.0f32; m * n];
    let t0 = Instant::now();
    for _ in 0..iters {
        out.iter_mut().for_each(|v| *v = 0.0);
        kernels::matmul_acc(&a, &b, m, k, n, &mut out);
    }
    let dt = t0.elapsed().as_secs_f64();
    let ma = (m * k * n * iters) as f64 / dt / 1e9;
    println!("{name:28} {m:5}x{k:4}x{n:4}  {ma:6.2} G-MA/s  (sum {})", out[0]);
}

fn bench_tn(name: &str, m: usize, k: usize, n: usize, iters: usize) {
    let a: Vec<f32> = (0..m * k).map(|i| (i % 7) as f32 * 0.1).collect();
    let b: Vec<f32> = (0..m * n).map(|i| (i % 5) as f32 * 0.1).collect();
    let mut out = vec![0.0f32; k * n];
    let t0 = Instant::now();
    for _ in 0..iters {
        out.iter_mut().for_each(|v| *v = 0.0);
        kernels::matmul_tn_acc(&a, &b, m, k, n, &mut out);
    }
    let dt = t0.elapsed().as_secs_f64();
    let ma = (m * k * n * iters) as f64 / dt / 1e9;
    println!("{name:28} {m:5}x{k:4}x{n:4}  {ma:6.2} G-MA/s  (sum {})", out[0]);
}

fn bench_exp(count: usize, iters: usize) {
    let x: Vec<f32> = (0..count).map(|i| -((i % 90) as f32)).collect();
    let mut out = vec![0.0f32; count];
    let t0 = Instant::now();
    for _ in 0..iters {
        for (o, &v) in out.iter_mut().zip(&x) {
            *o = kernels::exp_f32(v);
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "fast exp                      {count} elems  {:.2} G-elem/s (sum {})",
        (count * iters) as f64 / dt / 1e9,
        out[0]
    );
}

fn main() {
    // token-level linear layers (batch of views)
    bench("qkv per-view-batch", 13200, 64, 64, 200);
    bench("mlp up", 13200, 64, 256, 100);
    bench("mlp down", 13200, 256, 64, 100);
    // projector over pooled rows
    bench("projector hidden", 12000, 256, 256, 40);
    bench("prototype logits", 12000, 64, 1024, 40);
    bench_tn("backward tn (weights)", 13200, 64, 256, 100);
    bench_exp(1 << 20, 40);
}

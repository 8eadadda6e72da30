use projectable::tensor::{matmul, Tensor};
use std::time::Instant;

fn main() {
    let mut rng = projectable::rng::derive(0, 1, 0);
    // shapes mirroring one training step at batch 4, seq 257, d 64
    let a = Tensor::randn(&[1028, 64], 1.0, &mut rng);
    let b = Tensor::randn(&[64, 256], 1.0, &mut rng);
    let t0 = Instant::now();
    let iters = 300;
    let mut sink = 0.0;
    for _ in 0..iters {
        let c = matmul(&a, &b, 1028, 64, 256);
        sink += c.data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 1028.0 * 64.0 * 256.0 * iters as f64;
    println!("matmul 1028x64x256: {:.2} GFLOP/s (sink {sink:.3})", flops / dt / 1e9);

    let a = Tensor::randn(&[257, 16], 1.0, &mut rng);
    let b = Tensor::randn(&[16, 257], 1.0, &mut rng);
    let t0 = Instant::now();
    for _ in 0..iters {
        let c = matmul(&a, &b, 257, 16, 257);
        sink += c.data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 257.0 * 16.0 * 257.0 * iters as f64;
    println!("matmul 257x16x257: {:.2} GFLOP/s (sink {sink:.3})", flops / dt / 1e9);
}

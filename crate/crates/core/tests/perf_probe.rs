use drvit_core::Tensor;
use std::time::Instant;

#[test]
#[ignore]
fn gemm_throughput() {
    // Typical training-shaped gemms
    for (m, k, n) in [(1088, 64, 64), (4096, 144, 16), (65536, 27, 16), (1024, 288, 32), (4096, 144, 32)] {
        let a = Tensor::full(&[m, k], 0.5);
        let b = Tensor::full(&[k, n], 0.25);
        let t0 = Instant::now();
        let mut iters = 0;
        while t0.elapsed().as_secs_f64() < 0.5 {
            let _ = a.matmul(&b).unwrap();
            iters += 1;
        }
        let secs = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * iters as f64) / secs / 1e9;
        println!("gemm {m}x{k}x{n}: {gflops:.2} Gflop/s ({iters} iters)");
    }
}

use std::time::Instant;
use idgl_core::linalg::Dense;

fn main() {
    let n = 1797usize;
    for &k in &[16usize, 64, 128, 512] {
        let a = Dense::from_vec(n, k, (0..n * k).map(|t| (t % 13) as f64 * 0.1 - 0.6).collect()).unwrap();
        let b = Dense::from_vec(k, n, (0..k * n).map(|t| (t % 17) as f64 * 0.1 - 0.8).collect()).unwrap();
        let reps = if k <= 64 { 5 } else { 2 };
        let t0 = Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            let c = a.matmul(&b);
            sink += c.get(0, 0);
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        let gflops = 2.0 * (n * n * k) as f64 / dt / 1e9;
        println!("k={k:4}  {dt:.3}s/gemm  {gflops:.1} Gflop/s  (sink {sink:.2})");
    }
}

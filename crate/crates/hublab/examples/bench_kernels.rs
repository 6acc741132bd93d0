// Raw kernel throughput probe.
use hublab::tensor::Graph;
use std::time::Instant;

fn main() {
    // nn: [256x128]@[128x512]
    let a: Vec<f32> = (0..256 * 128).map(|i| (i as f32).sin()).collect();
    let b: Vec<f32> = (0..128 * 512).map(|i| (i as f32).cos()).collect();
    let mut g = Graph::new();
    let ta = g.constant(a, &[256, 128]).unwrap();
    let tb = g.constant(b, &[128, 512]).unwrap();
    let t0 = Instant::now();
    let reps = 100;
    for _ in 0..reps {
        let _ = g.matmul(ta, tb).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let flop = 2.0 * 256.0 * 128.0 * 512.0;
    println!("matmul_nn 256x128x512: {:.2} ms  {:.1} GFLOP/s", dt * 1e3, flop / dt / 1e9);

    // nt: [256x128]@[236x128]^T
    let a2: Vec<f32> = (0..256 * 128).map(|i| (i as f32).sin()).collect();
    let b2: Vec<f32> = (0..236 * 128).map(|i| (i as f32).cos()).collect();
    let ta2 = g.constant(a2, &[256, 128]).unwrap();
    let tb2 = g.constant(b2, &[236, 128]).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = g.matmul_nt(ta2, tb2).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let flop = 2.0 * 256.0 * 128.0 * 236.0;
    println!("matmul_nt 256x128x236: {:.2} ms  {:.1} GFLOP/s", dt * 1e3, flop / dt / 1e9);
}

use std::time::Instant;
fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = vec![1.0f64; m * k];
    let b = vec![0.5f64; k * n];
    let mut c = vec![0.0f64; m * n];
    let t = Instant::now();
    for _ in 0..reps {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1,
                0.0, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let gf = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / secs / 1e9;
    println!("m={m} k={k} n={n}: {gf:.2} GFLOP/s ({:.3} ms/call)", secs * 1000.0 / reps as f64);
}
fn main() {
    bench(16, 72, 1024, 500);
    bench(8, 576, 1024, 500);
    bench(64, 288, 1024, 200);
    bench(128, 576, 336, 200);
    bench(256, 256, 4096, 50);
}

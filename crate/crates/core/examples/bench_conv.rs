use csilab::tensorkit::{Tape, Tensor};
use std::time::Instant;

fn main() {
    // Simulate one CB block fwd+bwd at paper geometry (32x16) and at a
    // reduced geometry (8x8), batch 8.
    for (h, w, label) in [(32usize, 16usize, "32x16"), (8, 8, "8x8")] {
        let batch = 8;
        let (ci, co) = (128, 128);
        let x = Tensor::from_vec(&[batch, ci, h, w], (0..batch*ci*h*w).map(|i| (i % 97) as f64 * 0.01).collect()).unwrap().with_grad();
        let k = Tensor::from_vec(&[co, ci, 3, 3], (0..co*ci*9).map(|i| ((i % 31) as f64 - 15.0) * 0.001).collect()).unwrap().with_grad();
        let b = Tensor::zeros(&[co]).with_grad();
        let t0 = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let mut tape = Tape::new();
            let xi = tape.leaf(&x);
            let ki = tape.leaf(&k);
            let bi = tape.leaf(&b);
            let y = tape.conv2d(xi, ki, bi).unwrap();
            let s = tape.sum_all(y);
            tape.backward(s).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        let flop = 2.0 * (batch * co * ci * 9 * h * w) as f64 * 3.0; // fwd + dX + dK
        println!("{label}: {:.1} ms per conv fwd+bwd (batch {batch}) -> {:.2} GFLOP/s", dt * 1e3, flop / dt / 1e9);
    }
}

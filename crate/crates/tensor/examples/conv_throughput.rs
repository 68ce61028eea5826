//! Rough single-thread throughput of the correlation kernels.
use std::time::Instant;

use basisconv_tensor::{Padding, Tape, Tensor};

fn main() {
    for &(b, ci, co, hw, k) in
        &[(100usize, 32usize, 32usize, 28usize, 3usize), (100, 64, 64, 14, 3), (2, 264, 264, 32, 3)]
    {
        let x = Tensor::<f32>::from_fn([b, ci, hw, hw], |i| ((i * 7919) % 13) as f32 * 0.1 - 0.6);
        let w = Tensor::<f32>::from_fn([co, ci, k, k], |i| ((i * 104729) % 11) as f32 * 0.05 - 0.25);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let t0 = Instant::now();
        let y = tape.correlate2d(xv, wv, Padding::Same, 1).unwrap();
        let fwd = t0.elapsed().as_secs_f64();
        let loss = tape.sum(y).unwrap();
        let t1 = Instant::now();
        tape.backward(loss).unwrap();
        let bwd = t1.elapsed().as_secs_f64();
        let macs = (b * co * ci * k * k * hw * hw) as f64;
        println!("B={b} {ci}->{co} {hw}x{hw} k={k}: fwd {:.3}s ({:.1} GMAC/s), bwd {:.3}s", fwd, macs / fwd / 1e9, bwd);
    }
}

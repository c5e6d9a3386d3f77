use std::time::Instant;
use gradshield::{Tape, Tensor, Rng};

fn main() {
    let mut rng = Rng::new(1);
    // the hot TRN shape: batch 100, 112ch -> 16ch, 3x3, 16x16
    let x = Tensor::<f32>::rand_uniform(&mut rng, vec![100, 112, 16, 16], -1.0, 1.0);
    let k = Tensor::<f32>::rand_uniform(&mut rng, vec![16, 112, 3, 3], -0.1, 0.1);
    let b = Tensor::<f32>::zeros(vec![16]);
    let macs = 100.0 * 16.0 * 112.0 * 9.0 * 256.0;
    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_secs_f64() < 2.0 {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, true);
        let kv = tape.leaf(&k, true);
        let bv = tape.leaf(&b, true);
        let c = tape.conv2d(xv, kv, bv, 1, 1).unwrap();
        std::hint::black_box(tape.values(c)[0]);
        n += 1;
    }
    let fwd_rate = macs * n as f64 / t0.elapsed().as_secs_f64() / 1e9;
    println!("conv fwd: {:.2} GMAC/s ({} iters)", fwd_rate, n);

    // backward both input and kernel
    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_secs_f64() < 2.0 {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, true);
        let kv = tape.leaf(&k, true);
        let bv = tape.leaf(&b, true);
        let c = tape.conv2d(xv, kv, bv, 1, 1).unwrap();
        let z = tape.constant(&Tensor::zeros(vec![100, 16, 16, 16]));
        let loss = tape.l2_loss(c, z).unwrap();
        let g = tape.backward(loss).unwrap();
        std::hint::black_box(g.wrt(&k).unwrap()[0]);
        n += 1;
    }
    let bwd_rate = 3.0 * macs * n as f64 / t0.elapsed().as_secs_f64() / 1e9;
    println!("conv fwd+bwd: {:.2} GMAC/s-equivalent ({} iters)", bwd_rate, n);
}

use autograd::Tape;
use ndarray::ArrayD;
use std::time::Instant;

fn main() {
    // Shapes typical of the 64x64 toy network's mid level.
    let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 16, 32, 32]), |ix| {
        (ix[3] as f64 * 0.1).sin() * 0.3
    });
    let w = ArrayD::from_shape_fn(ndarray::IxDyn(&[16, 16, 3, 3]), |ix| {
        (ix[0] as f64 - 0.5) * 0.01
    });
    let iters = 60;
    let t0 = Instant::now();
    for _ in 0..iters {
        let t = Tape::new();
        let xv = t.input(x.clone());
        let wv = t.input(w.clone());
        let y = t.conv2d(xv, wv, None, 1, 1);
        let y2 = t.conv2d(y, wv, None, 1, 1);
        let loss = t.mean_all(y2);
        t.backward(loss);
        std::hint::black_box(t.grad(wv));
    }
    let dt = t0.elapsed().as_secs_f64();
    // fwd 2 convs + bwd ~2x each => ~6 conv-equivalents of 18.9 MFLOP
    let flop = iters as f64 * 6.0 * 2.0 * 4.0 * 16.0 * 32.0 * 32.0 * 16.0 * 9.0;
    println!("conv path: {:.2} s total, {:.2} GFLOP/s", dt, flop / dt / 1e9);

    // Raw dgemm reference.
    let a = ndarray::Array2::<f64>::from_elem((256, 1024), 0.5);
    let b = ndarray::Array2::<f64>::from_elem((1024, 1024), 0.25);
    let t0 = Instant::now();
    let reps = 30;
    for _ in 0..reps {
        std::hint::black_box(a.dot(&b));
    }
    let dt = t0.elapsed().as_secs_f64();
    let flop = reps as f64 * 2.0 * 256.0 * 1024.0 * 1024.0;
    println!("dgemm 256x1024x1024: {:.2} GFLOP/s", flop / dt / 1e9);
}

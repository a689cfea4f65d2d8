//! Rough conv3 throughput probe used to size desk-scale defaults.

use std::time::Instant;

use cloe::{Graph, ParamSet, Tensor};

fn bench(c_in: usize, c_out: usize, d: usize, stride: usize, reps: usize, with_back: bool) {
    let mut params = ParamSet::<f32>::new();
    let n: usize = c_in * d * d * d;
    let x = Tensor::<f32>::new(
        &[c_in, d, d, d],
        (0..n).map(|i| (i as f32 * 0.001).sin()).collect(),
    )
    .unwrap();
    let kn = c_out * c_in * 27;
    let kid = params
        .add(
            "k",
            Tensor::<f32>::new(
                &[c_out, c_in, 3, 3, 3],
                (0..kn).map(|i| (i as f32 * 0.01).cos() * 0.1).collect(),
            )
            .unwrap(),
        )
        .unwrap();

    let od = (d + 2 - 3) / stride + 1;
    let macs = c_out * c_in * 27 * od * od * od;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone());
        let kv = g.leaf(&params, kid);
        let y = g.conv3(xv, kv, stride, 1).unwrap();
        if with_back {
            let loss = g.sum_all(y);
            g.backward(loss, &mut params).unwrap();
        }
        std::hint::black_box(g.data(y)[0]);
    }
    let dt = t0.elapsed().as_secs_f64();
    let total_macs = macs as f64 * reps as f64 * if with_back { 3.0 } else { 1.0 };
    println!(
        "conv {c_in}->{c_out} {d}^3 s{stride} back={with_back}: {:.3}s, {:.2} GFLOP/s",
        dt,
        2.0 * total_macs / dt / 1e9
    );
}

fn main() {
    bench(8, 8, 32, 1, 20, false);
    bench(8, 8, 32, 1, 20, true);
    bench(8, 16, 32, 2, 20, true);
    bench(16, 8, 32, 1, 10, true);
    bench(24, 8, 32, 1, 10, true);
    bench(32, 16, 16, 1, 20, true);
}

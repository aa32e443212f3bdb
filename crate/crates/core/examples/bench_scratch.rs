use preskip::kernels;
use preskip::model::{init_param_store, partition_params, ModelConfig, Protocol, Variant};
use preskip::rng::StreamRng;
use preskip::train::step_gradients;
use std::time::Instant;

fn main() {
    let mut rng = StreamRng::for_label(1, "bench");
    let a: Vec<f32> = (0..127 * 64).map(|_| rng.next_normal() as f32).collect();
    let b: Vec<f32> = (0..64 * 256).map(|_| rng.next_normal() as f32).collect();
    let mut out = vec![0.0f32; 127 * 256];
    let reps = 2000;
    let t0 = Instant::now();
    for _ in 0..reps {
        kernels::matmul(&a, &b, 127, 64, 256, &mut out);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul: {:.2} GFLOP/s", reps as f64 * 2.0 * 127.0 * 64.0 * 256.0 / dt / 1e9);

    let mut cfg = ModelConfig::desk();
    Variant::PreprojSkip.apply(&mut cfg.block, 0).unwrap();
    let mut store = init_param_store::<f32>(&cfg, 1).unwrap();
    partition_params(&mut store, Protocol::Probe).unwrap();
    let corpus: Vec<u8> = (0..cfg.max_seq_len * 64).map(|i| (i * 31 % 256) as u8).collect();
    let windows: Vec<usize> = (0..16).collect();
    let t0 = Instant::now();
    let n = 10;
    for _ in 0..n {
        let _ = step_gradients(&store, &cfg, &corpus, &windows, 16, cfg.max_seq_len).unwrap();
    }
    println!("step_gradients: {:.3} s/step", t0.elapsed().as_secs_f64() / n as f64);
}

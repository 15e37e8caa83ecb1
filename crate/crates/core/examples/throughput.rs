//! Times forward and forward+backward passes of the default network.
//!
//! Run with `cargo run --release --example throughput -- [batch]`.

use std::time::{Duration, Instant};

use osvit::tensor::{Tape, Tensor};
use osvit::vit_model::{bind_params, forward, init_params, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let batch: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(4);
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 0)?;
    let input = Tensor::<f32>::from_fn(&[batch, 50, 64, 64], |i| {
        ((i[1] * 7 + i[2] * 3 + i[3]) % 17) as f32 / 17.0
    });
    let ages = vec![60.0; batch];
    let targets: Vec<i64> = (0..batch as i64).map(|i| i % 3).collect();

    // Best of three, to step around scheduler noise.
    let (mut fwd, mut step) = (Duration::MAX, Duration::MAX);
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params, false);
        forward(&mut tape, &cfg, &bound, &input, &ages, None)?;
        fwd = fwd.min(t0.elapsed());

        let t0 = Instant::now();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params, true);
        let trace = forward(&mut tape, &cfg, &bound, &input, &ages, None)?;
        let loss = tape.cross_entropy(trace.logits, &targets, -100)?;
        tape.backward(loss)?;
        step = step.min(t0.elapsed());
    }

    println!("batch {batch}: {} parameters", cfg.num_parameters());
    println!(
        "forward          {:>8.1} ms/sample",
        fwd.as_secs_f64() * 1e3 / batch as f64
    );
    println!(
        "forward+backward {:>8.1} ms/sample",
        step.as_secs_f64() * 1e3 / batch as f64
    );
    Ok(())
}

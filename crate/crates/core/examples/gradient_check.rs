//! Checks reverse-mode gradients against central finite differences, first
//! for a small composite expression and then for a whole reduced network.
//!
//! Run with `cargo run --release --example gradient_check`.

use osvit::tensor::{grad_check, GradCheckOptions, Tensor, TensorError};
use osvit::vit_model::{forward, init_params, BoundParams, ModelConfig, ModelError};
use osvit::volume::Dims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let opts = GradCheckOptions::default();

    // gelu(layer_norm(x) · w) summed, with every input checked.
    let x = Tensor::<f64>::from_fn(&[3, 5], |i| ((i[0] * 5 + i[1]) as f64 * 0.37).sin());
    let gamma = Tensor::<f64>::from_fn(&[5], |i| 1.0 + 0.1 * i[0] as f64);
    let beta = Tensor::<f64>::from_fn(&[5], |i| 0.05 * i[0] as f64);
    let w = Tensor::<f64>::from_fn(&[5, 2], |i| (i[0] as f64 - 2.0) * 0.3 + i[1] as f64 * 0.1);
    let report = grad_check(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let y = t.matmul(y, v[3])?;
            let y = t.gelu(y)?;
            t.sum(y)
        },
        &[x, gamma, beta, w],
        &opts,
    )?;
    println!(
        "expression: {} coordinates, max relative error {:.2e}, passed {}",
        report.checks.len(),
        report.max_rel_error(),
        report.passed()
    );

    let cfg = ModelConfig {
        input_dims: Dims::new(4, 8, 8),
        patch_dims: Dims::new(2, 4, 4),
        embed_dim: 8,
        num_heads: 2,
        head_dim: 4,
        mlp_dim: 16,
        ..ModelConfig::default()
    };
    let params = init_params(&cfg, 1)?.cast::<f64>();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let volume = Tensor::<f64>::from_fn(&[2, 4, 8, 8], |i| {
        ((i[0] + i[1] * 3 + i[2] * 5 + i[3] * 7) % 11) as f64 / 11.0
    });
    let report = grad_check(
        |tape, vars| {
            let bound = BoundParams::from_vars(names.iter().cloned(), vars);
            let trace =
                forward(tape, &cfg, &bound, &volume, &[48.0, 67.0], None).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => TensorError::Usage(other.to_string()),
                })?;
            tape.cross_entropy(trace.logits, &[0, 2], -100)
        },
        &inputs,
        &GradCheckOptions {
            coords_per_input: 4,
            ..opts
        },
    )?;
    println!(
        "network ({} tensors, {} parameters): {} coordinates, max relative error {:.2e}, passed {}",
        params.len(),
        params.num_parameters(),
        report.checks.len(),
        report.max_rel_error(),
        report.passed()
    );
    Ok(())
}

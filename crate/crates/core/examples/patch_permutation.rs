//! Shuffles the order of the 640 patches of one volume. Without positional
//! embeddings the logits do not move; with them, they do.
//!
//! Run with `cargo run --release --example patch_permutation`.

use osvit::dataset::shuffle;
use osvit::tensor::{Tape, Tensor};
use osvit::vit_model::{
    bind_params, forward_patches, init_params, patchify, ModelConfig, ModelParams,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits(
    cfg: &ModelConfig,
    params: &ModelParams,
    patches: &Tensor<f32>,
    order: &[usize],
) -> Vec<f32> {
    let v = cfg.patch_volume();
    let data: Vec<f32> = order
        .iter()
        .flat_map(|&p| patches.data()[p * v..(p + 1) * v].iter().copied())
        .collect();
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false);
    let x = tape.constant(Tensor::new(&[1, order.len(), v], data).expect("patch count"));
    let trace = forward_patches(&mut tape, cfg, &bound, x, &[62.0], None).expect("valid input");
    tape.value(trace.logits).data().to_vec()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig::default();
    let mut params = init_params(&cfg, 0)?;
    let input = Tensor::<f32>::from_fn(&[1, 50, 64, 64], |i| {
        ((i[1] * 13 + i[2] * 7 + i[3] * 3) % 29) as f32 / 29.0
    });
    let patches = patchify(&input, &cfg)?;
    let identity: Vec<usize> = (0..cfg.num_patches()).collect();
    let mut shuffled = identity.clone();
    shuffle(&mut shuffled, &mut ChaCha8Rng::seed_from_u64(1));

    let report = |label: &str, params: &ModelParams| {
        let a = logits(&cfg, params, &patches, &identity);
        let b = logits(&cfg, params, &patches, &shuffled);
        let diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        println!("{label}: {a:?} vs {b:?}, max difference {diff:.2e}");
    };
    report("learned positions", &params);
    params
        .get_mut("pos_embed")
        .expect("pos_embed")
        .data_mut()
        .fill(0.0);
    report("zero positions   ", &params);
    Ok(())
}

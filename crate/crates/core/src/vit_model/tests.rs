use super::*;
use crate::tensor::{grad_check, GradCheckOptions, Tape};
use crate::volume::Volume;
use proptest::prelude::*;
use rand::Rng;

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_dims: Dims::new(4, 8, 8),
        patch_dims: Dims::new(2, 4, 4),
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        head_dim: 4,
        mlp_dim: 16,
        ..ModelConfig::default()
    }
}

fn random_input(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = cfg.input_dims.as_array();
    Tensor::from_fn(&[b, a[0], a[1], a[2]], |_| rng.random::<f32>())
}

fn randomize(params: &mut ModelParams<f32>, seed: u64, std: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += std * (rng.random::<f32>() - 0.5);
        }
    }
}

fn run(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    input: &Tensor<f32>,
    ages: &[f32],
) -> (Tape<f32>, Trace) {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false);
    let trace = forward(&mut tape, cfg, &bound, input, ages, None).unwrap();
    (tape, trace)
}

#[test]
fn default_parameter_count_matches_closed_form() {
    let (e, m, c, p, v, l) = (192usize, 1536, 3, 640, 320, 2);
    let per_layer = 4 * (e * e + e) + 4 * e + (e * m + m) + (m * e + e);
    let expected =
        (e * v + e) + e + (p + 1) * e + l * per_layer + 2 * e + 2 * (e + 1) + (e + 1) * c + c;
    assert_eq!(expected, 1_667_336);
    let cfg = ModelConfig::default();
    assert_eq!(cfg.num_parameters(), expected);
    assert_eq!(init_params(&cfg, 0).unwrap().num_parameters(), expected);
    assert_eq!(cfg.num_patches(), 640);
    assert_eq!(cfg.patch_volume(), 320);
}

#[test]
fn init_is_seeded_and_truncated() {
    let cfg = tiny_config();
    let a = init_params(&cfg, 11).unwrap();
    assert!(a.bit_eq(&init_params(&cfg, 11).unwrap()));
    assert!(!a.bit_eq(&init_params(&cfg, 12).unwrap()));
    for (name, t) in a.iter() {
        if name.ends_with("gamma") {
            assert!(t.data().iter().all(|&x| x == 1.0));
        }
        if name.ends_with("beta") || name.ends_with("bias") {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
        if !name.ends_with("gamma") {
            assert!(t.data().iter().all(|x| x.abs() <= 0.04), "{name}");
        }
    }
    let w = a.get("patch_embed.weight").unwrap();
    assert!(w.data().iter().any(|&x| x != 0.0));
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::default();
    cfg.input_dims = Dims::new(50, 63, 64);
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("height"), "{msg}");
    let mut cfg = ModelConfig::default();
    cfg.num_heads = 10;
    assert!(cfg.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn patchify_places_every_voxel_by_block_arithmetic() {
    let cfg = ModelConfig::default();
    let n = cfg.input_dims.voxels();
    let input = Tensor::new(&[1, 50, 64, 64], (0..n).map(|i| i as f64).collect()).unwrap();
    let patches = patchify(&input, &cfg).unwrap();
    assert_eq!(patches.shape(), &[1, 640, 320]);
    for d in 0..50 {
        for h in 0..64 {
            for w in 0..64 {
                let patch = (d / 5) * 64 + (h / 8) * 8 + w / 8;
                let offset = ((d % 5) * 8 + h % 8) * 8 + w % 8;
                let want = ((d * 64 + h) * 64 + w) as f64;
                assert_eq!(patches.get(&[0, patch, offset]), want);
            }
        }
    }
    let (d, h, w) = (7, 10, 3);
    assert_eq!(patches.get(&[0, 72, 147]), ((d * 64 + h) * 64 + w) as f64);
}

#[test]
fn constant_volume_gives_identical_patches() {
    let cfg = ModelConfig::default();
    let input = Tensor::<f32>::full(&[1, 50, 64, 64], 0.3);
    let p = patchify(&input, &cfg).unwrap();
    let first = &p.data()[..320];
    assert!(p.data().chunks(320).all(|row| row == first));
}

#[test]
fn wrong_input_dims_are_rejected() {
    let cfg = ModelConfig::default();
    assert!(patchify(&Tensor::<f32>::zeros(&[1, 50, 64, 60]), &cfg).is_err());
    let raw = Volume::from_u8(Dims::new(155, 240, 240), vec![0; 155 * 240 * 240]).unwrap();
    let err = volumes_to_input::<f32>(&[&raw], &cfg)
        .unwrap_err()
        .to_string();
    assert!(err.contains("50x64x64"), "{err}");
}

#[test]
fn zero_embedding_gives_zero_sequence() {
    let cfg = tiny_config();
    let params = ModelParams::zeros(&cfg);
    let (tape, trace) = run(&cfg, &params, &random_input(&cfg, 2, 1), &[50.0, 60.0]);
    assert_eq!(tape.shape(trace.embedded), &[2, 9, 8]);
    assert!(tape.value(trace.embedded).data().iter().all(|&x| x == 0.0));
}

#[test]
fn identical_patches_without_positions_embed_identically() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, 3).unwrap();
    params.get_mut("pos_embed").unwrap().data_mut().fill(0.0);
    let input = Tensor::<f32>::full(&[1, 4, 8, 8], 0.7);
    let (tape, trace) = run(&cfg, &params, &input, &[50.0]);
    let emb = tape.value(trace.embedded).data();
    let row1 = &emb[8..16];
    assert!(emb[8..].chunks(8).all(|r| r == row1));
}

#[test]
fn zero_residual_branches_leave_the_sequence_unchanged() {
    let cfg = tiny_config();
    let mut params = ModelParams::zeros(&cfg);
    for (name, t) in params.iter_mut() {
        if name.ends_with("gamma") {
            t.data_mut().fill(1.0);
        }
    }
    params
        .get_mut("pos_embed")
        .unwrap()
        .data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, x)| *x = i as f32 * 0.01);
    let (tape, trace) = run(&cfg, &params, &random_input(&cfg, 1, 2), &[40.0]);
    let before = tape.value(trace.embedded);
    for &layer in &trace.layers {
        assert_eq!(tape.value(layer), before);
    }
}

#[test]
fn single_token_attention_returns_value_rows() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::new(&[1, 2, 1, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap());
    let k = tape.constant(Tensor::new(&[1, 2, 1, 3], vec![0.3, -2.0, 1.0, 4.0, 4.0, 4.0]).unwrap());
    let v = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![7.0, -3.0, 0.25, 8.0]).unwrap());
    let out = tape.attention(q, k, v, 0.25).unwrap();
    assert_eq!(tape.value(out).data(), &[7.0, -3.0, 0.25, 8.0]);
}

#[test]
fn shape_chain_for_default_config() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 0).unwrap();
    let (tape, trace) = run(&cfg, &params, &random_input(&cfg, 1, 0), &[63.0]);
    assert_eq!(tape.shape(trace.patches), &[1, 640, 320]);
    assert_eq!(tape.shape(trace.embedded), &[1, 641, 192]);
    for &l in &trace.layers {
        assert_eq!(tape.shape(l), &[1, 641, 192]);
    }
    assert_eq!(tape.shape(trace.cls), &[1, 192]);
    assert_eq!(tape.shape(trace.fused), &[1, 193]);
    assert_eq!(tape.shape(trace.logits), &[1, 3]);
    assert!((tape.value(trace.fused).data()[192] - 6.3).abs() < 1e-6);
}

#[test]
fn zero_head_weights_return_the_bias() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, 4).unwrap();
    params
        .get_mut("head.fc.weight")
        .unwrap()
        .data_mut()
        .fill(0.0);
    params
        .get_mut("head.fc.bias")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.5, -1.0, 2.0]);
    for seed in 0..3 {
        let (tape, trace) = run(&cfg, &params, &random_input(&cfg, 2, seed), &[30.0, 80.0]);
        assert_eq!(
            tape.value(trace.logits).data(),
            &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]
        );
    }
}

/// Recomputes the head from the class-token state by hand for two ages.
#[test]
fn age_enters_through_the_head() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, 5).unwrap();
    randomize(&mut params, 6, 0.5);
    let input = random_input(&cfg, 1, 7);
    let head = |cls: &[f32], age: f32| -> Vec<f64> {
        let mut x: Vec<f64> = cls.iter().map(|&v| v as f64).collect();
        x.push(age as f64 / 10.0);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let g = params.get("head.norm.gamma").unwrap().data();
        let b = params.get("head.norm.beta").unwrap().data();
        let y: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] as f64 + b[i] as f64)
            .collect();
        let w = params.get("head.fc.weight").unwrap();
        let bias = params.get("head.fc.bias").unwrap().data();
        (0..3)
            .map(|c| {
                bias[c] as f64
                    + (0..y.len())
                        .map(|i| y[i] * w.get(&[i, c]) as f64)
                        .sum::<f64>()
            })
            .collect()
    };
    let mut results = Vec::new();
    for age in [60.0f32, 70.0] {
        let (tape, trace) = run(&cfg, &params, &input, &[age]);
        let logits = tape.value(trace.logits).data().to_vec();
        let want = head(tape.value(trace.cls).data(), age);
        for (g, w) in logits.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
        }
        results.push(logits);
    }
    assert!(results[0]
        .iter()
        .zip(&results[1])
        .any(|(a, b)| (a - b).abs() > 1e-4));
}

#[test]
fn non_positive_age_is_rejected() {
    let cfg = tiny_config();
    let params = init_params(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, false);
    assert!(forward(
        &mut tape,
        &cfg,
        &bound,
        &random_input(&cfg, 1, 0),
        &[0.0],
        None
    )
    .is_err());
}

fn logits_with_permutation(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    patches: &Tensor<f32>,
    perm: &[usize],
) -> Vec<f32> {
    let (n, v) = (cfg.num_patches(), cfg.patch_volume());
    let src = patches.data();
    let mut data = Vec::with_capacity(n * v);
    for &p in perm {
        data.extend_from_slice(&src[p * v..(p + 1) * v]);
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false);
    let x = tape.constant(Tensor::new(&[1, n, v], data).unwrap());
    let trace = forward_patches(&mut tape, cfg, &bound, x, &[55.0], None).unwrap();
    tape.value(trace.logits).data().to_vec()
}

#[test]
fn patch_order_matters_only_through_positions() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, 8).unwrap();
    randomize(&mut params, 9, 0.6);
    let patches = patchify(&random_input(&cfg, 1, 10), &cfg).unwrap();
    let identity: Vec<usize> = (0..cfg.num_patches()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut perm = identity.clone();
    crate::dataset::shuffle(&mut perm, &mut rng);
    let with_pos = (
        logits_with_permutation(&cfg, &params, &patches, &identity),
        logits_with_permutation(&cfg, &params, &patches, &perm),
    );
    assert!(with_pos
        .0
        .iter()
        .zip(&with_pos.1)
        .any(|(a, b)| (a - b).abs() > 1e-4));
    params.get_mut("pos_embed").unwrap().data_mut().fill(0.0);
    let base = logits_with_permutation(&cfg, &params, &patches, &identity);
    let permuted = logits_with_permutation(&cfg, &params, &patches, &perm);
    for (a, b) in base.iter().zip(&permuted) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn every_parameter_group_receives_gradient() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, 12).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
    }
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params, true);
    let input = random_input(&cfg, 2, 14).cast::<f64>();
    let trace = forward(&mut tape, &cfg, &bound, &input, &[45.0, 71.0], None).unwrap();
    // Distinct class weights so the FC bias sees a non-cancelling gradient.
    let w = tape.constant(Tensor::new(&[3, 1], vec![1.0, -2.0, 0.5]).unwrap());
    let weighted = tape.matmul(trace.logits, w).unwrap();
    let total = tape.sum(weighted).unwrap();
    tape.backward(total).unwrap();
    for (name, var) in bound.iter() {
        let g = tape.grad(var).unwrap();
        if name.ends_with("attn.k.bias") {
            // Adds the same q·b to every score of a query row; softmax cancels it.
            assert!(g.data().iter().all(|x| x.abs() < 1e-10), "{name}");
            continue;
        }
        assert!(
            g.data().iter().any(|x| x.abs() > 1e-12),
            "{name} has zero gradient"
        );
    }
}

#[test]
fn full_model_loss_matches_finite_differences() {
    let cfg = ModelConfig {
        num_layers: 1,
        ..tiny_config()
    };
    let mut params = init_params(&cfg, 15).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.4 * (rng.random::<f64>() - 0.5);
        }
    }
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let x = random_input(&cfg, 2, 17).cast::<f64>();
    let report = grad_check(
        |tape, vars| {
            let bound = BoundParams::from_vars(names.iter().cloned(), vars);
            let trace =
                forward(tape, &cfg, &bound, &x, &[52.0, 66.0], None).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => crate::tensor::TensorError::Usage(other.to_string()),
                })?;
            tape.cross_entropy(trace.logits, &[2, 0], -100)
        },
        &inputs,
        &GradCheckOptions {
            coords_per_input: 6,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "max rel error {}", report.max_rel_error());
}

#[test]
fn inference_is_deterministic_and_chunking_agrees() {
    let cfg = tiny_config();
    let params = init_params(&cfg, 18).unwrap();
    let vols: Vec<Volume> = (0..5)
        .map(|s| {
            Volume::from_u8(
                cfg.input_dims,
                (0..256).map(|i| ((i * 7 + s * 13) % 256) as u8).collect(),
            )
            .unwrap()
        })
        .collect();
    let refs: Vec<&Volume> = vols.iter().collect();
    let ages = [40.0, 50.0, 60.0, 70.0, 80.0];
    let a = infer_logits(&params, &cfg, &refs, &ages).unwrap();
    let b = infer_logits(&params, &cfg, &refs, &ages).unwrap();
    assert_eq!(a, b);
    let single = infer_logits(&params, &cfg, &refs[4..], &ages[4..]).unwrap();
    for (x, y) in a.data()[12..].iter().zip(single.data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let cfg = tiny_config();
    let params = init_params(&cfg, 19).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.osvt");
    save_checkpoint(&params, &cfg, &path).unwrap();
    let (back, back_cfg) = load_checkpoint(&path).unwrap();
    assert!(back.bit_eq(&params));
    assert_eq!(back_cfg, cfg);
    assert_eq!(
        encode_checkpoint(&back, &back_cfg),
        std::fs::read(&path).unwrap()
    );
}

fn raw_container(manifest: &str, floats: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OSVT_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for i in 0..floats {
        out.extend_from_slice(&(i as f32).to_le_bytes());
    }
    out
}

#[test]
fn short_blob_is_a_length_error() {
    let manifest = r#"{"config":{},"tensors":[{"name":"w","shape":[3,3],"offset":0}]}"#;
    match read_osvt_tensors(&raw_container(manifest, 8)) {
        Err(CheckpointError::Length {
            tensor,
            expected,
            actual,
        }) => {
            assert_eq!((tensor.as_str(), expected, actual), ("w", 36, 32));
        }
        other => panic!("{other:?}"),
    }
    let (_, tensors) = read_osvt_tensors(&raw_container(manifest, 9)).unwrap();
    assert_eq!(tensors[0].1.shape(), &[3, 3]);
    assert!(matches!(
        read_osvt_tensors(&raw_container(manifest, 10)),
        Err(CheckpointError::Length { .. })
    ));
}

#[test]
fn bad_headers_are_format_errors() {
    let cfg = tiny_config();
    let good = encode_checkpoint(&init_params(&cfg, 0).unwrap(), &cfg);
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_checkpoint(&bad),
        Err(CheckpointError::Format { offset: 0, .. })
    ));
    let mut bad = good.clone();
    bad[4] = 2;
    assert!(matches!(
        decode_checkpoint(&bad),
        Err(CheckpointError::Format { offset: 4, .. })
    ));
    let mut bad = good.clone();
    bad[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(matches!(
        decode_checkpoint(&bad),
        Err(CheckpointError::Format { offset: 8, .. })
    ));
}

#[test]
fn config_conflict_lists_fields() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.osvt");
    save_checkpoint(&init_params(&cfg, 0).unwrap(), &cfg, &path).unwrap();
    assert!(load_checkpoint_for(&path, &cfg).is_ok());
    match load_checkpoint_for(&path, &ModelConfig::default()) {
        Err(CheckpointError::ConfigConflict { fields }) => {
            let joined = fields.join(" ");
            for f in ["input_dims", "embed_dim", "mlp_dim", "num_heads"] {
                assert!(joined.contains(f), "{joined}");
            }
            assert!(!joined.contains("num_classes"));
        }
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn checkpoint_roundtrip_random(seed in any::<u64>(), layers in 0usize..3, final_norm in any::<bool>()) {
        let cfg = ModelConfig { num_layers: layers, final_norm, ..tiny_config() };
        let mut params = init_params(&cfg, seed).unwrap();
        randomize(&mut params, seed ^ 1, 4.0);
        let (back, back_cfg) = decode_checkpoint(&encode_checkpoint(&params, &cfg)).unwrap();
        prop_assert!(back.bit_eq(&params));
        prop_assert_eq!(back_cfg, cfg);
    }
}

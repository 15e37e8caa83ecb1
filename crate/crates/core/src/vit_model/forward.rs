use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::volume::Volume;

/// Splits `[b, D, H, W]` into `[b, patches, patch_volume]`.
///
/// Patches run over (depth block, height block, width block) with the width
/// block fastest; inside a patch the offset is `(dd·ph + hh)·pw + ww`.
pub fn patchify<T: Element>(input: &Tensor<T>, config: &ModelConfig) -> Result<Tensor<T>> {
    config.validate()?;
    let want = config.input_dims.as_array();
    if input.rank() != 4 || input.shape()[1..] != want {
        return Err(ModelError::Input(format!(
            "patchify expects [b, {}, {}, {}], got {:?}",
            want[0],
            want[1],
            want[2],
            input.shape()
        )));
    }
    let b = input.shape()[0];
    let [pd, ph, pw] = config.patch_dims.as_array();
    let [gd, gh, gw] = config.grid();
    let [_, h, w] = want;
    let (n, pv) = (config.num_patches(), config.patch_volume());
    let src = input.data();
    let mut out = Vec::with_capacity(b * n * pv);
    for s in 0..b {
        let vol = &src[s * config.input_dims.voxels()..(s + 1) * config.input_dims.voxels()];
        for bd in 0..gd {
            for bh in 0..gh {
                for bw in 0..gw {
                    for dd in 0..pd {
                        for hh in 0..ph {
                            let row = ((bd * pd + dd) * h + bh * ph + hh) * w + bw * pw;
                            out.extend_from_slice(&vol[row..row + pw]);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[b, n, pv], out)?)
}

/// Stacks u8 volumes into a `[b, D, H, W]` tensor scaled to `[-1, 1]`.
pub fn volumes_to_input<T: Element>(
    volumes: &[&Volume],
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let dims = config.input_dims;
    let mut data = Vec::with_capacity(volumes.len() * dims.voxels());
    for v in volumes {
        if v.dims() != dims {
            return Err(ModelError::Input(format!(
                "volume is {}, the model expects {dims}; run the preprocess step first",
                v.dims()
            )));
        }
        let bytes = v.as_u8().ok_or_else(|| {
            ModelError::Input(
                "model input must be an 8-bit volume; run the preprocess step first".into(),
            )
        })?;
        data.extend(bytes.iter().map(|&x| T::from_f64(x as f64 / 127.5 - 1.0)));
    }
    let a = dims.as_array();
    Ok(Tensor::new(&[volumes.len(), a[0], a[1], a[2]], data)?)
}

/// Model parameters registered on a tape, in canonical order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    /// Pairs parameter names with variables already on a tape.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        Self {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Puts every parameter on `tape`, as trainable leaves or constants.
pub fn bind_params<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    trainable: bool,
) -> BoundParams {
    BoundParams {
        vars: params
            .iter()
            .map(|(n, t)| (n.to_string(), tape.leaf(t.clone(), trainable)))
            .collect(),
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `[b, patches, patch_volume]`
    pub patches: Var,
    /// `[b, patches + 1, embed]` after class token and positions.
    pub embedded: Var,
    /// Output of each encoder layer.
    pub layers: Vec<Var>,
    /// Encoder output after the optional final norm.
    pub encoded: Var,
    /// `[b, embed]` class-token state.
    pub cls: Var,
    /// `[b, embed + 1]` class token joined with scaled age.
    pub fused: Var,
    /// `[b, classes]`
    pub logits: Var,
}

fn maybe_dropout<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => Ok(tape.dropout(x, rate, &mut **r)?),
        _ => Ok(x),
    }
}

fn linear<T: Element>(tape: &mut Tape<T>, x: Var, p: &BoundParams, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.weight")))?;
    Ok(tape.add(y, p.get(&format!("{prefix}.bias")))?)
}

fn encoder_layer<T: Element>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    layer: usize,
    x: Var,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let name = |s: &str| format!("layers.{layer}.{s}");
    let eps = T::from_f64(cfg.layer_norm_eps);
    let (b, n, e) = {
        let s = tape.shape(x);
        (s[0], s[1], s[2])
    };
    let (heads, hd) = (cfg.num_heads, cfg.head_dim);

    let h = tape.layer_norm(x, p.get(&name("ln1.gamma")), p.get(&name("ln1.beta")), eps)?;
    let mut qkv = Vec::with_capacity(3);
    for proj in ["q", "k", "v"] {
        let t = linear(tape, h, p, &name(&format!("attn.{proj}")))?;
        let t = tape.reshape(t, &[b, n, heads, hd])?;
        qkv.push(tape.permute(t, &[0, 2, 1, 3])?);
    }
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let a = tape.attention(qkv[0], qkv[1], qkv[2], scale)?;
    let a = tape.permute(a, &[0, 2, 1, 3])?;
    let a = tape.reshape(a, &[b, n, e])?;
    let a = linear(tape, a, p, &name("attn.o"))?;
    let a = maybe_dropout(tape, a, cfg.dropout, rng)?;
    let x = tape.add(x, a)?;

    let h = tape.layer_norm(x, p.get(&name("ln2.gamma")), p.get(&name("ln2.beta")), eps)?;
    let h = linear(tape, h, p, &name("mlp.fc1"))?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, p, &name("mlp.fc2"))?;
    let h = maybe_dropout(tape, h, cfg.dropout, rng)?;
    Ok(tape.add(x, h)?)
}

/// Runs the network from already patchified input `[b, patches, patch_volume]`.
///
/// `ages` are in years, one per batch row. Dropout is applied only when a
/// generator is supplied.
pub fn forward_patches<T: Element>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    patches: Var,
    ages: &[f32],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Trace> {
    let shape = tape.shape(patches).to_vec();
    if shape.len() != 3 || shape[1] != cfg.num_patches() || shape[2] != cfg.patch_volume() {
        return Err(ModelError::Input(format!(
            "expected patches [b, {}, {}], got {shape:?}",
            cfg.num_patches(),
            cfg.patch_volume()
        )));
    }
    let b = shape[0];
    if ages.len() != b {
        return Err(ModelError::Input(format!(
            "{} ages for a batch of {b}",
            ages.len()
        )));
    }
    if let Some(a) = ages.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(ModelError::Input(format!("age {a} must be positive")));
    }
    let e = cfg.embed_dim;

    let tokens = tape.matmul_nt(patches, p.get("patch_embed.weight"))?;
    let tokens = tape.add(tokens, p.get("patch_embed.bias"))?;
    let cls = tape.reshape(p.get("cls_token"), &[1, 1, e])?;
    let cls = if b == 1 {
        cls
    } else {
        tape.concat(&vec![cls; b], 0)?
    };
    let seq = tape.concat(&[cls, tokens], 1)?;
    let seq = tape.add(seq, p.get("pos_embed"))?;
    let embedded = maybe_dropout(tape, seq, cfg.dropout, &mut dropout_rng)?;

    let mut x = embedded;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        x = encoder_layer(tape, cfg, p, l, x, &mut dropout_rng)?;
        layers.push(x);
    }
    let encoded = if cfg.final_norm {
        let eps = T::from_f64(cfg.layer_norm_eps);
        tape.layer_norm(x, p.get("final_norm.gamma"), p.get("final_norm.beta"), eps)?
    } else {
        x
    };
    let cls = tape.narrow(encoded, 1, 0, 1)?;
    let cls = tape.reshape(cls, &[b, e])?;
    let age = Tensor::new(
        &[b, 1],
        ages.iter()
            .map(|&a| T::from_f64((a / cfg.age_scale_divisor) as f64))
            .collect(),
    )?;
    let age = tape.constant(age);
    let fused = tape.concat(&[cls, age], 1)?;
    let eps = T::from_f64(cfg.layer_norm_eps);
    let h = tape.layer_norm(
        fused,
        p.get("head.norm.gamma"),
        p.get("head.norm.beta"),
        eps,
    )?;
    let logits = linear(tape, h, p, "head.fc")?;
    Ok(Trace {
        patches,
        embedded,
        layers,
        encoded,
        cls,
        fused,
        logits,
    })
}

/// Full forward pass from a `[b, D, H, W]` input already scaled to `[0, 1]`.
pub fn forward<T: Element>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    input: &Tensor<T>,
    ages: &[f32],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Trace> {
    let patches = tape.constant(patchify(input, cfg)?);
    forward_patches(tape, cfg, p, patches, ages, dropout_rng)
}

/// Inference logits `[n, classes]`, evaluated a few samples at a time.
pub fn infer_logits(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    volumes: &[&Volume],
    ages: &[f32],
) -> Result<Tensor<f32>> {
    const CHUNK: usize = 4;
    if volumes.len() != ages.len() {
        return Err(ModelError::Input(format!(
            "{} volumes but {} ages",
            volumes.len(),
            ages.len()
        )));
    }
    let mut out = Vec::with_capacity(volumes.len() * cfg.num_classes);
    for (vols, ages) in volumes.chunks(CHUNK).zip(ages.chunks(CHUNK)) {
        let mut tape = Tape::<f32>::new();
        let bound = bind_params(&mut tape, params, false);
        let input = volumes_to_input(vols, cfg)?;
        let trace = forward(&mut tape, cfg, &bound, &input, ages, None)?;
        out.extend_from_slice(tape.value(trace.logits).data());
    }
    Ok(Tensor::new(&[volumes.len(), cfg.num_classes], out)?)
}

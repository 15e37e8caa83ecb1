//! Writes and re-reads an RVOL volume and an OSVT checkpoint, showing that
//! both come back bit for bit and what the checkpoint header records.
//!
//! Run with `cargo run --example file_formats`.

use osvit::vit_model::{
    encode_checkpoint, init_params, load_checkpoint, read_osvt_tensors, save_checkpoint,
    ModelConfig,
};
use osvit::volume::{encode_rvol, read_rvol, write_rvol, Dims, Volume, RVOL_HEADER_LEN};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("osvit-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    let volume = Volume::from_fn_f32(Dims::new(5, 6, 7), |d, h, w| {
        (d * 100 + h * 10 + w) as f32 * 0.5
    });
    let path = dir.join("example.rvol");
    write_rvol(&volume, &path)?;
    let back = read_rvol(&path)?;
    println!(
        "RVOL: {} bytes ({} header), dims {}, identical {}",
        std::fs::metadata(&path)?.len(),
        RVOL_HEADER_LEN,
        back.dims(),
        encode_rvol(&back) == encode_rvol(&volume)
    );

    let cfg = ModelConfig {
        num_layers: 1,
        ..ModelConfig::default()
    };
    let params = init_params(&cfg, 3)?;
    let path = dir.join("example.osvt");
    save_checkpoint(&params, &cfg, &path)?;
    let (loaded, loaded_cfg) = load_checkpoint(&path)?;
    println!(
        "OSVT: {} bytes, {} tensors, {} parameters, identical {}",
        std::fs::metadata(&path)?.len(),
        loaded.len(),
        loaded.num_parameters(),
        loaded.bit_eq(&params) && loaded_cfg == cfg
    );
    let (header, tensors) = read_osvt_tensors(&encode_checkpoint(&params, &cfg))?;
    println!("header config: {header}");
    for (name, t) in tensors.iter().take(4) {
        println!("  {name} {:?}", t.shape());
    }
    println!("  ... {} more", tensors.len().saturating_sub(4));

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

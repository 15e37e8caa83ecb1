//! Downsamples a scanner-sized volume to model resolution and quantises it
//! to 8 bits, comparing linear and cubic splines on a smooth test pattern.
//!
//! Run with `cargo run --release --example preprocess_volume`.

use osvit::preprocess::{preprocess_volume, spline_downsample, PreprocessConfig, SplineOrder};
use osvit::volume::{Dims, Volume};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let source = Dims::new(155, 240, 240);
    let pattern =
        |d: f64, h: f64, w: f64| 100.0 + 40.0 * (d / 30.0).sin() * (h / 45.0).cos() + 0.2 * w;
    let volume = Volume::from_fn_f32(source, |d, h, w| {
        pattern(d as f64, h as f64, w as f64) as f32
    });

    let cfg = PreprocessConfig::default();
    let target = cfg.target_dims;
    let step = |s: usize, t: usize| (s - 1) as f64 / (t - 1) as f64;
    let steps = [step(155, 50), step(240, 64), step(240, 64)];
    for order in [SplineOrder::Linear, SplineOrder::Cubic] {
        let out = spline_downsample(&volume, target, order)?;
        let mut worst = 0.0f64;
        for d in 2..target.depth - 2 {
            for h in 2..target.height - 2 {
                for w in 2..target.width - 2 {
                    let want = pattern(
                        d as f64 * steps[0],
                        h as f64 * steps[1],
                        w as f64 * steps[2],
                    );
                    worst = worst.max((out.get_f32(d, h, w) as f64 - want).abs());
                }
            }
        }
        println!(
            "{order:?}: {source} -> {}, max interior deviation from the pattern {worst:.4}",
            out.dims()
        );
    }

    let quantised = preprocess_volume(&volume, &cfg)?;
    let bytes = quantised.as_u8().expect("preprocess emits 8-bit volumes");
    let (lo, hi) = bytes
        .iter()
        .fold((u8::MAX, 0), |(lo, hi), &b| (lo.min(b), hi.max(b)));
    println!("quantised: {} voxels, range {lo}..={hi}", bytes.len());
    Ok(())
}

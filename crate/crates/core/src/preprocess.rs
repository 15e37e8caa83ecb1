//! Downsampling to model resolution and 8-bit quantisation.
//!
//! Resampling uses an align-corners grid: output sample `i` of `N_out` maps to
//! input coordinate `i·(N_in−1)/(N_out−1)`. Cubic resampling evaluates the
//! interpolating B-spline (recursive prefilter, mirror boundaries), so the
//! interpolant passes through the original samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Dims, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("invalid preprocessing config: {0}")]
    Config(String),
    #[error("{axis} axis: cannot resample {source_extent} samples up to {target_extent}; this is a downsampler")]
    Upsample {
        axis: &'static str,
        source_extent: usize,
        target_extent: usize,
    },
    #[error("source volume {0} needs at least 2 samples per axis")]
    SourceTooSmall(Dims),
    #[error("volume contains non-finite values")]
    NonFinite,
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplineOrder {
    Linear = 1,
    Cubic = 3,
}

impl TryFrom<u8> for SplineOrder {
    type Error = PreprocessError;

    fn try_from(order: u8) -> Result<Self> {
        match order {
            1 => Ok(Self::Linear),
            3 => Ok(Self::Cubic),
            other => Err(PreprocessError::Config(format!(
                "spline order {other} is not supported (use 1 or 3)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_dims: Dims,
    pub spline_order: SplineOrder,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_dims: Dims::new(50, 64, 64),
            spline_order: SplineOrder::Cubic,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.target_dims;
        if t.as_array().iter().any(|&e| e < 2) {
            return Err(PreprocessError::Config(format!(
                "target extents must be at least 2, got {t}"
            )));
        }
        Ok(())
    }
}

const AXIS_NAMES: [&str; 3] = ["depth", "height", "width"];

/// Resamples `volume` down to `target` with the given spline order.
pub fn spline_downsample(volume: &Volume, target: Dims, order: SplineOrder) -> Result<Volume> {
    PreprocessConfig {
        target_dims: target,
        spline_order: order,
    }
    .validate()?;
    let src = volume.dims();
    if src.as_array().iter().any(|&e| e < 2) {
        return Err(PreprocessError::SourceTooSmall(src));
    }
    for axis in 0..3 {
        let (s, t) = (src.as_array()[axis], target.as_array()[axis]);
        if t > s {
            return Err(PreprocessError::Upsample {
                axis: AXIS_NAMES[axis],
                source_extent: s,
                target_extent: t,
            });
        }
    }
    let mut shape = src.as_array();
    let mut data: Vec<f64> = volume.to_f32().into_iter().map(f64::from).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::NonFinite);
    }
    for axis in (0..3).rev() {
        data = resample_axis(&data, &mut shape, axis, target.as_array()[axis], order);
    }
    let out = data.into_iter().map(|v| v as f32).collect();
    Ok(Volume::from_f32(target, out).expect("resampled length matches target"))
}

fn resample_axis(
    data: &[f64],
    shape: &mut [usize; 3],
    axis: usize,
    n_out: usize,
    order: SplineOrder,
) -> Vec<f64> {
    let n_in = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let step = (n_in - 1) as f64 / (n_out - 1) as f64;
    let coords: Vec<f64> = (0..n_out).map(|i| i as f64 * step).collect();
    let mut out = vec![0.0; outer * n_out * inner];
    let mut line = vec![0.0; n_in];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = data[(o * n_in + k) * inner + i];
            }
            if order == SplineOrder::Cubic {
                cubic_prefilter(&mut line);
            }
            for (j, &x) in coords.iter().enumerate() {
                let v = match order {
                    SplineOrder::Cubic => cubic_eval(&line, x),
                    SplineOrder::Linear => linear_eval(&line, x),
                };
                out[(o * n_out + j) * inner + i] = v;
            }
        }
    }
    shape[axis] = n_out;
    out
}

/// Index into a whole-sample symmetric extension of a length-`n` signal.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n as isize - 2;
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Converts samples into cubic B-spline coefficients in place.
fn cubic_prefilter(line: &mut [f64]) {
    let n = line.len();
    if n < 2 {
        return;
    }
    let z = 3f64.sqrt() - 2.0;
    for v in line.iter_mut() {
        *v *= 6.0;
    }
    // Causal initialisation over one period of the mirrored signal.
    let period = 2 * n - 2;
    let mut acc = 0.0;
    let mut zk = 1.0;
    for k in 0..period {
        acc += zk * line[mirror(k as isize, n)];
        zk *= z;
    }
    line[0] = acc / (1.0 - zk);
    for k in 1..n {
        line[k] += z * line[k - 1];
    }
    line[n - 1] = (z / (z * z - 1.0)) * (line[n - 1] + z * line[n - 2]);
    for k in (0..n - 1).rev() {
        line[k] = z * (line[k + 1] - line[k]);
    }
}

fn cubic_eval(coeffs: &[f64], x: f64) -> f64 {
    let n = coeffs.len();
    let i = x.floor();
    let t = x - i;
    let i = i as isize;
    let t2 = t * t;
    let t3 = t2 * t;
    let weights = [
        (1.0 - t).powi(3) / 6.0,
        (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0,
        (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0,
        t3 / 6.0,
    ];
    weights
        .iter()
        .enumerate()
        .map(|(j, w)| w * coeffs[mirror(i - 1 + j as isize, n)])
        .sum()
}

fn linear_eval(samples: &[f64], x: f64) -> f64 {
    let n = samples.len();
    let i = (x.floor() as usize).min(n - 2);
    let t = x - i as f64;
    (1.0 - t) * samples[i] + t * samples[i + 1]
}

/// Min-max scales a volume to 0–255 with round-half-away-from-zero.
///
/// A constant volume maps to all zeros.
pub fn quantize_u8(volume: &Volume) -> Result<Volume> {
    let values = volume.to_f32();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::NonFinite);
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let out = if max == min {
        vec![0u8; values.len()]
    } else {
        let scale = 255.0 / (max - min);
        values
            .iter()
            .map(|&v| ((v as f64 - min) * scale).round().clamp(0.0, 255.0) as u8)
            .collect()
    };
    Ok(Volume::from_u8(volume.dims(), out).expect("same dims"))
}

/// Downsample then quantise.
pub fn preprocess_volume(volume: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    let resampled = spline_downsample(volume, cfg.target_dims, cfg.spline_order)?;
    quantize_u8(&resampled)
}

//! Synthetic brain-like phantoms for desk-scale runs.
//!
//! Each subject gets a dim ellipsoidal "head" with a bright centred lesion
//! whose radius grows with the survival class code, plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{shuffle, Sequence, SurvivalClass, LONG_THRESHOLD_DAYS, SHORT_THRESHOLD_DAYS};
use crate::volume::{Dims, Resection, SubjectRecord, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: Dims,
    /// Lesion radius (voxels, in-plane) for the long-survival class.
    pub base_radius: f32,
    /// Radius added per class code step.
    pub radius_step: f32,
    /// Uniform per-subject radius jitter, ± this many voxels.
    pub radius_jitter: f32,
    /// Depth semi-axis as a fraction of the in-plane radius.
    pub depth_ratio: f32,
    pub head_intensity: [f32; 4],
    pub lesion_intensity: [f32; 4],
    pub noise_sigma: f32,
    pub age_range: (f32, f32),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: Dims::new(50, 64, 64),
            base_radius: 5.0,
            radius_step: 4.0,
            radius_jitter: 0.75,
            depth_ratio: 0.8,
            head_intensity: [90.0, 100.0, 110.0, 95.0],
            lesion_intensity: [210.0, 235.0, 220.0, 225.0],
            noise_sigma: 8.0,
            age_range: (40.0, 80.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub records: Vec<SubjectRecord>,
    pub volumes: Vec<(String, Sequence, Volume)>,
    /// Lesion in-plane radius drawn for each subject, aligned with `records`.
    pub radii: Vec<f32>,
    pub config: PhantomConfig,
}

impl SynthCohort {
    pub fn volume(&self, subject: &str, seq: Sequence) -> Option<&Volume> {
        self.volumes
            .iter()
            .find(|(s, q, _)| s == subject && *q == seq)
            .map(|(_, _, v)| v)
    }
}

/// Generates `n_subjects` labelled GTR subjects with four phantom sequences each.
///
/// Classes are balanced (counts differ by at most one). Panics if `n_subjects < 3`;
/// use [`synth_generate_with`] for a fallible entry point.
pub fn synth_generate(n_subjects: usize, seed: u64) -> SynthCohort {
    synth_generate_with(n_subjects, seed, &PhantomConfig::default()).expect("at least 3 subjects")
}

pub fn synth_generate_with(
    n_subjects: usize,
    seed: u64,
    config: &PhantomConfig,
) -> Result<SynthCohort, String> {
    if n_subjects < 3 {
        return Err(format!(
            "the generator needs at least 3 subjects, got {n_subjects}"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<SurvivalClass> =
        (0..n_subjects).map(|i| SurvivalClass::ALL[i % 3]).collect();
    shuffle(&mut classes, &mut rng);

    let noise = Normal::new(0.0f32, config.noise_sigma).map_err(|e| e.to_string())?;
    let mut records = Vec::with_capacity(n_subjects);
    let mut volumes = Vec::with_capacity(4 * n_subjects);
    let mut radii = Vec::with_capacity(n_subjects);
    for (i, class) in classes.into_iter().enumerate() {
        let subject_id = format!("SYN{i:03}");
        let age = rng.random_range(config.age_range.0..config.age_range.1);
        let days = match class {
            SurvivalClass::Short => rng.random_range(30..SHORT_THRESHOLD_DAYS),
            SurvivalClass::Medium => rng.random_range(SHORT_THRESHOLD_DAYS..LONG_THRESHOLD_DAYS),
            SurvivalClass::Long => rng.random_range(LONG_THRESHOLD_DAYS..1500),
        };
        let jitter = rng.random_range(-config.radius_jitter..=config.radius_jitter);
        let radius = config.base_radius + config.radius_step * class.code() as f32 + jitter;
        for (k, seq) in Sequence::ALL.into_iter().enumerate() {
            let v = phantom(
                config,
                radius,
                config.head_intensity[k],
                config.lesion_intensity[k],
                &noise,
                &mut rng,
            );
            volumes.push((subject_id.clone(), seq, v));
        }
        records.push(SubjectRecord {
            subject_id,
            age,
            survival_days: Some(days),
            resection: Resection::Gtr,
        });
        radii.push(radius);
    }
    Ok(SynthCohort {
        records,
        volumes,
        radii,
        config: config.clone(),
    })
}

fn phantom(
    cfg: &PhantomConfig,
    radius: f32,
    head: f32,
    lesion: f32,
    noise: &Normal<f32>,
    rng: &mut ChaCha8Rng,
) -> Volume {
    let Dims {
        depth,
        height,
        width,
    } = cfg.dims;
    let centre = [
        (depth as f32 - 1.0) / 2.0,
        (height as f32 - 1.0) / 2.0,
        (width as f32 - 1.0) / 2.0,
    ];
    let head_axes = [
        depth as f32 * 0.45,
        height as f32 * 0.44,
        width as f32 * 0.40,
    ];
    let lesion_axes = [radius * cfg.depth_ratio, radius, radius];
    let inside = |axes: &[f32; 3], p: [f32; 3]| -> bool {
        (0..3)
            .map(|a| ((p[a] - centre[a]) / axes[a]).powi(2))
            .sum::<f32>()
            <= 1.0
    };
    let mut data = Vec::with_capacity(cfg.dims.voxels());
    for d in 0..depth {
        for h in 0..height {
            for w in 0..width {
                let p = [d as f32, h as f32, w as f32];
                let base = if inside(&lesion_axes, p) {
                    lesion
                } else if inside(&head_axes, p) {
                    head
                } else {
                    0.0
                };
                let v = base + noise.sample(rng);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Volume::from_u8(cfg.dims, data).expect("phantom dims")
}

//! Synthetic cohorts in the on-disk layout `ingest` expects.
//!
//! Cancerous lesions are drawn with irregular borders, darker pigment and
//! bluish blotches; benign ones are rounder and more uniform. A per-lesion
//! noise term keeps the classes overlapping.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{write_metadata, Diagnosis, Label, LesionRecord};
use crate::error::{Error, Result};
use crate::imaging::MaskedImage;
use crate::splits::{stable_seed, Category};

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    /// Patients per category, in [`Category::ALL`] order.
    pub patients: [usize; 4],
    /// Chance that a patient gets a second lesion.
    pub second_lesion: f64,
    pub image_size: usize,
    /// Class separation in [0, 1]; 0 makes the classes indistinguishable.
    pub signal: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            patients: [150, 150, 150, 150],
            second_lesion: 0.3,
            image_size: 40,
            signal: 0.6,
            seed: 1,
        }
    }
}

impl CohortSpec {
    /// Small cohort for quick tests: `n` patients per category.
    pub fn small(n: usize, seed: u64) -> Self {
        Self {
            patients: [n; 4],
            seed,
            ..Self::default()
        }
    }
}

const CANCER: [Diagnosis; 3] = [Diagnosis::BCC, Diagnosis::SCC, Diagnosis::MEL];
const BENIGN: [Diagnosis; 3] = [Diagnosis::ACK, Diagnosis::NEV, Diagnosis::SEK];

/// Metadata records for `spec`, patients in category order.
pub fn generate_records(spec: &CohortSpec) -> Vec<LesionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    let mut patient_no = 0;
    let mut lesion_no = 0;
    for (cat, &n) in Category::ALL.iter().zip(&spec.patients) {
        for _ in 0..n {
            patient_no += 1;
            let patient = format!("PAT_{patient_no}");
            let mut labels = vec![cat.label];
            if rng.gen_bool(spec.second_lesion) {
                // a cancer patient may also carry a benign lesion, never the reverse
                labels.push(if cat.label == Label::Cancer && rng.gen_bool(0.5) {
                    Label::NonCancer
                } else {
                    cat.label
                });
            }
            for label in labels {
                lesion_no += 1;
                let pool = if label == Label::Cancer { &CANCER } else { &BENIGN };
                out.push(LesionRecord {
                    image_id: format!("{patient}_{lesion_no}_{}.png", rng.gen_range(100..1000)),
                    lesion_id: lesion_no.to_string(),
                    patient_id: patient.clone(),
                    sex: cat.sex,
                    diagnosis: pool[rng.gen_range(0..3)],
                    label,
                    is_augmented: false,
                    augment_parent: None,
                });
            }
        }
    }
    out
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Deterministic image for one record.
pub fn render_lesion(record: &LesionRecord, spec: &CohortSpec) -> MaskedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[&spec.seed.to_string(), &record.image_id]));
    let size = spec.image_size;
    let cancer = record.label == Label::Cancer;
    // latent malignancy: class mean ± noise
    let target = if cancer { 1.0 } else { 0.0 };
    let m = (spec.signal * target + (1.0 - spec.signal) * rng.gen::<f64>() + 0.25 * (rng.gen::<f64>() - 0.5))
        .clamp(0.0, 1.0);

    let c = size as f64 / 2.0;
    let (cx, cy) = (c + rng.gen_range(-2.0..2.0), c + rng.gen_range(-2.0..2.0));
    let r0 = size as f64 * rng.gen_range(0.2..0.3);
    let lobes = rng.gen_range(3..7) as f64;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let wobble = 0.05 + 0.3 * m;
    let stretch = 1.0 + 0.4 * m * rng.gen::<f64>();

    let skin = [
        rng.gen_range(195.0..235.0),
        rng.gen_range(150.0..185.0),
        rng.gen_range(125.0..160.0),
    ];
    let dark = 1.0 - 0.45 * m;
    let pigment = [150.0 * dark, 95.0 * dark, 70.0 * dark];
    let blotch = [95.0, 100.0, 140.0];
    let (bx, by) = (cx + rng.gen_range(-r0..r0) * 0.5, cy + rng.gen_range(-r0..r0) * 0.5);
    let br = r0 * 0.6 * m;
    let noise_seed: u64 = rng.gen();

    let inside = |x: usize, y: usize| {
        let dx = (x as f64 + 0.5 - cx) / stretch;
        let dy = y as f64 + 0.5 - cy;
        let theta = dy.atan2(dx);
        (dx * dx + dy * dy).sqrt() <= r0 * (1.0 + wobble * (lobes * theta + phase).sin())
    };
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let jitter: Vec<f64> = (0..size * size).map(|_| noise.gen_range(-8.0..8.0)).collect();
    let colour = |x: usize, y: usize| {
        let j = jitter[y * size + x];
        let base = if !inside(x, y) {
            skin
        } else {
            let d = ((x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2)).sqrt();
            if d < br {
                blotch
            } else {
                pigment
            }
        };
        [clamp_u8(base[0] + j), clamp_u8(base[1] + j), clamp_u8(base[2] + j)]
    };
    MaskedImage::from_fn(size, size, colour, inside)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortPaths {
    pub metadata: PathBuf,
    pub images: PathBuf,
    pub masks: PathBuf,
}

/// Writes `metadata.csv`, `images/` and `masks/` under `dir`.
pub fn write_cohort(dir: &Path, spec: &CohortSpec) -> Result<(CohortPaths, Vec<LesionRecord>)> {
    let paths = CohortPaths {
        metadata: dir.join("metadata.csv"),
        images: dir.join("images"),
        masks: dir.join("masks"),
    };
    for d in [&paths.images, &paths.masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let records = generate_records(spec);
    write_metadata(&paths.metadata, &records)?;
    records.par_iter().try_for_each(|r| {
        let stem = Path::new(&r.image_id)
            .file_stem()
            .expect("generated ids have a stem")
            .to_string_lossy()
            .into_owned();
        render_lesion(r, spec).save(&paths.images.join(&r.image_id), &paths.masks.join(format!("{stem}_mask.png")))
    })?;
    Ok((paths, records))
}

//! Seeded synthetic cohorts: recurrence scores, clinical records whose grade
//! tracks the score, and slides whose dark-blob density tracks the score.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    categorize, ClinicalRecord, CohortManifest, Histology, Receptor, ReceptorStatus, RiskCategory, SlideEntry,
    HIGH_RISK_CUTOFF,
};
use crate::error::{Error, Result};
use crate::slidebundle::{SlideBundle, DEFAULT_MICRONS_PER_PIXEL};

/// Blob density is counted per square of this many pixels on a side.
pub const AREA_UNIT_SIDE: u32 = 64;
pub const BACKGROUND: [u8; 3] = [236, 200, 222];
pub const BLOB: [u8; 3] = [84, 40, 118];
const HISTOLOGY_WEIGHTS: [f64; 4] = [0.75, 0.05, 0.12, 0.08];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Extra ER-negative patients, dropped again at ingestion.
    pub n_er_negative: usize,
    pub slide_side: u32,
    pub tile_size: u32,
    /// Baseline blobs per area unit.
    pub blob_base: f64,
    /// Additional blobs per area unit per score point.
    pub blob_slope: f64,
    pub blob_radius: (f64, f64),
    /// Log-odds of a higher grade per 10 score points.
    pub grade_beta: f64,
    pub high_fraction: f64,
    pub score_shape: f64,
    pub score_scale: f64,
    pub multi_slide_fraction: f64,
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 200,
            n_er_negative: 0,
            slide_side: 192,
            tile_size: 64,
            blob_base: 1.0,
            blob_slope: 1.0,
            blob_radius: (1.5, 3.0),
            grade_beta: 1.5,
            high_fraction: 0.168,
            score_shape: 2.5,
            score_scale: 9.2,
            multi_slide_fraction: 0.1,
            missing_fraction: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str| Err(Error::Config(format!("synth.{field} out of range")));
        if self.n_patients == 0 {
            return bad("n_patients");
        }
        if self.slide_side == 0 || self.tile_size == 0 {
            return bad("slide_side");
        }
        if !(self.blob_base >= 0.0 && self.blob_slope > 0.0) {
            return bad("blob_slope");
        }
        if !(self.blob_radius.0 > 0.0 && self.blob_radius.1 >= self.blob_radius.0) {
            return bad("blob_radius");
        }
        if !(self.grade_beta > 0.0) {
            return bad("grade_beta");
        }
        if !(self.high_fraction > 0.0 && self.high_fraction < 1.0) {
            return bad("high_fraction");
        }
        if !(self.score_shape > 0.0 && self.score_scale > 0.0) {
            return bad("score_shape");
        }
        if !(0.0..=1.0).contains(&self.multi_slide_fraction) {
            return bad("multi_slide_fraction");
        }
        if !(0.0..=1.0).contains(&self.missing_fraction) {
            return bad("missing_fraction");
        }
        Ok(())
    }

    fn area_units(&self) -> f64 {
        let s = self.slide_side as f64 / AREA_UNIT_SIDE as f64;
        s * s
    }

    pub fn expected_blobs(&self, score: f64) -> f64 {
        self.area_units() * (self.blob_base + self.blob_slope * score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidePlan {
    pub slide_id: String,
    pub patient_id: String,
    pub blobs: Vec<Blob>,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPatient {
    pub record: ClinicalRecord,
    pub slides: Vec<SlidePlan>,
}

impl SynthPatient {
    pub fn score(&self) -> u8 {
        self.record.oncotype_score.unwrap()
    }
}

/// Score conditioned on its category by rejection from the gamma draw.
fn sample_score(cfg: &SynthConfig, high: bool, rng: &mut ChaCha8Rng) -> u8 {
    let gamma = Gamma::new(cfg.score_shape, cfg.score_scale).unwrap();
    let cut = HIGH_RISK_CUTOFF as f64 - 0.5;
    for _ in 0..10_000 {
        let x = gamma.sample(rng);
        if x <= 100.5 && (x >= cut) == high {
            return x.round() as u8;
        }
    }
    if high {
        HIGH_RISK_CUTOFF as u8
    } else {
        0
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Ordinal logit: P(grade >= 2) and P(grade >= 3) share the slope.
fn sample_grade(cfg: &SynthConfig, score: f64, rng: &mut ChaCha8Rng) -> u8 {
    let z = cfg.grade_beta * (score - HIGH_RISK_CUTOFF as f64) / 10.0;
    let (p2, p3) = (sigmoid(z + 1.5), sigmoid(z - 1.0));
    let u: f64 = rng.random();
    if u < p3 {
        3
    } else if u < p2 {
        2
    } else {
        1
    }
}

fn sample_receptor(p_pos: f64, missing: f64, rng: &mut ChaCha8Rng) -> Receptor {
    if rng.random_bool(missing) {
        return Receptor::known(ReceptorStatus::Missing);
    }
    Receptor::known(if rng.random_bool(p_pos) {
        ReceptorStatus::Positive
    } else {
        ReceptorStatus::Negative
    })
}

pub fn patient_id(index: usize) -> String {
    format!("SYN{index:05}")
}

/// Slides `<patient>_S1..` with Poisson blob counts at the given score.
pub fn plan_slides(cfg: &SynthConfig, patient: &str, score: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<SlidePlan> {
    let side = cfg.slide_side as f64;
    let lambda = cfg.expected_blobs(score);
    (0..n)
        .map(|k| {
            let count = if lambda > 0.0 { Poisson::new(lambda).unwrap().sample(rng) as usize } else { 0 };
            let blobs = (0..count)
                .map(|_| Blob {
                    cx: rng.random_range(0.0..side),
                    cy: rng.random_range(0.0..side),
                    a: rng.random_range(cfg.blob_radius.0..=cfg.blob_radius.1),
                    b: rng.random_range(cfg.blob_radius.0..=cfg.blob_radius.1),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                })
                .collect();
            SlidePlan {
                slide_id: format!("{patient}_S{}", k + 1),
                patient_id: patient.to_string(),
                blobs,
                noise_seed: rng.random(),
            }
        })
        .collect()
}

/// Patient `index` draws from its own ChaCha stream of the cohort seed.
pub fn sample_patient(cfg: &SynthConfig, index: usize) -> SynthPatient {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let high = rng.random_bool(cfg.high_fraction);
    let score = sample_score(cfg, high, &mut rng);
    let grade = sample_grade(cfg, score as f64, &mut rng);
    let age = Normal::new(58.0f64, 10.0).unwrap().sample(&mut rng).clamp(25.0, 90.0);
    let size = LogNormal::new(15f64.ln(), 0.5).unwrap().sample(&mut rng).clamp(1.0, 120.0);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut histology = Histology::Other;
    for (h, w) in Histology::ALL.iter().zip(HISTOLOGY_WEIGHTS) {
        acc += w;
        if u < acc {
            histology = *h;
            break;
        }
    }
    let er_negative = index >= cfg.n_patients;
    let er = Receptor::known(if er_negative {
        ReceptorStatus::Negative
    } else {
        ReceptorStatus::Positive
    });
    let pr = sample_receptor(0.85, cfg.missing_fraction, &mut rng);
    let her2 = sample_receptor(0.1, cfg.missing_fraction, &mut rng);
    let pid = patient_id(index);
    let n_slides = if rng.random_bool(cfg.multi_slide_fraction) { 2 } else { 1 };
    let slides = plan_slides(cfg, &pid, score as f64, n_slides, &mut rng);
    SynthPatient {
        record: ClinicalRecord {
            patient_id: pid,
            age_years: (age * 10.0).round() / 10.0,
            tumor_size_mm: (size * 10.0).round() / 10.0,
            grade,
            histology,
            er,
            pr,
            her2,
            oncotype_score: Some(score),
        },
        slides,
    }
}

/// All patients, ER-negative extras last.
pub fn sample_cohort(cfg: &SynthConfig) -> Result<Vec<SynthPatient>> {
    cfg.validate()?;
    Ok((0..cfg.n_patients + cfg.n_er_negative)
        .into_par_iter()
        .map(|i| sample_patient(cfg, i))
        .collect())
}

pub fn render_slide(cfg: &SynthConfig, plan: &SlidePlan) -> RgbImage {
    let side = cfg.slide_side;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.noise_seed);
    let mut img = RgbImage::from_fn(side, side, |_, _| {
        let j: i16 = rng.random_range(-6..=6);
        Rgb(BACKGROUND.map(|c| (c as i16 + j).clamp(0, 255) as u8))
    });
    for blob in &plan.blobs {
        let r = blob.a.max(blob.b);
        let (sin, cos) = blob.angle.sin_cos();
        let x0 = (blob.cx - r).floor().max(0.0) as u32;
        let y0 = (blob.cy - r).floor().max(0.0) as u32;
        let x1 = ((blob.cx + r).ceil() as u32).min(side - 1);
        let y1 = ((blob.cy + r).ceil() as u32).min(side - 1);
        let shade: i16 = rng.random_range(-10..=10);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - blob.cx, y as f64 + 0.5 - blob.cy);
                let u = (dx * cos + dy * sin) / blob.a;
                let v = (-dx * sin + dy * cos) / blob.b;
                if u * u + v * v <= 1.0 {
                    img.put_pixel(x, y, Rgb(BLOB.map(|c| (c as i16 + shade).clamp(0, 255) as u8)));
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub clinical_csv: PathBuf,
    pub manifest: PathBuf,
    pub patients: Vec<SynthPatient>,
}

impl SynthOutput {
    pub fn labels(&self) -> Vec<(String, RiskCategory)> {
        self.patients
            .iter()
            .map(|p| (p.record.patient_id.clone(), categorize(p.score() as i64).unwrap()))
            .collect()
    }
}

/// Writes `bundles/<slide_id>/`, `clinical.csv`, `manifest.csv` and
/// `truth.csv` (slide, patient, score, planted blob count) under `dir`.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<SynthOutput> {
    let patients = sample_cohort(cfg)?;
    let plans: Vec<&SlidePlan> = patients.iter().flat_map(|p| &p.slides).collect();
    plans.par_iter().try_for_each(|plan| {
        let img = render_slide(cfg, plan);
        SlideBundle::write(&img, &plan.slide_id, DEFAULT_MICRONS_PER_PIXEL, cfg.tile_size, &dir.join("bundles").join(&plan.slide_id))
            .map(|_| ())
    })?;
    let cohort = CohortManifest {
        root: dir.to_path_buf(),
        records: patients.iter().map(|p| p.record.clone()).collect(),
        entries: plans
            .iter()
            .map(|plan| SlideEntry {
                slide_id: plan.slide_id.clone(),
                patient_id: plan.patient_id.clone(),
                bundle_path: Path::new("bundles").join(&plan.slide_id),
                partition: None,
            })
            .collect(),
        excluded_er_negative: Vec::new(),
    };
    let (clinical_csv, manifest) = cohort.write(dir)?;
    let mut truth = String::from("slide_id,patient_id,score,blobs\n");
    for p in &patients {
        for s in &p.slides {
            truth.push_str(&format!("{},{},{},{}\n", s.slide_id, s.patient_id, p.score(), s.blobs.len()));
        }
    }
    crate::io::write_atomic(&dir.join("truth.csv"), truth.as_bytes())?;
    Ok(SynthOutput {
        clinical_csv,
        manifest,
        patients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_matches_draw() {
        let cfg = SynthConfig::default();
        for i in 0..300 {
            let p = sample_patient(&cfg, i);
            assert!(p.score() <= 100);
            assert!((1..=3).contains(&p.record.grade));
            assert!(!p.slides.is_empty());
        }
    }

    #[test]
    fn background_is_tissue() {
        let t = crate::slidebundle::TissueThresholds::default();
        assert!(t.is_tissue(BACKGROUND[0], BACKGROUND[1], BACKGROUND[2]) && t.is_tissue(BLOB[0], BLOB[1], BLOB[2]));
    }

    #[test]
    fn render_is_deterministic_and_draws_blobs() {
        let cfg = SynthConfig::default();
        let plan = SlidePlan {
            slide_id: "s".into(),
            patient_id: "p".into(),
            blobs: vec![Blob { cx: 50.0, cy: 60.0, a: 5.0, b: 3.0, angle: 0.3 }],
            noise_seed: 9,
        };
        let a = render_slide(&cfg, &plan);
        assert_eq!(a, render_slide(&cfg, &plan));
        assert_eq!(a.get_pixel(50, 60).0[0] < 120, true);
        assert!(a.get_pixel(150, 150).0[0] > 200);
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = SynthConfig { high_fraction: 1.0, ..SynthConfig::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("high_fraction"));
    }
}

//! End-to-end orchestration over an artifact directory: ingestion,
//! partitioning, the three image training phases, the clinical model,
//! fusion, evaluation, prediction and heatmaps.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggrformer::{
    ModelConfig, Monitor, OncoModel, Phase, RegionPixels, SlidePixels, SlidePrediction, TrainOptions, TrainReport,
};
use crate::clinreg::{default_grid, ClinModel, CvSet, FitOptions, GridPoint, Penalty};
use crate::corpus::{self, ClinicalRecord, CohortManifest, Partition, RiskCategory, SlideEntry, SplitRatios};
use crate::diffcore::{AdamConfig, Checkpoint};
use crate::error::{Error, Result};
use crate::evalstat::{aggregate_patient, evaluate, r_squared, write_report, EvalSettings, EvaluationReport, ModelScores, ScoredCohort};
use crate::fusion::{fit_fusion, FusionModel};
use crate::heatmap::{self, HeatmapOptions};
use crate::io::write_atomic;
use crate::slidebundle::{patch_grid, sample_regions, SlideBundle, TissueThresholds, DEFAULT_REGION_SIDE};
use crate::synthgen::{self, SynthConfig, SynthOutput};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding `clinical.csv`, `manifest.csv` and the bundles.
    pub cohort: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            cohort: PathBuf::from("cohort"),
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub regions_per_slide: usize,
    pub region_side: u32,
    pub tissue: TissueThresholds,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            regions_per_slide: 9,
            region_side: DEFAULT_REGION_SIDE,
            tissue: TissueThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Only used by the masked pretraining phase.
    pub mask_fraction: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: AdamConfig::default().lr,
            mask_fraction: 0.5,
        }
    }
}

impl StageConfig {
    pub fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClinicalConfig {
    pub strengths: Vec<f64>,
    pub penalties: Vec<Penalty>,
    pub folds: usize,
    pub cv_on: CvSet,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClinicalConfig {
    fn default() -> Self {
        let f = FitOptions::default();
        Self {
            strengths: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            penalties: vec![Penalty::L1, Penalty::L2],
            folds: f.folds,
            cv_on: f.cv_on,
            max_iter: f.max_iter,
            tol: f.tol,
        }
    }
}

impl ClinicalConfig {
    pub fn fit_options(&self, seed: u64) -> FitOptions {
        let mut grid = Vec::new();
        for &strength in &self.strengths {
            for &penalty in &self.penalties {
                grid.push(GridPoint { strength, penalty });
            }
        }
        if grid.is_empty() {
            grid = default_grid();
        }
        FitOptions {
            grid,
            folds: self.folds,
            cv_on: self.cv_on,
            seed,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub grid_steps: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            grid_steps: crate::fusion::GRID_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub partition: SplitRatios,
    pub pretrain: StageConfig,
    pub regression: StageConfig,
    pub classifier: StageConfig,
    pub clinical: ClinicalConfig,
    pub evaluation: EvalSettings,
    pub fusion: FusionConfig,
    pub heatmap: HeatmapOptions,
    /// Text the configuration was parsed from, echoed into artifacts.
    #[serde(skip)]
    pub source: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            sampling: SamplingConfig::default(),
            partition: SplitRatios::default(),
            pretrain: StageConfig::default(),
            regression: StageConfig::default(),
            classifier: StageConfig::default(),
            clinical: ClinicalConfig::default(),
            evaluation: EvalSettings::default(),
            fusion: FusionConfig::default(),
            heatmap: HeatmapOptions::default(),
            source: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.source = Some(text.to_string());
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::io::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        let s = &self.sampling;
        let patch = self.model.patchnet.patch_side as u32;
        if s.regions_per_slide == 0 {
            return Err(Error::Config("sampling.regions_per_slide must be positive".into()));
        }
        if patch == 0 || s.region_side % patch != 0 {
            return Err(Error::Config(format!(
                "sampling.region_side {} is not a multiple of model.patchnet.patch_side {patch}",
                s.region_side
            )));
        }
        if (s.region_side / patch) as usize != self.model.aggrformer.grid_side {
            return Err(Error::Config(format!(
                "model.aggrformer.grid_side {} does not match sampling.region_side / patch_side = {}",
                self.model.aggrformer.grid_side,
                s.region_side / patch
            )));
        }
        for (name, st) in [("pretrain", &self.pretrain), ("regression", &self.regression), ("classifier", &self.classifier)] {
            if st.batch_size == 0 || !(st.lr > 0.0) {
                return Err(Error::Config(format!("{name}.batch_size and {name}.lr must be positive")));
            }
        }
        if !(self.pretrain.mask_fraction > 0.0 && self.pretrain.mask_fraction < 1.0) {
            return Err(Error::Config("pretrain.mask_fraction must lie in (0, 1)".into()));
        }
        if self.fusion.grid_steps == 0 {
            return Err(Error::Config("fusion.grid_steps must be positive".into()));
        }
        if !(self.evaluation.level > 0.0 && self.evaluation.level < 1.0) || self.evaluation.bootstrap_iterations == 0 {
            return Err(Error::Config("evaluation.level must lie in (0, 1) with positive iterations".into()));
        }
        Ok(())
    }

    /// Version and configuration recorded in every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "version": VERSION,
            "config": serde_json::to_value(self).unwrap_or_default(),
            "config_text": self.source,
        })
    }
}

/// 64-bit FNV-1a, used to derive per-slide sampling seeds.
fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub version: String,
    pub losses: Vec<f64>,
    pub stopped_at: Option<usize>,
    pub metrics: serde_json::Value,
}

/// Patient-level image outputs: probability of High and regression score.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientImageScores {
    pub prob_high: HashMap<String, f64>,
    pub score: HashMap<String, f64>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn out(&self) -> &Path {
        &self.config.paths.out
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.out().join("cohort")
    }

    pub fn model_path(&self, name: &str) -> PathBuf {
        self.out().join("models").join(name)
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    fn write_json<S: Serialize>(&self, path: &Path, value: &S) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(value)?)
    }

    /// Synthetic cohort into `paths.cohort`.
    pub fn synth_gen(&self) -> Result<SynthOutput> {
        let cfg = SynthConfig {
            seed: self.config.synth.seed ^ self.seed(),
            ..self.config.synth.clone()
        };
        synthgen::generate(&cfg, &self.config.paths.cohort)
    }

    /// Validated cohort with absolute bundle paths in `out/cohort`.
    pub fn ingest(&self) -> Result<CohortManifest> {
        let dir = &self.config.paths.cohort;
        let mut cohort = corpus::ingest(&dir.join("clinical.csv"), &dir.join("manifest.csv"))?;
        let root = std::path::absolute(dir).map_err(|e| Error::io(dir, e))?;
        for e in &mut cohort.entries {
            if e.bundle_path.is_relative() {
                e.bundle_path = root.join(&e.bundle_path);
            }
        }
        cohort.root = self.cohort_dir();
        cohort.write(&self.cohort_dir())?;
        self.write_json(
            &self.cohort_dir().join("ingest.json"),
            &serde_json::json!({
                "patients": cohort.records.len(),
                "slides": cohort.entries.len(),
                "excluded_er_negative": cohort.excluded_er_negative,
                "provenance": self.config.echo(),
            }),
        )?;
        Ok(cohort)
    }

    fn read_cohort(&self) -> Result<CohortManifest> {
        let dir = self.cohort_dir();
        let c = dir.join("clinical.csv");
        if !c.exists() {
            return Err(Error::Data(format!("missing ingested cohort {}; run ingest first", c.display())));
        }
        corpus::ingest(&c, &dir.join("manifest.csv"))
    }

    pub fn partition(&self) -> Result<CohortManifest> {
        let cohort = corpus::partition(&self.read_cohort()?, self.config.partition, self.seed())?;
        cohort.write(&self.cohort_dir())?;
        let mut counts: HashMap<String, [usize; 2]> = HashMap::new();
        for p in [Partition::Train, Partition::Dev, Partition::Test, Partition::External] {
            for r in cohort.patients_in(p) {
                let slot = counts.entry(p.token().to_string()).or_default();
                slot[usize::from(r.risk() == Some(RiskCategory::High))] += 1;
            }
        }
        self.write_json(
            &self.cohort_dir().join("partition.json"),
            &serde_json::json!({ "low_high": counts, "provenance": self.config.echo() }),
        )?;
        Ok(cohort)
    }

    /// Ingested cohort that must already carry partitions.
    pub fn cohort(&self) -> Result<CohortManifest> {
        let c = self.read_cohort()?;
        if c.entries.iter().all(|e| e.partition.is_none()) {
            return Err(Error::Data("cohort is not partitioned; run partition first".into()));
        }
        Ok(c)
    }

    pub fn load_bundle(&self, bundle: &SlideBundle) -> Result<SlidePixels> {
        let s = &self.config.sampling;
        let seed = self.seed() ^ fnv1a(bundle.slide_id());
        let regions = sample_regions(bundle, s.regions_per_slide, s.region_side, seed, s.tissue)?;
        let patch = self.config.model.patchnet.patch_side as u32;
        Ok(SlidePixels {
            slide_id: bundle.slide_id().to_string(),
            regions: regions
                .into_iter()
                .map(|r| Ok(RegionPixels::from_grid(&patch_grid(bundle, r, patch)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn load_slides(&self, cohort: &CohortManifest, entries: &[&SlideEntry]) -> Result<Vec<SlidePixels>> {
        entries
            .par_iter()
            .map(|e| self.load_bundle(&SlideBundle::open(&cohort.bundle_dir(e))?))
            .collect()
    }

    fn load_model(&self, name: &str) -> Result<OncoModel<f64>> {
        let path = self.model_path(name);
        if !path.exists() {
            return Err(Error::Data(format!("missing checkpoint {}", path.display())));
        }
        OncoModel::from_checkpoint(&Checkpoint::load(&path)?, Some(&self.config.model))
    }

    fn save_model(&self, model: &OncoModel<f64>, name: &str) -> Result<()> {
        model.checkpoint(self.config.echo()).save(&self.model_path(name))
    }

    fn log(&self, stage: &str, report: &TrainReport, metrics: serde_json::Value) -> Result<()> {
        let log = StageLog {
            stage: stage.to_string(),
            version: VERSION.to_string(),
            losses: report.losses.clone(),
            stopped_at: report.stopped_at,
            metrics,
        };
        self.write_json(&self.model_path(&format!("{stage}_log.json")), &log)
    }

    /// Labelled slides of a partition (patients without a score skipped).
    pub fn labelled_slides(&self, cohort: &CohortManifest, part: Partition) -> Result<Vec<(SlidePixels, ClinicalRecord)>> {
        let entries: Vec<&SlideEntry> = cohort
            .slides_in(part)
            .into_iter()
            .filter(|e| cohort.record(&e.patient_id).is_some_and(|r| r.oncotype_score.is_some()))
            .collect();
        let slides = self.load_slides(cohort, &entries)?;
        Ok(slides
            .into_iter()
            .zip(&entries)
            .map(|(s, e)| (s, cohort.record(&e.patient_id).unwrap().clone()))
            .collect())
    }

    pub fn pretrain(&self) -> Result<OncoModel<f64>> {
        let cohort = self.cohort()?;
        let slides: Vec<SlidePixels> = self
            .load_slides(&cohort, &cohort.slides_in(Partition::Train))?;
        let mut model = OncoModel::new(self.config.model.clone(), self.seed())?;
        let st = &self.config.pretrain;
        let report = model.pretrain_masked(&slides, st.mask_fraction, &st.options(self.seed()))?;
        self.save_model(&model, "pretrain.odhn")?;
        self.log("pretrain", &report, serde_json::json!({ "slides": slides.len() }))?;
        Ok(model)
    }

    /// Starts from `pretrain.odhn` when present, else from a fresh model.
    pub fn train_regression(&self) -> Result<OncoModel<f64>> {
        let cohort = self.cohort()?;
        let mut model = match self.load_model("pretrain.odhn") {
            Ok(m) => m,
            Err(Error::Data(_)) => OncoModel::new(self.config.model.clone(), self.seed())?,
            Err(e) => return Err(e),
        };
        let train = self.labelled_slides(&cohort, Partition::Train)?;
        let pairs: Vec<(&SlidePixels, f64)> = train
            .iter()
            .map(|(s, r)| (s, r.oncotype_score.unwrap() as f64))
            .collect();
        let report = model.finetune_regression(&pairs, &self.config.regression.options(self.seed()), None)?;
        let dev = self.labelled_slides(&cohort, Partition::Dev)?;
        let r2 = if dev.len() >= 2 {
            let preds: Vec<f64> = dev
                .par_iter()
                .map(|(s, _)| model.predict(s).map(|p| p.score))
                .collect::<Result<_>>()?;
            let truth: Vec<f64> = dev.iter().map(|(_, r)| r.oncotype_score.unwrap() as f64).collect();
            Some(r_squared(&truth, &preds)?)
        } else {
            None
        };
        self.save_model(&model, "regression.odhn")?;
        self.log("regression", &report, serde_json::json!({ "dev_r_squared": r2 }))?;
        Ok(model)
    }

    /// Requires `regression.odhn`.
    pub fn train_classifier(&self) -> Result<OncoModel<f64>> {
        let cohort = self.cohort()?;
        let mut model = self.load_model("regression.odhn")?;
        self.classifier_phase(&cohort, &mut model, None)?;
        Ok(model)
    }

    pub fn classifier_phase(
        &self,
        cohort: &CohortManifest,
        model: &mut OncoModel<f64>,
        monitor: Option<&mut Monitor<'_, f64>>,
    ) -> Result<TrainReport> {
        let train = self.labelled_slides(cohort, Partition::Train)?;
        let pairs: Vec<(&SlidePixels, RiskCategory)> = train.iter().map(|(s, r)| (s, r.risk().unwrap())).collect();
        let report = model.finetune_classifier(&pairs, &self.config.classifier.options(self.seed()), monitor)?;
        self.save_model(model, "classifier.odhn")?;
        self.log("classifier", &report, serde_json::json!({ "slides": pairs.len() }))?;
        Ok(report)
    }

    pub fn train_clinical(&self) -> Result<ClinModel<f64>> {
        let cohort = self.cohort()?;
        let labelled = |p: Partition| -> Vec<(&ClinicalRecord, bool)> {
            cohort
                .patients_in(p)
                .into_iter()
                .filter_map(|r| r.risk().map(|c| (r, c.is_high())))
                .collect()
        };
        let model = ClinModel::fit(
            &labelled(Partition::Train),
            &labelled(Partition::Dev),
            &self.config.clinical.fit_options(self.seed()),
        )?;
        model.checkpoint(self.config.echo()).save(&self.model_path("clinical.odhn"))?;
        write_atomic(&self.model_path("feature_importance.csv"), model.importance_csv().as_bytes())?;
        Ok(model)
    }

    pub fn clinical_model(&self) -> Result<ClinModel<f64>> {
        let path = self.model_path("clinical.odhn");
        if !path.exists() {
            return Err(Error::Data(format!("missing checkpoint {}", path.display())));
        }
        ClinModel::from_checkpoint(&Checkpoint::load(&path)?)
    }

    pub fn classifier(&self) -> Result<OncoModel<f64>> {
        let m = self.load_model("classifier.odhn")?;
        if m.phase != Phase::Classifier {
            return Err(Error::Version("classifier.odhn does not hold a classifier-phase model".into()));
        }
        Ok(m)
    }

    /// Per-patient mean of slide outputs over a partition (any phase).
    pub fn image_scores(&self, model: &OncoModel<f64>, cohort: &CohortManifest, part: Partition) -> Result<PatientImageScores> {
        let slides = self.labelled_slides(cohort, part)?;
        let preds: Vec<SlidePrediction> = slides
            .par_iter()
            .map(|(s, _)| model.predict(s))
            .collect::<Result<_>>()?;
        let per = |f: fn(&SlidePrediction) -> f64| -> HashMap<String, f64> {
            let v: Vec<(String, f64)> = slides
                .iter()
                .zip(&preds)
                .map(|((_, r), p)| (r.patient_id.clone(), f(p)))
                .collect();
            aggregate_patient(&v).into_iter().collect()
        };
        Ok(PatientImageScores {
            prob_high: per(|p| p.prob_high),
            score: per(|p| p.score),
        })
    }

    /// Patients of a partition with both branch scores, in record order.
    fn aligned<'c>(
        &self,
        cohort: &'c CohortManifest,
        part: Partition,
        img: &PatientImageScores,
        clin: &ClinModel<f64>,
    ) -> Vec<(&'c ClinicalRecord, f64, f64)> {
        cohort
            .patients_in(part)
            .into_iter()
            .filter(|r| r.risk().is_some())
            .filter_map(|r| img.prob_high.get(&r.patient_id).map(|&p| (r, p, clin.predict_proba(r))))
            .collect()
    }

    pub fn fuse(&self) -> Result<FusionModel> {
        let cohort = self.cohort()?;
        let model = self.classifier()?;
        let clin = self.clinical_model()?;
        let img = self.image_scores(&model, &cohort, Partition::Dev)?;
        let rows = self.aligned(&cohort, Partition::Dev, &img, &clin);
        let a: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let y: Vec<bool> = rows.iter().map(|r| r.0.risk().unwrap().is_high()).collect();
        let fusion = fit_fusion(&a, &b, &y, self.config.fusion.grid_steps)?;
        self.write_json(&self.model_path("fusion.json"), &fusion)?;
        Ok(fusion)
    }

    fn fusion_model(&self) -> Result<FusionModel> {
        let path = self.model_path("fusion.json");
        if !path.exists() {
            return Err(Error::Data(format!("missing checkpoint {}", path.display())));
        }
        let f: FusionModel = serde_json::from_str(&crate::io::read_to_string(&path)?)?;
        f.validate()?;
        Ok(f)
    }

    /// Reports for the test partition and, when present, the external one.
    pub fn evaluate(&self) -> Result<Vec<EvaluationReport>> {
        let model = self.classifier()?;
        let clin = self.clinical_model()?;
        let fusion = self.fusion_model()?;
        let cohort = self.cohort()?;
        // scores for R² come from the regression phase when its checkpoint exists
        let regression = match self.load_model("regression.odhn") {
            Ok(m) => Some(m),
            Err(Error::Data(_)) => None,
            Err(e) => return Err(e),
        };
        let mut reports = Vec::new();
        for part in [Partition::Test, Partition::External] {
            if cohort.patients_in(part).is_empty() {
                continue;
            }
            let img = self.image_scores(&model, &cohort, part)?;
            let rows = self.aligned(&cohort, part, &img, &clin);
            let ids: Vec<String> = rows.iter().map(|r| r.0.patient_id.clone()).collect();
            let labels: Vec<RiskCategory> = rows.iter().map(|r| r.0.risk().unwrap()).collect();
            let mut fused = Vec::new();
            for r in &rows {
                fused.push(fusion.fuse_predict(r.1, r.2)?.0);
            }
            let cohort_of = |s: Vec<f64>| ScoredCohort::new(ids.clone(), s, labels.clone());
            let image = cohort_of(rows.iter().map(|r| r.1).collect())?;
            let clinical = cohort_of(rows.iter().map(|r| r.2).collect())?;
            let combined = cohort_of(fused)?;
            let settings = EvalSettings {
                seed: self.seed(),
                ..self.config.evaluation
            };
            let mut report = evaluate(
                part.token(),
                &[
                    ModelScores { name: "image", cohort: &image, threshold: Some(fusion.t_img) },
                    ModelScores { name: "clinical", cohort: &clinical, threshold: Some(fusion.t_clin) },
                    ModelScores { name: "combined", cohort: &combined, threshold: Some(fusion.t_star) },
                ],
                settings,
                self.config.echo(),
            )?;
            let scores = match &regression {
                Some(m) => self.image_scores(m, &cohort, part)?.score,
                None => img.score.clone(),
            };
            if rows.len() >= 2 {
                let truth: Vec<f64> = rows.iter().map(|r| r.0.oncotype_score.unwrap() as f64).collect();
                let pred: Vec<f64> = rows.iter().map(|r| scores[&r.0.patient_id]).collect();
                report.r_squared = Some(r_squared(&truth, &pred)?);
            }
            let dir = self.out().join("eval").join(part.token());
            write_report(&report, &dir)?;
            let mut csv = String::from("patient_id,label,image,clinical,combined,score\n");
            for (i, r) in rows.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    ids[i],
                    if labels[i].is_high() { "High" } else { "Low" },
                    r.1,
                    r.2,
                    combined.scores[i],
                    scores[&r.0.patient_id]
                ));
            }
            write_atomic(&dir.join("predictions.csv"), csv.as_bytes())?;
            reports.push(report);
        }
        if reports.is_empty() {
            return Err(Error::Data("no test or external patients to evaluate".into()));
        }
        Ok(reports)
    }

    pub fn predict(&self, bundle_dir: &Path) -> Result<SlidePrediction> {
        let model = self.classifier()?;
        let slide = self.load_bundle(&SlideBundle::open(bundle_dir)?)?;
        let pred = model.predict_slide(&slide)?;
        self.write_json(&self.out().join("predictions").join(format!("{}.json", pred.slide_id)), &pred)?;
        Ok(pred)
    }

    /// Attention overlay PNG; `out_png` defaults to `out/heatmaps/<slide>.png`.
    pub fn heatmap(&self, bundle_dir: &Path, out_png: Option<&Path>) -> Result<PathBuf> {
        let model = self.classifier()?;
        let bundle = SlideBundle::open(bundle_dir)?;
        let slide = self.load_bundle(&bundle)?;
        let pred = model.predict_slide(&slide)?;
        let img = heatmap::render(&bundle, &pred.attention, &self.config.heatmap)?;
        let path = out_png
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.out().join("heatmaps").join(format!("{}.png", bundle.slide_id())));
        write_atomic(&path, &crate::slidebundle::encode_png(&img)?)?;
        Ok(path)
    }
}

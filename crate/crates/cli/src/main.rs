use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oncorisk::corpus::Partition;
use oncorisk::pipeline::{Pipeline, PipelineConfig, VERSION};
use oncorisk::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "oncorisk", version = VERSION, about = "Recurrence-risk pipeline over slide bundles and clinical records")]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort into paths.cohort.
    SynthGen,
    /// Validate and ingest clinical.csv and manifest.csv.
    Ingest,
    /// Patient-level stratified train/dev/test split.
    Partition,
    /// Masked-feature pretraining of the region transformer.
    Pretrain,
    /// Regression fine-tuning on recurrence scores.
    TrainRegression,
    /// High/Low classifier fine-tuning from the regression checkpoint.
    TrainClassifier,
    /// Penalised logistic regression on clinical features.
    TrainClinical,
    /// Fusion weight and thresholds on the dev partition.
    Fuse,
    /// Reports, ROC curves and comparisons on test and external partitions.
    Evaluate,
    /// Score one slide.
    Predict {
        /// Bundle directory or slide id from the cohort manifest.
        #[arg(long)]
        slide: String,
    },
    /// Attention overlay PNG for one slide.
    Heatmap {
        /// Bundle directory or slide id from the cohort manifest.
        #[arg(long)]
        slide: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn bundle_dir(p: &Pipeline, slide: &str) -> Result<PathBuf> {
    let path = Path::new(slide);
    if path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let cohort = p.cohort()?;
    cohort
        .entries
        .iter()
        .find(|e| e.slide_id == slide)
        .map(|e| cohort.bundle_dir(e))
        .ok_or_else(|| Error::Data(format!("unknown slide {slide}")))
}

fn run(p: &Pipeline, command: Command) -> Result<Value> {
    Ok(match command {
        Command::SynthGen => {
            let s = p.synth_gen()?;
            let slides: usize = s.patients.iter().map(|x| x.slides.len()).sum();
            json!({ "patients": s.patients.len(), "slides": slides, "clinical": s.clinical_csv, "manifest": s.manifest })
        }
        Command::Ingest => {
            let c = p.ingest()?;
            json!({ "patients": c.records.len(), "slides": c.entries.len(), "excluded_er_negative": c.excluded_er_negative.len() })
        }
        Command::Partition => {
            let c = p.partition()?;
            let counts: serde_json::Map<String, Value> = [Partition::Train, Partition::Dev, Partition::Test, Partition::External]
                .into_iter()
                .map(|part| (part.token().to_string(), json!(c.patients_in(part).len())))
                .collect();
            Value::Object(counts)
        }
        Command::Pretrain => {
            p.pretrain()?;
            json!({ "checkpoint": p.model_path("pretrain.odhn") })
        }
        Command::TrainRegression => {
            p.train_regression()?;
            json!({ "checkpoint": p.model_path("regression.odhn") })
        }
        Command::TrainClassifier => {
            p.train_classifier()?;
            json!({ "checkpoint": p.model_path("classifier.odhn") })
        }
        Command::TrainClinical => {
            let m = p.train_clinical()?;
            json!({ "checkpoint": p.model_path("clinical.odhn"), "selected": m.selected })
        }
        Command::Fuse => serde_json::to_value(p.fuse()?)?,
        Command::Evaluate => {
            let reports = p.evaluate()?;
            let summary: Vec<Value> = reports
                .iter()
                .map(|r| {
                    let aucs: serde_json::Map<String, Value> =
                        r.models.iter().map(|m| (m.name.clone(), json!(m.auc))).collect();
                    json!({ "cohort": r.cohort, "auc": aucs, "r_squared": r.r_squared })
                })
                .collect();
            Value::Array(summary)
        }
        Command::Predict { slide } => {
            let pred = p.predict(&bundle_dir(p, &slide)?)?;
            json!({ "slide_id": pred.slide_id, "prob_high": pred.prob_high, "score": pred.score })
        }
        Command::Heatmap { slide, output } => {
            let path = p.heatmap(&bundle_dir(p, &slide)?, output.as_deref())?;
            json!({ "heatmap": path })
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let Some(config_path) = cli.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(2);
    };
    if !config_path.is_file() {
        eprintln!("error: config file {} not found", config_path.display());
        return ExitCode::from(2);
    }
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = PipelineConfig::load(&config_path).and_then(|mut cfg| {
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(out) = cli.out {
            cfg.paths.out = out;
        }
        run(&Pipeline::new(cfg)?, cli.command)
    });
    match result {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

//! Cohort data model: clinical records, slide manifest, risk labels and
//! patient-consistent stratified partitioning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Oncotype score cut-off: scores at or above it are high risk.
pub const HIGH_RISK_CUTOFF: i64 = 26;

pub const CLINICAL_HEADER: &str =
    "patient_id,age_years,tumor_size_mm,grade,histologic_subtype,er,pr,her2,oncotype_score";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskCategory {
    Low,
    High,
}

impl RiskCategory {
    pub fn is_high(self) -> bool {
        self == RiskCategory::High
    }
}

/// Low iff `score < 26`.
pub fn categorize(score: i64) -> Result<RiskCategory> {
    if !(0..=100).contains(&score) {
        return Err(Error::Domain(format!("oncotype score {score} outside 0..=100")));
    }
    Ok(if score < HIGH_RISK_CUTOFF {
        RiskCategory::Low
    } else {
        RiskCategory::High
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Histology {
    Idc,
    IdcIlc,
    Ilc,
    Other,
}

impl Histology {
    pub const ALL: [Histology; 4] = [Histology::Idc, Histology::IdcIlc, Histology::Ilc, Histology::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> &'static str {
        match self {
            Histology::Idc => "IDC",
            Histology::IdcIlc => "IDC_ILC",
            Histology::Ilc => "ILC",
            Histology::Other => "OTHER",
        }
    }
}

impl FromStr for Histology {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Histology::ALL
            .into_iter()
            .find(|h| h.token() == s)
            .ok_or_else(|| format!("unknown histologic subtype token {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReceptorStatus {
    Positive,
    Negative,
    Missing,
}

impl ReceptorStatus {
    pub fn token(self) -> &'static str {
        match self {
            ReceptorStatus::Positive => "pos",
            ReceptorStatus::Negative => "neg",
            ReceptorStatus::Missing => "missing",
        }
    }
}

impl FromStr for ReceptorStatus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pos" => Ok(ReceptorStatus::Positive),
            "neg" => Ok(ReceptorStatus::Negative),
            "missing" => Ok(ReceptorStatus::Missing),
            _ => Err(format!("unknown receptor token {s:?}")),
        }
    }
}

/// Receptor status after ingestion. A missing value is replaced by the
/// cohort-majority status and `imputed` remembers that it was missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receptor {
    pub status: ReceptorStatus,
    pub imputed: bool,
}

impl Receptor {
    pub fn known(status: ReceptorStatus) -> Self {
        Self {
            status,
            imputed: status == ReceptorStatus::Missing,
        }
    }

    pub fn positive(self) -> bool {
        self.status == ReceptorStatus::Positive
    }

    /// Token as originally recorded.
    fn source_token(self) -> &'static str {
        if self.imputed {
            ReceptorStatus::Missing.token()
        } else {
            self.status.token()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub patient_id: String,
    pub age_years: f64,
    pub tumor_size_mm: f64,
    pub grade: u8,
    pub histology: Histology,
    pub er: Receptor,
    pub pr: Receptor,
    pub her2: Receptor,
    pub oncotype_score: Option<u8>,
}

impl ClinicalRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(1..=3).contains(&self.grade) {
            return Err(format!("grade {} not in 1..=3", self.grade));
        }
        if !(self.age_years.is_finite() && self.age_years > 0.0) {
            return Err(format!("age {} must be positive", self.age_years));
        }
        if !(self.tumor_size_mm.is_finite() && self.tumor_size_mm > 0.0) {
            return Err(format!("tumor size {} must be positive", self.tumor_size_mm));
        }
        if let Some(s) = self.oncotype_score {
            if s > 100 {
                return Err(format!("oncotype score {s} outside 0..=100"));
            }
        }
        Ok(())
    }

    pub fn risk(&self) -> Option<RiskCategory> {
        self.oncotype_score
            .map(|s| categorize(s as i64).expect("validated score"))
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.patient_id,
            self.age_years,
            self.tumor_size_mm,
            self.grade,
            self.histology.token(),
            self.er.source_token(),
            self.pr.source_token(),
            self.her2.source_token(),
            self.oncotype_score.map(|s| s.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Dev,
    Test,
    External,
}

impl Partition {
    pub fn token(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Dev => "dev",
            Partition::Test => "test",
            Partition::External => "external",
        }
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Partition::Train),
            "dev" => Ok(Partition::Dev),
            "test" => Ok(Partition::Test),
            "external" => Ok(Partition::External),
            _ => Err(format!("unknown partition token {s:?}")),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub patient_id: String,
    /// As written in the manifest; relative paths resolve against
    /// [`CohortManifest::root`].
    pub bundle_path: PathBuf,
    pub partition: Option<Partition>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortManifest {
    pub root: PathBuf,
    pub records: Vec<ClinicalRecord>,
    pub entries: Vec<SlideEntry>,
    /// ER-negative patients dropped at ingestion.
    pub excluded_er_negative: Vec<String>,
}

impl CohortManifest {
    /// Checks unique ids, one known patient per slide and one partition
    /// per patient.
    pub fn validate(&self) -> Result<()> {
        let mut patients = BTreeSet::new();
        for r in &self.records {
            if !patients.insert(r.patient_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate patient_id {}", r.patient_id)));
            }
            r.validate()
                .map_err(|m| Error::Integrity(format!("patient {}: {m}", r.patient_id)))?;
        }
        let mut slides = BTreeSet::new();
        let mut tags: HashMap<&str, Option<Partition>> = HashMap::new();
        for e in &self.entries {
            if !slides.insert(e.slide_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate slide_id {}", e.slide_id)));
            }
            if !patients.contains(e.patient_id.as_str()) {
                return Err(Error::Integrity(format!(
                    "slide {} references unknown patient {}",
                    e.slide_id, e.patient_id
                )));
            }
            if let Some(prev) = tags.insert(&e.patient_id, e.partition) {
                if prev != e.partition {
                    return Err(Error::Integrity(format!(
                        "patient {} has slides in more than one partition",
                        e.patient_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn record(&self, patient_id: &str) -> Option<&ClinicalRecord> {
        self.records.iter().find(|r| r.patient_id == patient_id)
    }

    pub fn bundle_dir(&self, entry: &SlideEntry) -> PathBuf {
        if entry.bundle_path.is_absolute() {
            entry.bundle_path.clone()
        } else {
            self.root.join(&entry.bundle_path)
        }
    }

    pub fn patient_partition(&self, patient_id: &str) -> Option<Partition> {
        self.entries
            .iter()
            .find(|e| e.patient_id == patient_id)
            .and_then(|e| e.partition)
    }

    /// Patients (in record order) whose slides carry `partition`.
    pub fn patients_in(&self, partition: Partition) -> Vec<&ClinicalRecord> {
        let ids: BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| e.partition == Some(partition))
            .map(|e| e.patient_id.as_str())
            .collect();
        self.records
            .iter()
            .filter(|r| ids.contains(r.patient_id.as_str()))
            .collect()
    }

    pub fn slides_in(&self, partition: Partition) -> Vec<&SlideEntry> {
        self.entries
            .iter()
            .filter(|e| e.partition == Some(partition))
            .collect()
    }

    pub fn to_clinical_csv(&self) -> String {
        let mut s = String::from(CLINICAL_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_csv_row());
            s.push('\n');
        }
        s
    }

    pub fn to_manifest_text(&self) -> String {
        let mut s = String::from("slide_id,patient_id,bundle_path,partition\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{}",
                e.slide_id,
                e.patient_id,
                e.bundle_path.display()
            ));
            if let Some(p) = e.partition {
                s.push(',');
                s.push_str(p.token());
            }
            s.push('\n');
        }
        s
    }

    /// Writes `clinical.csv` and `manifest.csv` into `dir` atomically.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let c = dir.join("clinical.csv");
        let m = dir.join("manifest.csv");
        crate::io::write_atomic(&c, self.to_clinical_csv().as_bytes())?;
        crate::io::write_atomic(&m, self.to_manifest_text().as_bytes())?;
        Ok((c, m))
    }
}

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_clinical(text: &str, source: &str) -> Result<Vec<ClinicalRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CLINICAL_HEADER => {}
        Some((_, h)) => {
            return Err(parse_err(
                source,
                1,
                format!("header {h:?} does not match {CLINICAL_HEADER:?}"),
            ))
        }
        None => return Err(parse_err(source, 1, "missing header")),
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(parse_err(source, line_no, format!("expected 9 fields, found {}", f.len())));
        }
        let err = |m: String| parse_err(source, line_no, m);
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| err(format!("{what} {s:?} is not a number")))
        };
        let grade: u8 = f[3]
            .trim()
            .parse()
            .map_err(|_| err(format!("grade {:?} is not an integer", f[3])))?;
        let receptor = |s: &str| -> Result<Receptor> {
            Ok(Receptor::known(s.trim().parse::<ReceptorStatus>().map_err(err)?))
        };
        let score = match f[8].trim() {
            "" => None,
            s => {
                let v: i64 = s.parse().map_err(|_| err(format!("oncotype score {s:?} is not an integer")))?;
                categorize(v).map_err(|e| err(e.to_string()))?;
                Some(v as u8)
            }
        };
        let rec = ClinicalRecord {
            patient_id: f[0].trim().to_string(),
            age_years: num(f[1], "age")?,
            tumor_size_mm: num(f[2], "tumor size")?,
            grade,
            histology: f[4].trim().parse().map_err(err)?,
            er: receptor(f[5])?,
            pr: receptor(f[6])?,
            her2: receptor(f[7])?,
            oncotype_score: score,
        };
        if rec.patient_id.is_empty() {
            return Err(err("empty patient_id".into()));
        }
        rec.validate().map_err(err)?;
        out.push(rec);
    }
    Ok(out)
}

fn parse_manifest(text: &str, source: &str) -> Result<Vec<SlideEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() || (i == 0 && line.starts_with("slide_id,")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(3..=4).contains(&f.len()) || f[..3].iter().any(|s| s.is_empty()) {
            return Err(parse_err(source, i + 1, "expected slide_id,patient_id,bundle_path[,partition]"));
        }
        let partition = match f.get(3) {
            Some(p) if !p.is_empty() => Some(p.parse().map_err(|m| parse_err(source, i + 1, m))?),
            _ => None,
        };
        out.push(SlideEntry {
            slide_id: f[0].to_string(),
            patient_id: f[1].to_string(),
            bundle_path: PathBuf::from(f[2]),
            partition,
        });
    }
    Ok(out)
}

fn majority(records: &[ClinicalRecord], field: impl Fn(&ClinicalRecord) -> Receptor) -> ReceptorStatus {
    let (mut pos, mut neg) = (0usize, 0usize);
    for r in records {
        match field(r).status {
            ReceptorStatus::Positive => pos += 1,
            ReceptorStatus::Negative => neg += 1,
            ReceptorStatus::Missing => {}
        }
    }
    if pos > neg {
        ReceptorStatus::Positive
    } else {
        ReceptorStatus::Negative
    }
}

/// Builds a validated cohort from clinical CSV text and manifest text.
/// ER-negative patients and their slides are dropped; missing PR/HER2 (and
/// ER) values are imputed to the majority status of the retained cohort.
pub fn ingest_str(clinical: &str, manifest: &str, root: &Path) -> Result<CohortManifest> {
    let mut records = parse_clinical(clinical, "clinical csv")?;
    let entries = parse_manifest(manifest, "manifest")?;

    let mut excluded = Vec::new();
    records.retain(|r| {
        let keep = r.er.status != ReceptorStatus::Negative;
        if !keep {
            excluded.push(r.patient_id.clone());
        }
        keep
    });
    if records.is_empty() {
        return Err(Error::Data("empty cohort".into()));
    }
    let pr_major = majority(&records, |r| r.pr);
    let her2_major = majority(&records, |r| r.her2);
    for r in &mut records {
        for (field, major) in [
            (&mut r.er, ReceptorStatus::Positive),
            (&mut r.pr, pr_major),
            (&mut r.her2, her2_major),
        ] {
            if field.status == ReceptorStatus::Missing {
                *field = Receptor {
                    status: major,
                    imputed: true,
                };
            }
        }
    }

    let dropped: BTreeSet<&str> = excluded.iter().map(String::as_str).collect();
    let entries = entries
        .into_iter()
        .filter(|e| !dropped.contains(e.patient_id.as_str()))
        .collect();
    let cohort = CohortManifest {
        root: root.to_path_buf(),
        records,
        entries,
        excluded_er_negative: excluded,
    };
    cohort.validate()?;
    Ok(cohort)
}

pub fn ingest(clinical_csv: &Path, manifest: &Path) -> Result<CohortManifest> {
    let c = crate::io::read_to_string(clinical_csv)?;
    let m = crate::io::read_to_string(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
    ingest_str(&c, &m, &root).map_err(|e| match e {
        Error::Parse { line, message, source_name } => Error::Parse {
            source_name: if source_name == "manifest" {
                manifest.display().to_string()
            } else {
                clinical_csv.display().to_string()
            },
            line,
            message,
        },
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            dev: 0.10,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.dev, self.test]
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`; ties go to
/// the earlier bucket.
pub fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        if (fa - fb).abs() < 1e-9 {
            a.cmp(&b)
        } else {
            fb.partial_cmp(&fa).unwrap()
        }
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Assigns every labelled internal patient to train/dev/test, stratified by
/// risk category. Patients already tagged `External` keep their tag.
pub fn partition(manifest: &CohortManifest, ratios: SplitRatios, seed: u64) -> Result<CohortManifest> {
    let r = ratios.as_array();
    if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {r:?} must be in [0,1] and sum to 1")));
    }
    let external: BTreeSet<&str> = manifest
        .entries
        .iter()
        .filter(|e| e.partition == Some(Partition::External))
        .map(|e| e.patient_id.as_str())
        .collect();

    let mut strata: BTreeMap<RiskCategory, Vec<&str>> = BTreeMap::new();
    for rec in &manifest.records {
        if external.contains(rec.patient_id.as_str()) {
            continue;
        }
        let cat = rec.risk().ok_or_else(|| {
            Error::Domain(format!("patient {} has no oncotype score", rec.patient_id))
        })?;
        strata.entry(cat).or_default().push(&rec.patient_id);
    }

    let mut assignment: HashMap<&str, Partition> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (cat, mut ids) in strata {
        if ids.len() < 3 {
            return Err(Error::Data(format!(
                "cannot stratify: {cat:?} has {} patients",
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let counts = apportion(ids.len(), &r);
        let tags = [Partition::Train, Partition::Dev, Partition::Test];
        let mut it = ids.into_iter();
        for (tag, count) in tags.into_iter().zip(counts) {
            for id in it.by_ref().take(count) {
                assignment.insert(id, tag);
            }
        }
    }

    let mut out = manifest.clone();
    for e in &mut out.entries {
        if let Some(&p) = assignment.get(e.patient_id.as_str()) {
            e.partition = Some(p);
        }
    }
    out.validate()?;
    Ok(out)
}

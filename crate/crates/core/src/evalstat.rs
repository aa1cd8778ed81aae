//! Evaluation statistics: per-patient aggregation, ROC/AUC, bootstrap
//! confidence intervals, R², Mann-Whitney U model comparison with
//! Bonferroni correction, and report artifacts.
//!
//! Low-level functions take parallel `scores` / `is_high` slices; AUC ties
//! count one half, so `auc` is the normalised Mann-Whitney U statistic.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::RiskCategory;
use crate::error::{Error, Result};
use crate::num::Scalar;

/// Arithmetic mean score per patient, in order of first appearance.
pub fn aggregate_patient<T: Scalar>(slide_scores: &[(String, T)]) -> Vec<(String, T)> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<&str, (T, usize)> = HashMap::new();
    for (pid, s) in slide_scores {
        let e = acc.entry(pid.as_str()).or_insert_with(|| {
            order.push(pid.clone());
            (T::zero(), 0)
        });
        e.0 += *s;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|pid| {
            let (sum, n) = acc[pid.as_str()];
            let mean = sum / T::from_usize(n).unwrap();
            (pid, mean)
        })
        .collect()
}

/// Per-patient scores with risk labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCohort<T> {
    pub patient_ids: Vec<String>,
    pub scores: Vec<T>,
    pub labels: Vec<RiskCategory>,
}

impl<T: Scalar> ScoredCohort<T> {
    pub fn new(patient_ids: Vec<String>, scores: Vec<T>, labels: Vec<RiskCategory>) -> Result<Self> {
        if patient_ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::Integrity(format!(
                "cohort lists differ in length: {} ids, {} scores, {} labels",
                patient_ids.len(),
                scores.len(),
                labels.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for p in &patient_ids {
            if !seen.insert(p.as_str()) {
                return Err(Error::Integrity(format!("duplicate patient_id {p}")));
            }
        }
        Ok(Self {
            patient_ids,
            scores,
            labels,
        })
    }

    pub fn is_high(&self) -> Vec<bool> {
        self.labels.iter().map(|l| l.is_high()).collect()
    }

    pub fn auc(&self) -> Result<T> {
        auc(&self.scores, &self.is_high())
    }

    pub fn roc_curve(&self) -> Result<Vec<RocPoint<T>>> {
        roc_curve(&self.scores, &self.is_high())
    }

    pub fn bootstrap_ci(&self, iterations: usize, level: f64, seed: u64) -> Result<BootstrapCi<T>> {
        bootstrap_ci(&self.scores, &self.is_high(), iterations, level, seed)
    }
}

fn class_counts(scores_len: usize, is_high: &[bool]) -> Result<(usize, usize)> {
    if scores_len != is_high.len() {
        return Err(Error::Integrity(format!(
            "{scores_len} scores vs {} labels",
            is_high.len()
        )));
    }
    let pos = is_high.iter().filter(|&&h| h).count();
    let neg = is_high.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("undefined AUC: both classes are required".into()));
    }
    Ok((pos, neg))
}

/// Ascending order of indices by score (NaN-free input assumed).
fn argsort<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    idx
}

/// 1-based mid-ranks (ties share the average rank).
pub fn midranks<T: Scalar>(values: &[T]) -> Vec<T> {
    let idx = argsort(values);
    let mut ranks = vec![T::zero(); values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // positions i..=j share rank (i+1 + j+1)/2
        let r = T::from_usize(i + j + 2).unwrap() / T::of(2.0);
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random high-risk score outranks a random low-risk
/// one, ties counted one half. O(n log n) via mid-ranks.
pub fn auc<T: Scalar>(scores: &[T], is_high: &[bool]) -> Result<T> {
    let (pos, neg) = class_counts(scores.len(), is_high)?;
    let ranks = midranks(scores);
    let mut rank_sum = T::zero();
    for (r, &h) in ranks.iter().zip(is_high) {
        if h {
            rank_sum += *r;
        }
    }
    let p = T::from_usize(pos).unwrap();
    let u = rank_sum - p * (p + T::one()) / T::of(2.0);
    Ok(u / (p * T::from_usize(neg).unwrap()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint<T> {
    pub fpr: T,
    pub tpr: T,
    /// Scores `>=` threshold are called high risk; `None` for the origin.
    pub threshold: Option<T>,
}

/// ROC points from the origin through every distinct score (descending).
pub fn roc_curve<T: Scalar>(scores: &[T], is_high: &[bool]) -> Result<Vec<RocPoint<T>>> {
    let (pos, neg) = class_counts(scores.len(), is_high)?;
    let mut idx = argsort(scores);
    idx.reverse();
    let (pf, nf) = (T::from_usize(pos).unwrap(), T::from_usize(neg).unwrap());
    let mut pts = vec![RocPoint {
        fpr: T::zero(),
        tpr: T::zero(),
        threshold: None,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if is_high[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(RocPoint {
            fpr: T::from_usize(fp).unwrap() / nf,
            tpr: T::from_usize(tp).unwrap() / pf,
            threshold: Some(t),
        });
    }
    Ok(pts)
}

pub fn trapezoid_area<T: Scalar>(points: &[RocPoint<T>]) -> T {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / T::of(2.0))
        .sum()
}

/// Threshold maximising Youden's J = tpr - fpr over the distinct scores;
/// ties keep the larger threshold. Returns `(threshold, J)`.
pub fn youden_threshold<T: Scalar>(scores: &[T], is_high: &[bool]) -> Result<(T, T)> {
    let roc = roc_curve(scores, is_high)?;
    let mut best: Option<(T, T)> = None;
    for p in roc.iter().skip(1) {
        let j = p.tpr - p.fpr;
        if best.is_none_or(|(_, bj)| j > bj) {
            best = Some((p.threshold.unwrap(), j));
        }
    }
    Ok(best.expect("at least one distinct score"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Counts with the rule "high risk iff score >= threshold".
pub fn confusion<T: Scalar>(scores: &[T], is_high: &[bool], threshold: T) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &h) in scores.iter().zip(is_high) {
        match (s >= threshold, h) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapCi<T> {
    pub lo: T,
    pub hi: T,
    pub point: T,
    /// Replicate AUCs in replicate order.
    pub replicates: Vec<T>,
}

/// Retries allowed per replicate when a resample contains one class only.
pub const MAX_REDRAWS: usize = 100;

/// Linear-interpolated empirical quantile of sorted data.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], q: f64) -> T {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::of(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile bootstrap CI of the AUC. Replicate `i` resamples patients
/// with replacement from a generator seeded with `seed + i`, so results do
/// not depend on thread scheduling.
pub fn bootstrap_ci<T: Scalar>(
    scores: &[T],
    is_high: &[bool],
    iterations: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi<T>> {
    if !(0.0 < level && level < 1.0) || iterations == 0 {
        return Err(Error::Config(format!(
            "bootstrap needs iterations > 0 and level in (0,1), got {iterations}, {level}"
        )));
    }
    let point = auc(scores, is_high)?;
    let n = scores.len();
    let replicates: Vec<T> = (0..iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut s = vec![T::zero(); n];
            let mut l = vec![false; n];
            for _ in 0..=MAX_REDRAWS {
                for k in 0..n {
                    let j = rng.random_range(0..n);
                    s[k] = scores[j];
                    l[k] = is_high[j];
                }
                if l.iter().any(|&h| h) && l.iter().any(|&h| !h) {
                    return auc(&s, &l);
                }
            }
            Err(Error::Data("degenerate cohort: bootstrap resamples keep collapsing to one class".into()))
        })
        .collect::<Result<_>>()?;
    let mut sorted = replicates.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        lo: quantile_sorted(&sorted, alpha),
        hi: quantile_sorted(&sorted, 1.0 - alpha),
        point,
        replicates,
    })
}

/// Coefficient of determination; 0 when the targets have no variance.
pub fn r_squared<T: Scalar>(targets: &[T], predictions: &[T]) -> Result<T> {
    if targets.len() != predictions.len() {
        return Err(Error::Integrity(format!(
            "{} targets vs {} predictions",
            targets.len(),
            predictions.len()
        )));
    }
    if targets.len() < 2 {
        return Err(Error::Data("R² needs at least two values".into()));
    }
    let mean = crate::num::mean(targets);
    let ss_tot: T = targets.iter().map(|&t| (t - mean) * (t - mean)).sum();
    if ss_tot == T::zero() {
        return Ok(T::zero());
    }
    let ss_res: T = targets
        .iter()
        .zip(predictions)
        .map(|(&t, &p)| (t - p) * (t - p))
        .sum();
    Ok(T::one() - ss_res / ss_tot)
}

/// `min(1, p * m)`.
pub fn bonferroni<T: Scalar>(p: T, comparisons: usize) -> T {
    (p * T::from_usize(comparisons).unwrap()).min(T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PValueMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney<T> {
    /// U statistic of the first sample.
    pub u: T,
    pub p_raw: T,
    pub p_adjusted: T,
    pub method: PValueMethod,
}

/// Largest pooled size for which the p-value is enumerated exactly.
pub const EXACT_MAX_POOLED: usize = 12;

/// U of `a` computed from pooled mid-ranks.
pub fn mann_whitney_u<T: Scalar>(a: &[T], b: &[T]) -> T {
    let pooled: Vec<T> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let ra: T = ranks[..a.len()].iter().copied().sum();
    let n = T::from_usize(a.len()).unwrap();
    ra - n * (n + T::one()) / T::of(2.0)
}

/// Two-sided exact p-value by enumerating every assignment of the pooled
/// (mid-ranked) observations to a sample of size `a.len()`.
pub fn mann_whitney_exact<T: Scalar>(a: &[T], b: &[T]) -> Result<(T, Ratio<u64>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("Mann-Whitney U needs two nonempty samples".into()));
    }
    let (n, m) = (a.len(), b.len());
    if n + m > 20 {
        return Err(Error::Config(format!("exact enumeration limited to 20 pooled values, got {}", n + m)));
    }
    let pooled: Vec<T> = a.iter().chain(b).copied().collect();
    // doubled mid-ranks are integers
    let twice: Vec<i64> = midranks(&pooled)
        .into_iter()
        .map(|r| (r * T::of(2.0)).round().to_i64().unwrap())
        .collect();
    // 2U = 2*R_a - n(n+1); distance from the null mean nm/2, doubled
    let offset = (n * (n + 1)) as i64;
    let centre = (n * m) as i64;
    let dist = |rank_sum2: i64| (2 * (rank_sum2 - offset) - 2 * centre).abs();
    let observed = dist(twice[..n].iter().sum());
    let (mut extreme, mut total) = (0u64, 0u64);
    let big_n = n + m;
    let mut mask: u32 = (1u32 << n) - 1;
    let limit = 1u32 << big_n;
    while mask < limit {
        let s: i64 = (0..big_n).filter(|&i| mask >> i & 1 == 1).map(|i| twice[i]).sum();
        if dist(s) >= observed {
            extreme += 1;
        }
        total += 1;
        // next subset with the same popcount (Gosper's hack)
        let c = mask & mask.wrapping_neg();
        let r = mask + c;
        mask = (((r ^ mask) >> 2) / c) | r;
    }
    Ok((mann_whitney_u(a, b), Ratio::new(extreme, total)))
}

/// Two-sided normal approximation with tie-corrected variance and
/// continuity correction.
pub fn mann_whitney_normal<T: Scalar>(a: &[T], b: &[T]) -> Result<(T, T)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("Mann-Whitney U needs two nonempty samples".into()));
    }
    let u = mann_whitney_u(a, b);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let big_n = n + m;
    let mut pooled: Vec<T> = a.iter().chain(b).copied().collect();
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1] == pooled[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * m / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    let dev = (u.as_f64() - n * m / 2.0).abs();
    if var <= 0.0 {
        return Ok((u, T::one()));
    }
    let z = ((dev - 0.5).max(0.0)) / var.sqrt();
    let std_normal = Normal::standard();
    let p = (2.0 * std_normal.sf(z)).min(1.0);
    Ok((u, T::of(p)))
}

/// Compares two vectors of AUC replicates (or any samples). Exact p when
/// the pooled size is at most [`EXACT_MAX_POOLED`], normal approximation
/// otherwise; Bonferroni-adjusted for `comparisons` tests.
pub fn compare_models<T: Scalar>(a: &[T], b: &[T], comparisons: usize) -> Result<MannWhitney<T>> {
    let (u, p, method) = if a.len() + b.len() <= EXACT_MAX_POOLED {
        let (u, r) = mann_whitney_exact(a, b)?;
        (u, T::of(*r.numer() as f64 / *r.denom() as f64), PValueMethod::Exact)
    } else {
        let (u, p) = mann_whitney_normal(a, b)?;
        (u, p, PValueMethod::NormalApprox)
    };
    Ok(MannWhitney {
        u,
        p_raw: p,
        p_adjusted: bonferroni(p, comparisons),
        method,
    })
}

// ---- reports -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub name: String,
    pub n_patients: usize,
    pub auc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub roc: Vec<RocPoint<f64>>,
    pub threshold: Option<f64>,
    pub confusion: Option<Confusion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub a: String,
    pub b: String,
    pub u: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub method: PValueMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub producer: String,
    pub cohort: String,
    pub models: Vec<ModelEvaluation>,
    pub comparisons: Vec<ModelComparison>,
    pub r_squared: Option<f64>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub bootstrap_iterations: usize,
    pub level: f64,
    pub m_comparisons: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            bootstrap_iterations: 10_000,
            level: 0.95,
            m_comparisons: 3,
            seed: 0,
        }
    }
}

/// Scores of one model on one cohort plus its operating threshold.
pub struct ModelScores<'a, T> {
    pub name: &'a str,
    pub cohort: &'a ScoredCohort<T>,
    pub threshold: Option<T>,
}

/// Evaluates each model and compares every pair on bootstrap replicates.
pub fn evaluate<T: Scalar>(
    cohort_name: &str,
    models: &[ModelScores<'_, T>],
    settings: EvalSettings,
    config: serde_json::Value,
) -> Result<EvaluationReport> {
    let mut evals = Vec::new();
    let mut reps = Vec::new();
    for m in models {
        let ci = m
            .cohort
            .bootstrap_ci(settings.bootstrap_iterations, settings.level, settings.seed)?;
        let is_high = m.cohort.is_high();
        evals.push(ModelEvaluation {
            name: m.name.to_string(),
            n_patients: m.cohort.scores.len(),
            auc: ci.point.as_f64(),
            ci_lo: ci.lo.as_f64(),
            ci_hi: ci.hi.as_f64(),
            roc: m
                .cohort
                .roc_curve()?
                .into_iter()
                .map(|p| RocPoint {
                    fpr: p.fpr.as_f64(),
                    tpr: p.tpr.as_f64(),
                    threshold: p.threshold.map(Scalar::as_f64),
                })
                .collect(),
            threshold: m.threshold.map(Scalar::as_f64),
            confusion: m.threshold.map(|t| confusion(&m.cohort.scores, &is_high, t)),
        });
        reps.push(ci.replicates);
    }
    let mut comparisons = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let mw = compare_models(&reps[i], &reps[j], settings.m_comparisons)?;
            comparisons.push(ModelComparison {
                a: models[i].name.to_string(),
                b: models[j].name.to_string(),
                u: mw.u.as_f64(),
                p_raw: mw.p_raw.as_f64(),
                p_adjusted: mw.p_adjusted.as_f64(),
                method: mw.method,
            });
        }
    }
    Ok(EvaluationReport {
        producer: crate::diffcore::checkpoint::producer(),
        cohort: cohort_name.to_string(),
        models: evals,
        comparisons,
        r_squared: None,
        config,
    })
}

pub fn roc_csv(points: &[RocPoint<f64>]) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in points {
        let t = p.threshold.map_or("inf".to_string(), |t| t.to_string());
        let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, t);
    }
    s
}

const SVG_COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// ROC plot: unit axes, one polyline per model, legend with AUCs.
pub fn roc_svg(report: &EvaluationReport) -> String {
    let (size, margin) = (400.0, 50.0);
    let x = |f: f64| margin + f * size;
    let y = |t: f64| margin + (1.0 - t) * size;
    let mut s = String::new();
    let total = size + 2.0 * margin;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{total}" height="{total}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{margin}" y="{margin}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{v}</text>"#,
            x(v),
            y(0.0) + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v}</text>"#,
            x(0.0) - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">False positive rate</text>"#,
        x(0.5),
        total - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {})">True positive rate</text>"#,
        y(0.5),
        y(0.5)
    );
    for (k, m) in report.models.iter().enumerate() {
        let color = SVG_COLORS[k % SVG_COLORS.len()];
        let pts: Vec<String> = m
            .roc
            .iter()
            .map(|p| format!("{:.3},{:.3}", x(p.fpr), y(p.tpr)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = y(0.0) - 20.0 - 18.0 * (report.models.len() - 1 - k) as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            x(0.45),
            x(0.52)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12">{} (AUC {:.3})</text>"#,
            x(0.54),
            ly + 4.0,
            m.name,
            m.auc
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.json`, one `roc_<model>.csv` per model and `roc.svg`.
pub fn write_report(report: &EvaluationReport, dir: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(report)?;
    crate::io::write_atomic(&dir.join("report.json"), &json)?;
    for m in &report.models {
        let name = m.name.replace(|c: char| !c.is_ascii_alphanumeric(), "_");
        crate::io::write_atomic(&dir.join(format!("roc_{name}.csv")), roc_csv(&m.roc).as_bytes())?;
    }
    crate::io::write_atomic(&dir.join("roc.svg"), roc_svg(report).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(scores: &[f64], is_high: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if is_high[i] && !is_high[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn aggregate_means_per_patient() {
        let v = vec![
            ("a".to_string(), 0.2f64),
            ("b".to_string(), 0.1),
            ("a".to_string(), 0.4),
            ("b".to_string(), 0.2),
            ("c".to_string(), 0.9),
            ("b".to_string(), 0.6),
        ];
        let out = aggregate_patient(&v);
        assert_eq!(out[0].0, "a");
        assert!((out[0].1 - 0.3).abs() < 1e-15);
        assert!((out[1].1 - 0.3).abs() < 1e-15);
        assert_eq!(out[2], ("c".to_string(), 0.9));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        let s = [0.1, 0.4, 0.5, 0.3];
        let l = [false, true, false, true];
        assert_eq!(auc(&s, &l).unwrap(), 0.5);
        assert_eq!(brute_auc(&s, &l), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).unwrap_err().to_string().contains("undefined AUC"));
    }

    #[test]
    fn roc_examples() {
        let sep = roc_curve(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert!(sep.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        let ties = roc_curve(&[0.3; 4], &[false, true, false, true]).unwrap();
        assert_eq!(ties.len(), 2);
        assert_eq!(trapezoid_area(&ties), 0.5);
        let last = ties.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn r_squared_examples() {
        assert_eq!(r_squared(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap(), 1.0);
        let m: f64 = 7.0 / 3.0;
        assert!(r_squared(&[1.0, 2.0, 4.0], &[m, m, m]).unwrap().abs() < 1e-15);
        assert_eq!(r_squared(&[0.0, 1.0, 2.0], &[0.0, 0.0, 2.0]).unwrap(), 0.5);
        assert_eq!(r_squared(&[3.0, 3.0], &[1.0, 5.0]).unwrap(), 0.0);
        assert!(matches!(r_squared(&[1.0, 2.0], &[1.0]), Err(Error::Integrity(_))));
    }

    #[test]
    fn mann_whitney_small_exact_case() {
        let (u, p) = mann_whitney_exact(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(u, 0.0);
        assert_eq!(p, Ratio::new(1, 3));
        let mw = compare_models(&[1.0, 2.0], &[3.0, 4.0], 3).unwrap();
        assert_eq!(mw.p_raw, 1.0 / 3.0);
        assert_eq!(mw.p_adjusted, 1.0);
        assert_eq!(mw.method, PValueMethod::Exact);
    }

    #[test]
    fn identical_samples_give_centre_u_and_unit_p() {
        let a = [0.3, 0.5, 0.9];
        let mw = compare_models(&a, &a, 1).unwrap();
        assert_eq!(mw.u, 4.5);
        assert_eq!(mw.p_raw, 1.0);
        let big: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let mw = compare_models(&big, &big, 3).unwrap();
        assert_eq!(mw.u, 450.0);
        assert_eq!(mw.p_raw, 1.0);
        assert_eq!(mw.method, PValueMethod::NormalApprox);
    }

    #[test]
    fn bonferroni_caps_at_one() {
        assert_eq!(bonferroni(0.4f64, 3), 1.0);
        assert!((bonferroni(0.01f64, 3) - 0.03).abs() < 1e-15);
        assert!(compare_models::<f64>(&[], &[1.0], 1).is_err());
    }

    #[test]
    fn perfectly_separated_bootstrap_is_degenerate_at_one() {
        let s = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
        let l = [false, false, false, true, true, true];
        let ci = bootstrap_ci(&s, &l, 500, 0.95, 3).unwrap();
        assert_eq!((ci.lo, ci.hi, ci.point), (1.0, 1.0, 1.0));
        let again = bootstrap_ci(&s, &l, 500, 0.95, 3).unwrap();
        assert_eq!(ci, again);
    }

    #[test]
    fn youden_and_confusion() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        let (t, j) = youden_threshold(&s, &l).unwrap();
        assert_eq!(t, 0.8);
        assert_eq!(j, 0.5);
        let c = confusion(&s, &l, 0.35);
        assert_eq!(c, Confusion { tp: 2, fp: 1, tn: 1, fn_: 0 });
    }

    #[test]
    fn single_precision_auc() {
        let v: f32 = auc(&[0.1f32, 0.4, 0.5, 0.3], &[false, true, false, true]).unwrap();
        assert_eq!(v, 0.5);
    }
}

//! Penalised logistic regression on clinicopathologic features, with grid
//! search over penalty strength and type scored by k-fold CV AUC.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ClinicalRecord;
use crate::diffcore::{sigmoid, Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::evalstat::auc;
use crate::num::Scalar;

pub const PREFIX: &str = "clinreg.";
pub const N_FEATURES: usize = 11;
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "age_z",
    "size_z",
    "grade",
    "histology_idc",
    "histology_idc_ilc",
    "histology_ilc",
    "histology_other",
    "pr_pos",
    "her2_pos",
    "pr_missing",
    "her2_missing",
];
pub const GRADE_INDEX: usize = 2;

/// Training-set mean and standard deviation of age and tumour size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub age_mean: f64,
    pub age_std: f64,
    pub size_mean: f64,
    pub size_std: f64,
}

impl Standardizer {
    pub fn fit(records: &[&ClinicalRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("standardizer needs at least one record".into()));
        }
        let stats = |f: &dyn Fn(&ClinicalRecord) -> f64| {
            let n = records.len() as f64;
            let mean = records.iter().map(|r| f(r)).sum::<f64>() / n;
            let var = records.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        };
        let (age_mean, age_std) = stats(&|r| r.age_years);
        let (size_mean, size_std) = stats(&|r| r.tumor_size_mm);
        Ok(Self {
            age_mean,
            age_std,
            size_mean,
            size_std,
        })
    }

    fn to_array(self) -> [f64; 4] {
        [self.age_mean, self.age_std, self.size_mean, self.size_std]
    }

    fn from_slice(v: &[f64]) -> Self {
        Self {
            age_mean: v[0],
            age_std: v[1],
            size_mean: v[2],
            size_std: v[3],
        }
    }
}

/// Fixed 11-slot layout; ER is not encoded since the cohort is ER-positive.
pub fn encode_record<T: Scalar>(r: &ClinicalRecord, s: &Standardizer) -> [T; N_FEATURES] {
    let b = |v: bool| if v { T::one() } else { T::zero() };
    let mut x = [T::zero(); N_FEATURES];
    x[0] = T::of((r.age_years - s.age_mean) / s.age_std);
    x[1] = T::of((r.tumor_size_mm - s.size_mean) / s.size_std);
    x[2] = T::of(r.grade as f64);
    x[3 + r.histology.index()] = T::one();
    x[7] = b(r.pr.positive());
    x[8] = b(r.her2.positive());
    x[9] = b(r.pr.imputed);
    x[10] = b(r.her2.imputed);
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Penalty {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub strength: f64,
    pub penalty: Penalty,
}

pub fn default_grid() -> Vec<GridPoint> {
    let mut g = Vec::new();
    for strength in [0.01, 0.1, 1.0, 10.0, 100.0] {
        for penalty in [Penalty::L1, Penalty::L2] {
            g.push(GridPoint { strength, penalty });
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvSet {
    Dev,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub grid: Vec<GridPoint>,
    pub folds: usize,
    pub cv_on: CvSet,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            folds: 5,
            cv_on: CvSet::Dev,
            seed: 0,
            max_iter: 10_000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub point: GridPoint,
    pub mean_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClinModel<T> {
    pub weights: [T; N_FEATURES],
    pub intercept: T,
    pub standardizer: Standardizer,
    pub selected: GridPoint,
    pub cv_scores: Vec<CvScore>,
    /// Iterations used by the final refit.
    pub iterations: usize,
}

/// Result of one penalised fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted<T> {
    pub weights: Vec<T>,
    pub intercept: T,
    pub iterations: usize,
    pub converged: bool,
}

fn soft_threshold<T: Scalar>(v: T, t: T) -> T {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        T::zero()
    }
}

/// Minimises `mean log-loss + strength * R(w)` with `R = ||w||²/2` (L2) or
/// `||w||₁` (L1, proximal step) by full-batch gradient descent with step
/// `1/L`. The intercept is not penalised.
pub fn fit_point<T: Scalar>(
    x: &[[T; N_FEATURES]],
    y: &[bool],
    point: GridPoint,
    init: Option<(&[T], T)>,
    max_iter: usize,
    tol: f64,
) -> Result<Fitted<T>> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(Error::Integrity(format!("{n} rows vs {} labels", y.len())));
    }
    let nf = T::from_usize(n).unwrap();
    let lam = T::of(point.strength);
    // Lipschitz bound of the log-loss gradient via the Frobenius norm
    let frob: T = x.iter().map(|r| r.iter().map(|&v| v * v).sum::<T>() + T::one()).sum();
    let mut l = frob / (T::of(4.0) * nf);
    if point.penalty == Penalty::L2 {
        l += lam;
    }
    let eta = T::one() / l;
    let (mut w, mut b) = match init {
        Some((w0, b0)) => (w0.to_vec(), b0),
        None => (vec![T::zero(); N_FEATURES], T::zero()),
    };
    let yv: Vec<T> = y.iter().map(|&h| if h { T::one() } else { T::zero() }).collect();
    let mut gw = vec![T::zero(); N_FEATURES];
    for it in 1..=max_iter {
        gw.iter_mut().for_each(|g| *g = T::zero());
        let mut gb = T::zero();
        for (row, &t) in x.iter().zip(&yv) {
            let z: T = row.iter().zip(&w).map(|(&a, &c)| a * c).sum::<T>() + b;
            let r = sigmoid(z) - t;
            for (g, &a) in gw.iter_mut().zip(row) {
                *g += r * a;
            }
            gb += r;
        }
        gw.iter_mut().for_each(|g| *g /= nf);
        gb /= nf;
        let mut step_norm = gb.abs();
        match point.penalty {
            Penalty::L2 => {
                for (wi, g) in w.iter_mut().zip(&gw) {
                    let full = *g + lam * *wi;
                    step_norm = step_norm.max(full.abs());
                    *wi -= eta * full;
                }
            }
            Penalty::L1 => {
                for (wi, g) in w.iter_mut().zip(&gw) {
                    let next = soft_threshold(*wi - eta * *g, eta * lam);
                    // gradient mapping norm
                    step_norm = step_norm.max(((*wi - next) / eta).abs());
                    *wi = next;
                }
            }
        }
        b -= eta * gb;
        if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            return Err(Error::Training(format!("logistic fit diverged at iteration {it}")));
        }
        if step_norm.as_f64() < tol {
            return Ok(Fitted {
                weights: w,
                intercept: b,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(Fitted {
        weights: w,
        intercept: b,
        iterations: max_iter,
        converged: false,
    })
}

fn linear<T: Scalar>(row: &[T; N_FEATURES], w: &[T], b: T) -> T {
    row.iter().zip(w).map(|(&a, &c)| a * c).sum::<T>() + b
}

/// Fold assignment: seeded shuffle first, stratified round-robin if any
/// fold lacks a class.
pub fn assign_folds(y: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    let ok = |folds: &[usize]| {
        (0..k).all(|f| {
            let held: Vec<bool> = folds.iter().zip(y).filter(|(&g, _)| g == f).map(|(_, &l)| l).collect();
            let rest: Vec<bool> = folds.iter().zip(y).filter(|(&g, _)| g != f).map(|(_, &l)| l).collect();
            [held, rest].iter().all(|v| v.iter().any(|&l| l) && v.iter().any(|&l| !l))
        })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.shuffle(&mut rng);
    let mut folds = vec![0; y.len()];
    for (pos, &i) in idx.iter().enumerate() {
        folds[i] = pos % k;
    }
    if ok(&folds) {
        return Ok(folds);
    }
    let mut next = 0;
    for class in [true, false] {
        for &i in idx.iter().filter(|&&i| y[i] == class) {
            folds[i] = next % k;
            next += 1;
        }
    }
    if ok(&folds) {
        return Ok(folds);
    }
    Err(Error::Data(format!(
        "cannot build {k} folds with both classes from {} High / {} Low",
        y.iter().filter(|&&l| l).count(),
        y.iter().filter(|&&l| !l).count()
    )))
}

/// Mean held-out AUC over `k` folds.
pub fn cv_auc<T: Scalar>(x: &[[T; N_FEATURES]], y: &[bool], folds: &[usize], k: usize, point: GridPoint, opts: &FitOptions) -> Result<f64> {
    let mut total = 0.0;
    for f in 0..k {
        let (mut xt, mut yt, mut xh, mut yh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..x.len() {
            if folds[i] == f {
                xh.push(x[i]);
                yh.push(y[i]);
            } else {
                xt.push(x[i]);
                yt.push(y[i]);
            }
        }
        let fit = fit_point(&xt, &yt, point, None, opts.max_iter, opts.tol)?;
        let scores: Vec<T> = xh.iter().map(|r| linear(r, &fit.weights, fit.intercept)).collect();
        total += auc(&scores, &yh)?.as_f64();
    }
    Ok(total / k as f64)
}

/// Best grid point: highest CV AUC, ties to larger strength, then L2.
pub fn select(scores: &[CvScore]) -> GridPoint {
    let mut best = &scores[0];
    for s in &scores[1..] {
        let better = s.mean_auc > best.mean_auc
            || (s.mean_auc == best.mean_auc
                && (s.point.strength > best.point.strength
                    || (s.point.strength == best.point.strength && s.point.penalty == Penalty::L2)));
        if better {
            best = s;
        }
    }
    best.point
}

impl<T: Scalar> ClinModel<T> {
    /// Grid search with k-fold CV (on dev by default), then a refit of the
    /// selected point on train + dev. Standardisation uses train only.
    pub fn fit(
        train: &[(&ClinicalRecord, bool)],
        dev: &[(&ClinicalRecord, bool)],
        opts: &FitOptions,
    ) -> Result<Self> {
        if opts.grid.is_empty() || opts.folds < 2 {
            return Err(Error::Config("clinical grid must be nonempty and folds >= 2".into()));
        }
        let has_both = |s: &[(&ClinicalRecord, bool)]| s.iter().any(|r| r.1) && s.iter().any(|r| !r.1);
        if !has_both(train) {
            return Err(Error::Data("clinical training set needs both classes".into()));
        }
        let recs: Vec<&ClinicalRecord> = train.iter().map(|r| r.0).collect();
        let standardizer = Standardizer::fit(&recs)?;
        let enc = |s: &[(&ClinicalRecord, bool)]| -> (Vec<[T; N_FEATURES]>, Vec<bool>) {
            s.iter().map(|(r, l)| (encode_record::<T>(r, &standardizer), *l)).unzip()
        };
        let cv_rows = match opts.cv_on {
            CvSet::Dev => dev,
            CvSet::Train => train,
        };
        let (cx, cy) = enc(cv_rows);
        let folds = assign_folds(&cy, opts.folds, opts.seed)?;
        let cv_scores: Vec<CvScore> = opts
            .grid
            .par_iter()
            .map(|&point| {
                Ok(CvScore {
                    point,
                    mean_auc: cv_auc(&cx, &cy, &folds, opts.folds, point, opts)?,
                })
            })
            .collect::<Result<_>>()?;
        let selected = select(&cv_scores);
        let mut all: Vec<(&ClinicalRecord, bool)> = train.to_vec();
        all.extend_from_slice(dev);
        let (x, y) = enc(&all);
        let fit = fit_point(&x, &y, selected, None, opts.max_iter, opts.tol)?;
        let mut weights = [T::zero(); N_FEATURES];
        weights.copy_from_slice(&fit.weights);
        Ok(Self {
            weights,
            intercept: fit.intercept,
            standardizer,
            selected,
            cv_scores,
            iterations: fit.iterations,
        })
    }

    pub fn predict_proba(&self, r: &ClinicalRecord) -> T {
        let x = encode_record::<T>(r, &self.standardizer);
        sigmoid(linear(&x, &self.weights, self.intercept))
    }

    /// Features by descending |coefficient|, ties in layout order.
    pub fn feature_importance(&self) -> Vec<(&'static str, T)> {
        let mut v: Vec<(usize, T)> = self.weights.iter().copied().enumerate().collect();
        v.sort_by(|a, b| b.1.abs().partial_cmp(&a.1.abs()).unwrap().then(a.0.cmp(&b.0)));
        v.into_iter().map(|(i, c)| (FEATURE_NAMES[i], c)).collect()
    }

    pub fn importance_csv(&self) -> String {
        let mut s = String::from("feature,coefficient,abs_rank\n");
        for (rank, (name, c)) in self.feature_importance().into_iter().enumerate() {
            s.push_str(&format!("{name},{c},{}\n", rank + 1));
        }
        s
    }

    pub fn checkpoint(&self, run_config: serde_json::Value) -> Checkpoint<T> {
        let config = serde_json::json!({
            "clinreg": { "selected": self.selected, "cv_scores": self.cv_scores, "iterations": self.iterations },
            "run": run_config,
        });
        let mut c = Checkpoint::new("clinical", config);
        let t = |v: Vec<T>| Tensor::new(vec![v.len()], v).unwrap();
        c.tensors.push((format!("{PREFIX}weights"), t(self.weights.to_vec())));
        c.tensors.push((format!("{PREFIX}intercept"), t(vec![self.intercept])));
        c.tensors.push((
            format!("{PREFIX}standardizer"),
            t(self.standardizer.to_array().iter().map(|&v| T::of(v)).collect()),
        ));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint<T>) -> Result<Self> {
        let get = |name: &str, len: usize| -> Result<Vec<T>> {
            let t = c
                .get(&format!("{PREFIX}{name}"))
                .ok_or_else(|| Error::Version(format!("checkpoint lacks {PREFIX}{name}")))?;
            if t.numel() != len {
                return Err(Error::Version(format!("{PREFIX}{name} has {} values, expected {len}", t.numel())));
            }
            Ok(t.data().to_vec())
        };
        let meta = c
            .config
            .get("clinreg")
            .ok_or_else(|| Error::Version("checkpoint has no clinical model metadata".into()))?;
        let mut weights = [T::zero(); N_FEATURES];
        weights.copy_from_slice(&get("weights", N_FEATURES)?);
        let st: Vec<f64> = get("standardizer", 4)?.into_iter().map(Scalar::as_f64).collect();
        Ok(Self {
            weights,
            intercept: get("intercept", 1)?[0],
            standardizer: Standardizer::from_slice(&st),
            selected: serde_json::from_value(meta["selected"].clone())?,
            cv_scores: serde_json::from_value(meta["cv_scores"].clone())?,
            iterations: serde_json::from_value(meta["iterations"].clone())?,
        })
    }
}

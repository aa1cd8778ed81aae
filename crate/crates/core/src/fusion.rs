//! Convex combination of image and clinical probabilities with a swept
//! mixing weight and a Youden operating threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::RiskCategory;
use crate::error::{Error, Result};
use crate::evalstat::{auc, youden_threshold};
use crate::num::Scalar;

pub const GRID_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub w: f64,
    pub t_star: f64,
    pub t_img: f64,
    pub t_clin: f64,
    pub dev_auc: f64,
}

fn fused<T: Scalar>(w: T, img: T, clin: T) -> T {
    w * img + (T::one() - w) * clin
}

/// Sweeps `w = k/steps` for `k = 0..=steps`, keeping the smallest `w`
/// among AUC ties.
pub fn fit_fusion<T: Scalar>(img: &[T], clin: &[T], is_high: &[bool], steps: usize) -> Result<FusionModel> {
    if img.len() != clin.len() || img.len() != is_high.len() {
        return Err(Error::Integrity(format!(
            "fusion inputs misaligned: {} image, {} clinical, {} labels",
            img.len(),
            clin.len(),
            is_high.len()
        )));
    }
    if steps == 0 {
        return Err(Error::Config("fusion grid needs at least one step".into()));
    }
    let steps_t = T::from_usize(steps).unwrap();
    let sweep: Vec<(T, T)> = (0..=steps)
        .into_par_iter()
        .map(|k| {
            let w = T::from_usize(k).unwrap() / steps_t;
            let s: Vec<T> = img.iter().zip(clin).map(|(&a, &b)| fused(w, a, b)).collect();
            Ok((w, auc(&s, is_high)?))
        })
        .collect::<Result<_>>()?;
    let mut best = sweep[0];
    for &(w, a) in &sweep[1..] {
        if a > best.1 {
            best = (w, a);
        }
    }
    let (w, dev_auc) = best;
    let s: Vec<T> = img.iter().zip(clin).map(|(&a, &b)| fused(w, a, b)).collect();
    Ok(FusionModel {
        w: w.as_f64(),
        t_star: youden_threshold(&s, is_high)?.0.as_f64(),
        t_img: youden_threshold(img, is_high)?.0.as_f64(),
        t_clin: youden_threshold(clin, is_high)?.0.as_f64(),
        dev_auc: dev_auc.as_f64(),
    })
}

impl FusionModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w", self.w), ("t_star", self.t_star), ("t_img", self.t_img), ("t_clin", self.t_clin)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("fusion {name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn fuse_predict<T: Scalar>(&self, img: T, clin: T) -> Result<(T, RiskCategory)> {
        for (name, v) in [("image", img), ("clinical", clin)] {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::Domain(format!("{name} score {v} outside [0,1]")));
            }
        }
        let s = fused(T::of(self.w), img, clin);
        let cat = if s >= T::of(self.t_star) { RiskCategory::High } else { RiskCategory::Low };
        Ok((s, cat))
    }
}

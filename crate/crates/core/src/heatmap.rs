//! Attention overlays: per-patch weights, min-max normalised across the
//! slide, drawn blue (low) to red (high) over a downsampled rendering.

use image::imageops::{resize, FilterType};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::aggrformer::AttentionMap;
use crate::error::{Error, Result};
use crate::slidebundle::SlideBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapOptions {
    pub alpha: f64,
    pub max_side: u32,
}

impl Default for HeatmapOptions {
    fn default() -> Self {
        Self {
            alpha: 0.45,
            max_side: 2048,
        }
    }
}

/// Blue at 0, red at 1.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8]
}

/// Output size: the slide scaled so its longer side is at most `max_side`.
pub fn output_size(width: u32, height: u32, max_side: u32) -> (u32, u32) {
    let longest = width.max(height);
    if longest <= max_side {
        return (width, height);
    }
    let s = max_side as f64 / longest as f64;
    (
        ((width as f64 * s).round() as u32).max(1),
        ((height as f64 * s).round() as u32).max(1),
    )
}

/// Min-max normalisation over every weight of every region; a constant
/// map becomes 0.5.
pub fn normalize(maps: &[AttentionMap]) -> Vec<Vec<f64>> {
    let all = maps.iter().flat_map(|m| m.weights.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), w| (lo.min(w), hi.max(w)));
    maps.iter()
        .map(|m| {
            m.weights
                .iter()
                .map(|&w| if hi > lo { (w - lo) / (hi - lo) } else { 0.5 })
                .collect()
        })
        .collect()
}

/// Per-pixel normalised weight at full slide resolution of the given
/// output pixel, or `None` when no sampled patch covers it. Overlapping
/// regions keep the larger weight.
fn tint_value(maps: &[AttentionMap], norm: &[Vec<f64>], sx: f64, sy: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (m, w) in maps.iter().zip(norm) {
        let (ox, oy) = (m.origin.0 as f64, m.origin.1 as f64);
        if sx < ox || sy < oy || sx >= ox + m.side as f64 || sy >= oy + m.side as f64 {
            continue;
        }
        let n = (m.side / m.patch_side) as usize;
        let col = ((sx - ox) / m.patch_side as f64) as usize;
        let row = ((sy - oy) / m.patch_side as f64) as usize;
        let pos = row * n + col;
        if let Some(k) = m.positions.iter().position(|&p| p == pos) {
            best = Some(best.map_or(w[k], |b: f64| b.max(w[k])));
        }
    }
    best
}

/// Renders the overlay for `bundle` with the given region attention.
pub fn render(bundle: &SlideBundle, maps: &[AttentionMap], opts: &HeatmapOptions) -> Result<RgbImage> {
    if maps.is_empty() || maps.iter().all(|m| m.weights.is_empty()) {
        return Err(Error::Data(format!("no regions sampled for slide {}", bundle.slide_id())));
    }
    if !(0.0..=1.0).contains(&opts.alpha) || opts.max_side == 0 {
        return Err(Error::Config("heatmap.alpha must lie in [0,1] and heatmap.max_side be positive".into()));
    }
    let full = bundle.read_full()?;
    let (w, h) = output_size(full.width(), full.height(), opts.max_side);
    let mut out = if (w, h) == full.dimensions() {
        full
    } else {
        resize(&full, w, h, FilterType::Triangle)
    };
    let norm = normalize(maps);
    let (fx, fy) = (
        bundle.manifest.width as f64 / w as f64,
        bundle.manifest.height as f64 / h as f64,
    );
    let a = opts.alpha;
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (sx, sy) = ((x as f64 + 0.5) * fx, (y as f64 + 0.5) * fy);
        if let Some(v) = tint_value(maps, &norm, sx, sy) {
            let c = colormap(v);
            *px = Rgb(std::array::from_fn(|i| {
                ((1.0 - a) * px.0[i] as f64 + a * c[i] as f64).round().clamp(0.0, 255.0) as u8
            }));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(weights: Vec<f64>) -> AttentionMap {
        AttentionMap {
            origin: (0, 0),
            side: 8,
            patch_side: 4,
            positions: (0..weights.len()).collect(),
            weights,
        }
    }

    #[test]
    fn constant_attention_is_mid_tint() {
        let n = normalize(&[map(vec![0.25; 4]), map(vec![0.25; 4])]);
        assert!(n.iter().flatten().all(|&v| v == 0.5));
        assert_eq!(colormap(0.5), [128, 0, 128]);
    }

    #[test]
    fn normalisation_spans_slide() {
        let n = normalize(&[map(vec![0.1, 0.2, 0.3, 0.4]), map(vec![0.7, 0.1, 0.1, 0.1])]);
        assert_eq!(n[0][0], 0.0);
        assert_eq!(n[1][0], 1.0);
    }

    #[test]
    fn size_rule() {
        assert_eq!(output_size(100_000, 50_000, 2048), (2048, 1024));
        assert_eq!(output_size(192, 192, 2048), (192, 192));
        assert_eq!(output_size(4096, 10, 2048), (2048, 5));
    }

    #[test]
    fn patch_lookup() {
        let m = map(vec![0.0, 1.0, 0.0, 0.0]);
        let n = normalize(std::slice::from_ref(&m));
        assert_eq!(tint_value(&[m.clone()], &n, 5.0, 1.0), Some(1.0));
        assert_eq!(tint_value(&[m.clone()], &n, 1.0, 1.0), Some(0.0));
        assert_eq!(tint_value(&[m], &n, 9.0, 1.0), None);
    }
}

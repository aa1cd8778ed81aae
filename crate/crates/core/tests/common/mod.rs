#![allow(dead_code)]

use oncorisk::aggrformer::{AggrConfig, ModelConfig, RegionPixels, SlidePixels};
use oncorisk::patchnet::PatchNetConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8-pixel patches, 2x2 grid, one residual block, D = 8, H = 8.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        patchnet: PatchNetConfig {
            patch_side: 8,
            stem_width: 4,
            stem_stride: 1,
            stages: 1,
            blocks_per_stage: 1,
            feature_dim: 8,
            frozen: false,
        },
        aggrformer: AggrConfig {
            feature_dim: 8,
            hidden: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            grid_side: 2,
        },
    }
}

/// A slide whose patches are noise around a base colour.
pub fn tiny_slide(id: &str, base: [u8; 3], regions: usize, seed: u64) -> SlidePixels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regions = (0..regions)
        .map(|k| RegionPixels {
            origin: (16 * k as u64, 0),
            side: 16,
            patch_side: 8,
            positions: (0..4).collect(),
            patches: (0..4)
                .map(|_| {
                    Some(
                        (0..8 * 8)
                            .flat_map(|_| base.map(|c| c.saturating_add(rng.random_range(0..40))))
                            .collect(),
                    )
                })
                .collect(),
        })
        .collect();
    SlidePixels {
        slide_id: id.to_string(),
        regions,
    }
}

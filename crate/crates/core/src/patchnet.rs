//! Residual convolutional patch encoder: stem conv, residual stages, global
//! average pool, linear projection to `feature_dim`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Conv2dSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::num::Scalar;

pub const PREFIX: &str = "patchnet.";

/// Per-channel standardisation constants applied after scaling to [0,1].
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchNetConfig {
    pub patch_side: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    /// Stage `s` has `stem_width * 2^s` channels; stages after the first
    /// open with a stride-2 transition conv.
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub feature_dim: usize,
    /// Keep encoder weights fixed during training.
    pub frozen: bool,
}

impl Default for PatchNetConfig {
    fn default() -> Self {
        Self {
            patch_side: 224,
            stem_width: 16,
            stem_stride: 2,
            stages: 4,
            blocks_per_stage: 2,
            feature_dim: 64,
            frozen: false,
        }
    }
}

impl PatchNetConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("patch_side", self.patch_side),
            ("stem_width", self.stem_width),
            ("stem_stride", self.stem_stride),
            ("stages", self.stages),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = pos.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("patchnet.{name} must be positive")));
        }
        // spatial side after stem conv, stem pool and the transitions
        let mut side = (self.patch_side - 1) / self.stem_stride + 1;
        side /= 2;
        for _ in 1..self.stages {
            side = side.div_ceil(2);
        }
        if side == 0 {
            return Err(Error::Config(format!(
                "patchnet.patch_side {} is too small for {} stages",
                self.patch_side, self.stages
            )));
        }
        Ok(())
    }

    pub fn stage_width(&self, s: usize) -> usize {
        self.stem_width << s
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ConvIds,
    conv2: ConvIds,
}

#[derive(Debug, Clone)]
struct Stage {
    down: Option<ConvIds>,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct PatchNet {
    pub config: PatchNetConfig,
    stem: ConvIds,
    stages: Vec<Stage>,
    proj_w: ParamId,
    proj_b: ParamId,
}

fn conv_names(base: &str) -> (String, String) {
    (format!("{PREFIX}{base}.w"), format!("{PREFIX}{base}.b"))
}

impl PatchNet {
    /// Registers freshly initialised weights in `store`.
    pub fn new<T: Scalar, R: Rng>(config: PatchNetConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut conv = |store: &mut ParamStore<T>, base: &str, o: usize, c: usize, k: usize| {
            let (wn, bn) = conv_names(base);
            ConvIds {
                w: store.insert(wn, Tensor::fan_in_normal(vec![o, c, k, k], rng)),
                b: store.insert(bn, Tensor::zeros(vec![o])),
            }
        };
        let stem = conv(store, "stem", config.stem_width, 3, 3);
        let mut stages = Vec::new();
        for s in 0..config.stages {
            let width = config.stage_width(s);
            let down = (s > 0).then(|| conv(store, &format!("s{s}.down"), width, config.stage_width(s - 1), 3));
            let blocks = (0..config.blocks_per_stage)
                .map(|b| Block {
                    conv1: conv(store, &format!("s{s}.b{b}.conv1"), width, width, 3),
                    conv2: conv(store, &format!("s{s}.b{b}.conv2"), width, width, 3),
                })
                .collect();
            stages.push(Stage { down, blocks });
        }
        let last = config.stage_width(config.stages - 1);
        let std = (1.0 / last as f64).sqrt();
        let proj_w = store.insert(
            format!("{PREFIX}proj.w"),
            Tensor::truncated_normal(vec![last, config.feature_dim], std, rng),
        );
        let proj_b = store.insert(format!("{PREFIX}proj.b"), Tensor::zeros(vec![config.feature_dim]));
        if config.frozen {
            store.set_trainable(PREFIX, false);
        }
        Ok(Self {
            config,
            stem,
            stages,
            proj_w,
            proj_b,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.stem.w, self.stem.b];
        for st in &self.stages {
            if let Some(d) = st.down {
                v.extend([d.w, d.b]);
            }
            for b in &st.blocks {
                v.extend([b.conv1.w, b.conv1.b, b.conv2.w, b.conv2.b]);
            }
        }
        v.extend([self.proj_w, self.proj_b]);
        v
    }

    /// Zeroes both convolutions of block `b` in stage `s`.
    pub fn zero_block<T: Scalar>(&self, store: &mut ParamStore<T>, s: usize, b: usize) {
        let blk = &self.stages[s].blocks[b];
        for id in [blk.conv1.w, blk.conv1.b, blk.conv2.w, blk.conv2.b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `[N, 3, S, S]` standardised input from interleaved RGB patches.
    pub fn input_tensor<T: Scalar>(&self, patches: &[&[u8]]) -> Result<Tensor<T>> {
        let s = self.config.patch_side;
        let want = s * s * 3;
        if patches.is_empty() {
            return Err(Error::shape("patchnet.encode", "empty batch"));
        }
        let mut data = Vec::with_capacity(patches.len() * want);
        for p in patches {
            if p.len() != want {
                return Err(Error::shape(
                    "patchnet.encode",
                    format!("patch has {} bytes, expected {s}x{s}x3 = {want}", p.len()),
                ));
            }
            for c in 0..3 {
                data.extend(
                    p.iter()
                        .skip(c)
                        .step_by(3)
                        .map(|&v| T::of((v as f64 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c])),
                );
            }
        }
        Tensor::new(vec![patches.len(), 3, s, s], data)
    }

    fn conv<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, c: ConvIds, stride: usize) -> Result<Var> {
        let w = g.param(store, c.w);
        let b = g.param(store, c.b);
        g.conv2d(x, w, b, Conv2dSpec { stride, padding: 1 })
    }

    /// One residual block: `relu(x + conv2(relu(conv1(x))))`.
    pub fn residual_block<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, s: usize, b: usize) -> Result<Var> {
        let blk = &self.stages[s].blocks[b];
        let h = Self::conv(g, store, x, blk.conv1, 1)?;
        let h = g.relu(h);
        let h = Self::conv(g, store, h, blk.conv2, 1)?;
        let sum = g.add(x, h)?;
        Ok(g.relu(sum))
    }

    /// Feature map after the stem: conv, relu, 2x2 max pool.
    pub fn stem<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var) -> Result<Var> {
        let h = Self::conv(g, store, input, self.stem, self.config.stem_stride)?;
        let h = g.relu(h);
        g.maxpool2d(h, 2)
    }

    /// `[N, 3, S, S] -> [N, feature_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var) -> Result<Var> {
        let mut h = self.stem(g, store, input)?;
        for (s, st) in self.stages.iter().enumerate() {
            if let Some(d) = st.down {
                h = Self::conv(g, store, h, d, 2)?;
                h = g.relu(h);
            }
            for b in 0..st.blocks.len() {
                h = self.residual_block(g, store, h, s, b)?;
            }
        }
        let pooled = g.global_avg_pool(h)?;
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        let z = g.matmul(pooled, w)?;
        g.add_row(z, b)
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, patch: &[u8]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let x = g.leaf(&self.input_tensor(&[patch])?);
        let y = self.forward(&mut g, store, x)?;
        Ok(g.value(y).to_vec())
    }

    /// Order-preserving batch encoding, parallel over chunks of patches.
    pub fn encode_batch<T: Scalar>(&self, store: &ParamStore<T>, patches: &[&[u8]]) -> Result<Vec<Vec<T>>> {
        const CHUNK: usize = 32;
        let d = self.config.feature_dim;
        let chunks: Vec<Vec<Vec<T>>> = patches
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Graph::new();
                let x = g.leaf(&self.input_tensor(chunk)?);
                let y = self.forward(&mut g, store, x)?;
                Ok(g.value(y).chunks(d).map(<[T]>::to_vec).collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> PatchNetConfig {
        PatchNetConfig {
            patch_side: 16,
            stem_width: 4,
            stem_stride: 1,
            stages: 2,
            blocks_per_stage: 1,
            feature_dim: 6,
            frozen: false,
        }
    }

    fn build() -> (PatchNet, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let net = PatchNet::new(tiny(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (net, store)
    }

    fn noise(seed: u64, side: usize) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..side * side * 3).map(|_| rng.random()).collect()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let (net, store) = build();
        let p = noise(1, 16);
        let a = net.encode(&store, &p).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, net.encode(&store, &p).unwrap());
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(matches!(net.encode(&store, &p[..30]), Err(Error::Shape { .. })));
    }

    #[test]
    fn batch_matches_loop() {
        let (net, store) = build();
        let ps: Vec<Vec<u8>> = (0..40).map(|i| noise(i, 16)).collect();
        let refs: Vec<&[u8]> = ps.iter().map(Vec::as_slice).collect();
        let batch = net.encode_batch(&store, &refs).unwrap();
        assert_eq!(batch.len(), 40);
        for (p, b) in refs.iter().zip(&batch) {
            let single = net.encode(&store, p).unwrap();
            let dev = single.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-9);
        }
        assert!(net.encode_batch(&store, &[]).unwrap().is_empty());
        let mixed: Vec<&[u8]> = vec![&ps[0], &ps[1][..12]];
        assert!(net.encode_batch(&store, &mixed).is_err());
    }

    #[test]
    fn zeroed_block_is_identity() {
        let (net, mut store) = build();
        net.zero_block(&mut store, 0, 0);
        let mut g = Graph::new();
        let x = g.leaf(&net.input_tensor::<f64>(&[&noise(3, 16)]).unwrap());
        let h = net.stem(&mut g, &store, x).unwrap();
        let y = net.residual_block(&mut g, &store, h, 0, 0).unwrap();
        assert_eq!(g.value(h), g.value(y));
    }

    #[test]
    fn constant_patch_features_ignore_translation() {
        let (net, store) = build();
        let flat = [180u8, 60, 140].repeat(256);
        let mut shifted = flat.clone();
        shifted.rotate_left(16 * 3 * 5);
        assert_eq!(net.encode(&store, &flat).unwrap(), net.encode(&store, &shifted).unwrap());
    }

    #[test]
    fn config_rejects_impossible_geometry() {
        let bad = PatchNetConfig {
            patch_side: 2,
            stem_stride: 2,
            ..tiny()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

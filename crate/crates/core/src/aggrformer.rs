//! Region transformer over patch features with a class token, masked
//! feature pretraining, and slide-level regression / classification heads.
//!
//! [`OncoModel`] owns one [`ParamStore`] holding both the patch encoder
//! (`patchnet.` names) and the aggregator (`aggrformer.` names).

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::RiskCategory;
use crate::diffcore::{sigmoid, Adam, AdamConfig, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::patchnet::{PatchNet, PatchNetConfig};
use crate::slidebundle::{ClusteredRegion, PatchGrid};

pub const PREFIX: &str = "aggrformer.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggrConfig {
    /// Width of incoming patch features; must match the encoder.
    pub feature_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Patches per region side; positions index a `grid_side²` table.
    pub grid_side: usize,
}

impl Default for AggrConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            hidden: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 2,
            grid_side: 20,
        }
    }
}

impl AggrConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("grid_side", self.grid_side),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("aggrformer.{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "aggrformer.hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub patchnet: PatchNetConfig,
    pub aggrformer: AggrConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.patchnet.validate()?;
        self.aggrformer.validate()?;
        if self.patchnet.feature_dim != self.aggrformer.feature_dim {
            return Err(Error::Config(format!(
                "patchnet.feature_dim {} differs from aggrformer.feature_dim {}",
                self.patchnet.feature_dim, self.aggrformer.feature_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Aggrformer {
    pub config: AggrConfig,
    in_w: ParamId,
    in_b: ParamId,
    pos: ParamId,
    cls: ParamId,
    mask_token: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    rec_w: ParamId,
    rec_b: ParamId,
    reg_w: ParamId,
    reg_b: ParamId,
    clf_w: ParamId,
    clf_b: ParamId,
}

/// Graph handles for one encoded region.
#[derive(Debug, Clone)]
pub struct RegionOut<T> {
    /// `[1, H]` final class-token state.
    pub cls: Var,
    /// `[P + 1, H]` final token states, class token first.
    pub tokens: Var,
    /// Last-layer class-token attention over the `P` patches, head mean.
    pub attention: Vec<T>,
}

impl Aggrformer {
    pub fn new<T: Scalar>(config: AggrConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (d, h, r) = (config.feature_dim, config.hidden, config.mlp_ratio);
        let mut lin = |name: &str, i: usize, o: usize| {
            store.insert(
                format!("{PREFIX}{name}"),
                Tensor::truncated_normal(vec![i, o], (1.0 / i as f64).sqrt(), rng),
            )
        };
        let in_w = lin("in.w", d, h);
        let wide = r * h;
        let mut layer_w = Vec::new();
        for l in 0..config.layers {
            layer_w.push([
                lin(&format!("l{l}.wq"), h, h),
                lin(&format!("l{l}.wk"), h, h),
                lin(&format!("l{l}.wv"), h, h),
                lin(&format!("l{l}.wo"), h, h),
                lin(&format!("l{l}.w1"), h, wide),
                lin(&format!("l{l}.w2"), wide, h),
            ]);
        }
        let rec_w = lin("head.recon.w", h, d);
        let reg_w = lin("head.reg.w", h, 1);
        let clf_w = lin("head.clf.w", h, 1);

        let mut vec_p = |name: &str, shape: Vec<usize>, v: f64| store.insert(format!("{PREFIX}{name}"), Tensor::filled(shape, T::of(v)));
        let in_b = vec_p("in.b", vec![h], 0.0);
        let layers = layer_w
            .into_iter()
            .enumerate()
            .map(|(l, [wq, wk, wv, wo, w1, w2])| LayerIds {
                ln1_g: vec_p(&format!("l{l}.ln1.g"), vec![h], 1.0),
                ln1_b: vec_p(&format!("l{l}.ln1.b"), vec![h], 0.0),
                wq,
                wk,
                wv,
                wo,
                bo: vec_p(&format!("l{l}.bo"), vec![h], 0.0),
                ln2_g: vec_p(&format!("l{l}.ln2.g"), vec![h], 1.0),
                ln2_b: vec_p(&format!("l{l}.ln2.b"), vec![h], 0.0),
                w1,
                b1: vec_p(&format!("l{l}.b1"), vec![wide], 0.0),
                w2,
                b2: vec_p(&format!("l{l}.b2"), vec![h], 0.0),
            })
            .collect();
        let lnf_g = vec_p("lnf.g", vec![h], 1.0);
        let lnf_b = vec_p("lnf.b", vec![h], 0.0);
        let rec_b = vec_p("head.recon.b", vec![d], 0.0);
        let reg_b = vec_p("head.reg.b", vec![1], 0.0);
        let clf_b = vec_p("head.clf.b", vec![1], 0.0);

        let g2 = config.grid_side * config.grid_side;
        let pos = store.insert(format!("{PREFIX}pos"), Tensor::truncated_normal(vec![g2, h], 0.02, rng));
        let cls = store.insert(format!("{PREFIX}cls"), Tensor::truncated_normal(vec![1, h], 0.02, rng));
        let mask_token = store.insert(format!("{PREFIX}mask_token"), Tensor::truncated_normal(vec![1, d], 0.02, rng));
        Ok(Self {
            config,
            in_w,
            in_b,
            pos,
            cls,
            mask_token,
            layers,
            lnf_g,
            lnf_b,
            rec_w,
            rec_b,
            reg_w,
            reg_b,
            clf_w,
            clf_b,
        })
    }

    fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = g.param(store, w);
        let y = g.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = g.param(store, b);
                g.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    /// Runs the transformer over `feats` (`[P, D]`). Flagged `mask` rows are
    /// replaced by the learned mask token; `ignore` rows never serve as keys.
    pub fn encode_region<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feats: Var,
        positions: &[usize],
        ignore: &[bool],
        mask: Option<&[bool]>,
    ) -> Result<RegionOut<T>> {
        let c = &self.config;
        let p = positions.len();
        if g.shape(feats) != [p, c.feature_dim] || ignore.len() != p || mask.is_some_and(|m| m.len() != p) {
            return Err(Error::shape(
                "aggrformer.encode_region",
                format!(
                    "features {:?}, {} positions, {} ignore flags",
                    g.shape(feats),
                    p,
                    ignore.len()
                ),
            ));
        }
        if let Some(&bad) = positions.iter().find(|&&q| q >= c.grid_side * c.grid_side) {
            return Err(Error::shape(
                "aggrformer.encode_region",
                format!("position {bad} outside a {0}x{0} grid", c.grid_side),
            ));
        }
        if ignore.iter().all(|&i| i) {
            return Err(Error::Data("empty region".into()));
        }

        let x = match mask {
            Some(m) => {
                let tok = g.param(store, self.mask_token);
                g.replace_rows(feats, tok, m)?
            }
            None => feats,
        };
        let h = Self::linear(g, store, x, self.in_w, Some(self.in_b))?;
        let table = g.param(store, self.pos);
        let pe = g.embedding_lookup(table, positions)?;
        let h = g.add(h, pe)?;
        let cls = g.param(store, self.cls);
        let mut t = g.concat_rows(&[cls, h])?;

        let mut key_ignore = Vec::with_capacity(p + 1);
        key_ignore.push(true);
        key_ignore.extend_from_slice(ignore);
        let dh = c.hidden / c.heads;
        let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
        let mut attention = vec![T::zero(); p];
        for (li, l) in self.layers.iter().enumerate() {
            let (lg, lb) = (g.param(store, l.ln1_g), g.param(store, l.ln1_b));
            let a = g.layer_norm(t, lg, lb, T::of(1e-5))?;
            let q = Self::linear(g, store, a, l.wq, None)?;
            let k = Self::linear(g, store, a, l.wk, None)?;
            let v = Self::linear(g, store, a, l.wv, None)?;
            let mut outs = Vec::with_capacity(c.heads);
            for hd in 0..c.heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, inv_sqrt);
                let pr = g.softmax(s, Some(&key_ignore))?;
                if li + 1 == self.layers.len() {
                    let row0 = &g.value(pr)[1..=p];
                    for (acc, &w) in attention.iter_mut().zip(row0) {
                        *acc += w;
                    }
                }
                outs.push(g.matmul(pr, vh)?);
            }
            let o = g.concat_cols(&outs)?;
            let o = Self::linear(g, store, o, l.wo, Some(l.bo))?;
            t = g.add(t, o)?;
            let (mg, mb) = (g.param(store, l.ln2_g), g.param(store, l.ln2_b));
            let m = g.layer_norm(t, mg, mb, T::of(1e-5))?;
            let m = Self::linear(g, store, m, l.w1, Some(l.b1))?;
            let m = g.gelu(m);
            let m = Self::linear(g, store, m, l.w2, Some(l.b2))?;
            t = g.add(t, m)?;
        }
        let heads = T::from_usize(c.heads).unwrap();
        attention.iter_mut().for_each(|a| *a /= heads);
        let (fg, fb) = (g.param(store, self.lnf_g), g.param(store, self.lnf_b));
        let tokens = g.layer_norm(t, fg, fb, T::of(1e-5))?;
        let cls = g.gather_rows(tokens, &[0])?;
        Ok(RegionOut { cls, tokens, attention })
    }

    /// Reconstruction head over every patch token: `[P + 1, H] -> [P, D]`.
    pub fn reconstruct<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let p = g.shape(tokens)[0] - 1;
        let rows: Vec<usize> = (1..=p).collect();
        let patch_tokens = g.gather_rows(tokens, &rows)?;
        Self::linear(g, store, patch_tokens, self.rec_w, Some(self.rec_b))
    }

    /// Regression head output (score / 100) for `[B, H]` embeddings.
    pub fn regression_head<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, emb: Var) -> Result<Var> {
        Self::linear(g, store, emb, self.reg_w, Some(self.reg_b))
    }

    /// Classification logits for `[B, H]` embeddings.
    pub fn classifier_head<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, emb: Var) -> Result<Var> {
        Self::linear(g, store, emb, self.clf_w, Some(self.clf_b))
    }
}

/// Mean squared error between `preds` and `targets` over rows flagged in
/// `masked` only (both `[P, D]`).
pub fn masked_mse<T: Scalar>(g: &mut Graph<T>, preds: Var, targets: Var, masked: &[bool]) -> Result<Var> {
    let rows: Vec<usize> = masked.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::Config("no masked positions".into()));
    }
    let p = g.gather_rows(preds, &rows)?;
    let t = g.gather_rows(targets, &rows)?;
    g.mse_loss(p, t)
}

/// Number of positions masked among `valid` for fraction `rho`.
pub fn mask_count(valid: usize, rho: f64) -> usize {
    ((rho * valid as f64).round() as usize).clamp(1, valid)
}

/// Plain-value region input: `[P, D]` features with positions and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTokens<T> {
    pub features: Tensor<T>,
    pub positions: Vec<usize>,
    pub ignore: Vec<bool>,
}

/// Region input as raw patches; `None` slots are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPixels {
    pub origin: (u64, u64),
    pub side: u32,
    pub patch_side: u32,
    pub positions: Vec<usize>,
    pub patches: Vec<Option<Vec<u8>>>,
}

impl RegionPixels {
    pub fn from_grid(grid: &PatchGrid) -> Self {
        Self {
            origin: (grid.region.x as u64, grid.region.y as u64),
            side: grid.region.side,
            patch_side: grid.patch_side,
            positions: grid
                .patches
                .iter()
                .map(|p| (p.row * grid.n + p.col) as usize)
                .collect(),
            patches: grid.patches.iter().map(|p| Some(p.pixels.clone())).collect(),
        }
    }

    pub fn from_cluster(region: &ClusteredRegion) -> Result<Self> {
        Ok(Self {
            origin: region.origin,
            side: region.side,
            patch_side: region.patch_side,
            positions: (0..region.slots.len()).collect(),
            patches: region.load()?,
        })
    }

    pub fn ignore(&self) -> Vec<bool> {
        self.patches.iter().map(Option::is_none).collect()
    }

    pub fn grid_side(&self) -> usize {
        (self.side / self.patch_side) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidePixels {
    pub slide_id: String,
    pub regions: Vec<RegionPixels>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub origin: (u64, u64),
    pub side: u32,
    pub patch_side: u32,
    pub positions: Vec<usize>,
    /// Nonnegative, summing to one over the region's patches.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub prob_high: f64,
    /// Regression output clamped to [0, 100].
    pub score: f64,
    pub raw_score: f64,
    pub attention: Vec<AttentionMap>,
}

/// Clamps a raw regression output to the reportable score range.
pub fn clamp_score(raw: f64) -> f64 {
    raw.clamp(0.0, 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Pretrain,
    Regression,
    Classifier,
}

impl Phase {
    pub fn token(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Pretrain => "pretrain",
            Phase::Regression => "regression",
            Phase::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Phase::Init),
            "pretrain" => Ok(Phase::Pretrain),
            "regression" => Ok(Phase::Regression),
            "classifier" => Ok(Phase::Classifier),
            _ => Err(Error::Version(format!("unknown checkpoint phase {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Call the monitor every this many steps (0 disables it).
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Step at which the monitor asked to stop, if it did.
    pub stopped_at: Option<usize>,
}

/// Callback invoked during training; returning `true` stops early.
pub type Monitor<'a, T> = dyn FnMut(usize, &OncoModel<T>) -> Result<bool> + 'a;

#[derive(Debug, Clone)]
pub struct OncoModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub patchnet: PatchNet,
    pub aggr: Aggrformer,
    pub phase: Phase,
}

/// Graph handles of a slide forward pass.
struct SlideOut<T> {
    embedding: Var,
    regions: Vec<RegionOut<T>>,
    /// Per region `[P, D]` feature node (zero rows at padding).
    features: Vec<Var>,
}

impl<T: Scalar> OncoModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let patchnet = PatchNet::new(config.patchnet.clone(), &mut store, &mut rng)?;
        let aggr = Aggrformer::new(config.aggrformer.clone(), &mut store, &mut rng)?;
        Ok(Self {
            config,
            store,
            patchnet,
            aggr,
            phase: Phase::Init,
        })
    }

    pub fn checkpoint(&self, run_config: serde_json::Value) -> Checkpoint<T> {
        let config = serde_json::json!({ "model": self.config, "run": run_config });
        let mut c = Checkpoint::new(self.phase.token(), config);
        c.add_store(&self.store, "");
        c
    }

    /// Rebuilds a model from a checkpoint. When `expected` is given the
    /// stored model configuration must equal it.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>, expected: Option<&ModelConfig>) -> Result<Self> {
        let stored = ckpt
            .config
            .get("model")
            .ok_or_else(|| Error::Version("checkpoint has no model configuration".into()))?;
        let config: ModelConfig = serde_json::from_value(stored.clone())
            .map_err(|e| Error::Version(format!("unreadable model configuration: {e}")))?;
        if let Some(want) = expected {
            if want != &config {
                return Err(Error::Version(
                    "checkpoint model configuration differs from the requested one".into(),
                ));
            }
        }
        let mut model = Self::new(config, 0)?;
        let loaded = ckpt.load_into(&mut model.store, "")?;
        if loaded != model.store.len() || ckpt.tensors.len() != loaded {
            return Err(Error::Version(format!(
                "checkpoint holds {} tensors, model expects {}",
                ckpt.tensors.len(),
                model.store.len()
            )));
        }
        model.phase = Phase::parse(&ckpt.phase)?;
        Ok(model)
    }

    fn check_region(&self, r: &RegionPixels) -> Result<()> {
        let c = &self.config;
        if r.patch_side as usize != c.patchnet.patch_side || r.grid_side() != c.aggrformer.grid_side {
            return Err(Error::Config(format!(
                "region with patch side {} and grid {} does not fit a model with patch side {} and grid {}",
                r.patch_side,
                r.grid_side(),
                c.patchnet.patch_side,
                c.aggrformer.grid_side
            )));
        }
        if r.positions.len() != r.patches.len() {
            return Err(Error::Integrity("region positions and patches differ in length".into()));
        }
        Ok(())
    }

    /// Per-region `[P, D]` features as plain values, zero at padding.
    pub fn region_features(&self, slide: &SlidePixels) -> Result<Vec<Vec<T>>> {
        let d = self.config.patchnet.feature_dim;
        slide
            .regions
            .iter()
            .map(|r| {
                self.check_region(r)?;
                let present: Vec<&[u8]> = r.patches.iter().flatten().map(Vec::as_slice).collect();
                let enc = if present.is_empty() {
                    Vec::new()
                } else {
                    self.patchnet.encode_batch(&self.store, &present)?
                };
                let mut it = enc.into_iter();
                let mut out = Vec::with_capacity(r.patches.len() * d);
                for p in &r.patches {
                    match p {
                        Some(_) => out.extend(it.next().unwrap()),
                        None => out.extend(std::iter::repeat_n(T::zero(), d)),
                    }
                }
                Ok(out)
            })
            .collect()
    }

    /// Feature nodes for every region of `slide`: constants from `cache`
    /// when given, else a differentiable encoder pass over all patches.
    fn feature_vars(&self, g: &mut Graph<T>, slide: &SlidePixels, cache: Option<&[Vec<T>]>) -> Result<Vec<Var>> {
        let d = self.config.patchnet.feature_dim;
        if let Some(c) = cache {
            return slide
                .regions
                .iter()
                .zip(c)
                .map(|(r, f)| g.constant(vec![r.patches.len(), d], f.clone()))
                .collect();
        }
        let mut present: Vec<&[u8]> = Vec::new();
        for r in &slide.regions {
            self.check_region(r)?;
            present.extend(r.patches.iter().flatten().map(Vec::as_slice));
        }
        let zero = g.constant(vec![1, d], vec![T::zero(); d])?;
        let table = if present.is_empty() {
            zero
        } else {
            let input = g.leaf(&self.patchnet.input_tensor(&present)?);
            let f = self.patchnet.forward(g, &self.store, input)?;
            g.concat_rows(&[f, zero])?
        };
        let zero_row = present.len();
        let mut next = 0;
        slide
            .regions
            .iter()
            .map(|r| {
                let idx: Vec<usize> = r
                    .patches
                    .iter()
                    .map(|p| match p {
                        Some(_) => {
                            next += 1;
                            next - 1
                        }
                        None => zero_row,
                    })
                    .collect();
                g.gather_rows(table, &idx)
            })
            .collect()
    }

    fn slide_forward(&self, g: &mut Graph<T>, slide: &SlidePixels, cache: Option<&[Vec<T>]>, masks: Option<&[Vec<bool>]>) -> Result<SlideOut<T>> {
        if slide.regions.is_empty() {
            return Err(Error::Data(format!("slide {} has no regions", slide.slide_id)));
        }
        let features = self.feature_vars(g, slide, cache)?;
        let mut regions = Vec::with_capacity(features.len());
        for (k, (r, &f)) in slide.regions.iter().zip(&features).enumerate() {
            let mask = masks.map(|m| m[k].as_slice());
            regions.push(self.aggr.encode_region(g, &self.store, f, &r.positions, &r.ignore(), mask)?);
        }
        let cls: Vec<Var> = regions.iter().map(|r| r.cls).collect();
        let stacked = g.concat_rows(&cls)?;
        let embedding = g.mean_rows(stacked)?;
        Ok(SlideOut {
            embedding,
            regions,
            features,
        })
    }

    /// Class vector and attention of one region given plain features.
    pub fn embed_region(&self, tokens: &RegionTokens<T>) -> Result<(Vec<T>, Vec<T>)> {
        let mut g = Graph::new();
        let f = g.leaf(&tokens.features);
        let out = self
            .aggr
            .encode_region(&mut g, &self.store, f, &tokens.positions, &tokens.ignore, None)?;
        Ok((g.value(out.cls).to_vec(), out.attention))
    }

    /// Mean of the regions' class vectors.
    pub fn embed_slide(&self, regions: &[RegionTokens<T>]) -> Result<Vec<T>> {
        if regions.is_empty() {
            return Err(Error::Data("slide embedding needs at least one region".into()));
        }
        let vecs: Vec<Vec<T>> = regions
            .par_iter()
            .map(|r| self.embed_region(r).map(|(c, _)| c))
            .collect::<Result<_>>()?;
        Ok(mean_vectors(&vecs))
    }

    /// Slide embedding computed from raw patches, regions in parallel.
    pub fn slide_embedding(&self, slide: &SlidePixels) -> Result<(Vec<T>, Vec<Vec<T>>)> {
        if slide.regions.is_empty() {
            return Err(Error::Data(format!("slide {} has no regions", slide.slide_id)));
        }
        let per: Vec<(Vec<T>, Vec<T>)> = slide
            .regions
            .par_iter()
            .map(|r| {
                let one = SlidePixels {
                    slide_id: slide.slide_id.clone(),
                    regions: vec![r.clone()],
                };
                let mut g = Graph::new();
                let out = self.slide_forward(&mut g, &one, None, None)?;
                Ok((g.value(out.regions[0].cls).to_vec(), out.regions[0].attention.clone()))
            })
            .collect::<Result<_>>()?;
        let cls: Vec<Vec<T>> = per.iter().map(|p| p.0.clone()).collect();
        Ok((mean_vectors(&cls), per.into_iter().map(|p| p.1).collect()))
    }

    /// Both heads applied to a plain embedding: `(prob_high, raw score)`.
    pub fn heads(&self, embedding: &[T]) -> Result<(T, T)> {
        let mut g = Graph::new();
        let e = g.constant(vec![1, embedding.len()], embedding.to_vec())?;
        let logit = self.aggr.classifier_head(&mut g, &self.store, e)?;
        let reg = self.aggr.regression_head(&mut g, &self.store, e)?;
        Ok((sigmoid(g.value(logit)[0]), g.value(reg)[0] * T::of(100.0)))
    }

    pub fn predict(&self, slide: &SlidePixels) -> Result<SlidePrediction> {
        let (emb, att) = self.slide_embedding(slide)?;
        let (p, raw) = self.heads(&emb)?;
        Ok(SlidePrediction {
            slide_id: slide.slide_id.clone(),
            prob_high: p.as_f64(),
            score: clamp_score(raw.as_f64()),
            raw_score: raw.as_f64(),
            attention: slide
                .regions
                .iter()
                .zip(att)
                .map(|(r, w)| AttentionMap {
                    origin: r.origin,
                    side: r.side,
                    patch_side: r.patch_side,
                    positions: r.positions.clone(),
                    weights: w.into_iter().map(Scalar::as_f64).collect(),
                })
                .collect(),
        })
    }

    /// Prediction that insists on a classifier-phase model.
    pub fn predict_slide(&self, slide: &SlidePixels) -> Result<SlidePrediction> {
        if self.phase != Phase::Classifier {
            return Err(Error::Version(format!(
                "prediction needs a classifier checkpoint, found phase {}",
                self.phase.token()
            )));
        }
        self.predict(slide)
    }

    fn feature_cache(&self, slides: &[&SlidePixels], frozen: bool) -> Result<Option<Vec<Vec<Vec<T>>>>> {
        if !frozen {
            return Ok(None);
        }
        slides.iter().map(|s| self.region_features(s)).collect::<Result<Vec<_>>>().map(Some)
    }

    /// Generic mini-batch loop. `batch_loss` builds the loss of one batch.
    fn train_loop(
        &mut self,
        n_items: usize,
        opts: &TrainOptions,
        freeze_encoder: bool,
        mut batch_loss: impl FnMut(&Self, &mut Graph<T>, &[usize], &mut ChaCha8Rng) -> Result<Var>,
        monitor: Option<&mut Monitor<'_, T>>,
    ) -> Result<TrainReport> {
        if n_items == 0 {
            return Err(Error::Data("no training slides".into()));
        }
        if opts.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.store.set_trainable(crate::patchnet::PREFIX, !freeze_encoder);
        let result = self.run_steps(n_items, opts, &mut batch_loss, monitor);
        self.store.set_trainable(crate::patchnet::PREFIX, !self.config.patchnet.frozen);
        result
    }

    fn run_steps(
        &mut self,
        n_items: usize,
        opts: &TrainOptions,
        batch_loss: &mut impl FnMut(&Self, &mut Graph<T>, &[usize], &mut ChaCha8Rng) -> Result<Var>,
        monitor: Option<&mut Monitor<'_, T>>,
    ) -> Result<TrainReport> {
        let mut adam = Adam::new(opts.adam, &self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<usize> = Vec::new();
        let mut losses = Vec::with_capacity(opts.steps);
        let mut monitor = monitor;
        for step in 1..=opts.steps {
            let mut batch = Vec::with_capacity(opts.batch_size);
            while batch.len() < opts.batch_size.min(n_items) {
                if order.is_empty() {
                    order = (0..n_items).collect();
                    order.shuffle(&mut rng);
                }
                batch.push(order.pop().unwrap());
            }
            let mut g = Graph::new();
            let loss = batch_loss(self, &mut g, &batch, &mut rng)?;
            let value = g.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss at step {step}")));
            }
            g.backward(loss, &mut self.store)?;
            adam.step(&mut self.store)?;
            losses.push(value.as_f64());
            if let Some(m) = monitor.as_deref_mut() {
                if opts.eval_every > 0 && step % opts.eval_every == 0 && m(step, self)? {
                    return Ok(TrainReport {
                        losses,
                        stopped_at: Some(step),
                    });
                }
            }
        }
        Ok(TrainReport {
            losses,
            stopped_at: None,
        })
    }

    /// Masked feature reconstruction: per region `round(rho * P_valid)`
    /// valid positions are replaced by the mask token and the loss is the
    /// MSE of the reconstruction at those positions only. The patch encoder
    /// stays fixed during this phase; its features are the targets.
    pub fn pretrain_masked(&mut self, slides: &[SlidePixels], mask_fraction: f64, opts: &TrainOptions) -> Result<TrainReport> {
        if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
            return Err(Error::Config(format!("mask fraction {mask_fraction} must lie in (0, 1)")));
        }
        let refs: Vec<&SlidePixels> = slides.iter().collect();
        let cache = self.feature_cache(&refs, true)?;
        let report = self.train_loop(
            slides.len(),
            opts,
            true,
            |m, g, batch, rng| {
                let mut terms = Vec::new();
                for &i in batch {
                    let slide = &slides[i];
                    let masks: Vec<Vec<bool>> = slide
                        .regions
                        .iter()
                        .map(|r| {
                            let valid: Vec<usize> = (0..r.patches.len()).filter(|&k| r.patches[k].is_some()).collect();
                            let mut flags = vec![false; r.patches.len()];
                            if valid.is_empty() {
                                return flags;
                            }
                            let k = mask_count(valid.len(), mask_fraction);
                            for j in index::sample(rng, valid.len(), k) {
                                flags[valid[j]] = true;
                            }
                            flags
                        })
                        .collect();
                    let c = cache.as_ref().map(|c| c[i].as_slice());
                    let out = m.slide_forward(g, slide, c, Some(&masks))?;
                    for ((r, &f), mask) in out.regions.iter().zip(&out.features).zip(&masks) {
                        let preds = m.aggr.reconstruct(g, &m.store, r.tokens)?;
                        let target = g.constant(g.shape(f).to_vec(), g.value(f).to_vec())?;
                        terms.push(masked_mse(g, preds, target, mask)?);
                    }
                }
                mean_scalar(g, &terms)
            },
            None,
        )?;
        self.phase = Phase::Pretrain;
        Ok(report)
    }

    /// Regression on `score / 100` with mean squared error.
    pub fn finetune_regression(
        &mut self,
        slides: &[(&SlidePixels, f64)],
        opts: &TrainOptions,
        monitor: Option<&mut Monitor<'_, T>>,
    ) -> Result<TrainReport> {
        if slides.is_empty() {
            return Err(Error::Data("no labelled slides for regression".into()));
        }
        let refs: Vec<&SlidePixels> = slides.iter().map(|s| s.0).collect();
        let frozen = self.config.patchnet.frozen;
        let cache = self.feature_cache(&refs, frozen)?;
        let report = self.train_loop(
            slides.len(),
            opts,
            frozen,
            |m, g, batch, _| {
                let mut embs = Vec::new();
                let mut targets = Vec::new();
                for &i in batch {
                    let c = cache.as_ref().map(|c| c[i].as_slice());
                    embs.push(m.slide_forward(g, slides[i].0, c, None)?.embedding);
                    targets.push(T::of(slides[i].1 / 100.0));
                }
                let e = g.concat_rows(&embs)?;
                let pred = m.aggr.regression_head(g, &m.store, e)?;
                let t = g.constant(vec![targets.len(), 1], targets)?;
                g.mse_loss(pred, t)
            },
            monitor,
        )?;
        self.phase = Phase::Regression;
        Ok(report)
    }

    /// Weighted binary cross-entropy on High vs Low, `w_High = N_Low / N_High`.
    pub fn finetune_classifier(
        &mut self,
        slides: &[(&SlidePixels, RiskCategory)],
        opts: &TrainOptions,
        monitor: Option<&mut Monitor<'_, T>>,
    ) -> Result<TrainReport> {
        let labels: Vec<RiskCategory> = slides.iter().map(|s| s.1).collect();
        let w_high = T::of(class_weight(&labels)?);
        let refs: Vec<&SlidePixels> = slides.iter().map(|s| s.0).collect();
        let frozen = self.config.patchnet.frozen;
        let cache = self.feature_cache(&refs, frozen)?;
        let report = self.train_loop(
            slides.len(),
            opts,
            frozen,
            |m, g, batch, _| {
                let mut embs = Vec::new();
                let (mut y, mut w) = (Vec::new(), Vec::new());
                for &i in batch {
                    let c = cache.as_ref().map(|c| c[i].as_slice());
                    embs.push(m.slide_forward(g, slides[i].0, c, None)?.embedding);
                    let high = slides[i].1.is_high();
                    y.push(if high { T::one() } else { T::zero() });
                    w.push(if high { w_high } else { T::one() });
                }
                let e = g.concat_rows(&embs)?;
                let logits = m.aggr.classifier_head(g, &m.store, e)?;
                g.bce_with_logits_loss(logits, &y, &w)
            },
            monitor,
        )?;
        self.phase = Phase::Classifier;
        Ok(report)
    }
}

/// `N_Low / N_High`; both classes must be present.
pub fn class_weight(labels: &[RiskCategory]) -> Result<f64> {
    let high = labels.iter().filter(|l| l.is_high()).count();
    let low = labels.len() - high;
    if high == 0 || low == 0 {
        return Err(Error::Data(format!(
            "classifier training needs both classes, got {low} Low and {high} High"
        )));
    }
    Ok(low as f64 / high as f64)
}

fn mean_scalar<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut s = terms[0];
    for &t in &terms[1..] {
        s = g.add(s, t)?;
    }
    Ok(g.scale(s, T::one() / T::from_usize(terms.len()).unwrap()))
}

/// Element-wise mean, summed in a value-sorted order so the result does not
/// depend on the order of `vecs`.
fn mean_vectors<T: Scalar>(vecs: &[Vec<T>]) -> Vec<T> {
    let n = T::from_usize(vecs.len()).unwrap();
    let mut order: Vec<&Vec<T>> = vecs.iter().collect();
    order.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.as_f64().total_cmp(&y.as_f64()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = vec![T::zero(); vecs[0].len()];
    for v in order {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Counts of parameters per top-level name prefix, for logging.
pub fn parameter_summary<T: Scalar>(store: &ParamStore<T>) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for (_, name, t) in store.iter() {
        let top = name.split('.').next().unwrap_or(name).to_string();
        *m.entry(top).or_insert(0) += t.numel();
    }
    m
}

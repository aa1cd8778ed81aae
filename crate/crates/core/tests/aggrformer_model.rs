mod common;

use common::{tiny_config, tiny_slide};
use oncorisk::aggrformer::{masked_mse, OncoModel, Phase, RegionTokens, TrainOptions};
use oncorisk::corpus::RiskCategory;
use oncorisk::diffcore::{AdamConfig, Graph, Tensor};
use oncorisk::evalstat::r_squared;
use oncorisk::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> OncoModel<f64> {
    OncoModel::new(tiny_config(), 7).unwrap()
}

fn tokens(seed: u64, p: usize) -> RegionTokens<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RegionTokens {
        features: Tensor::new(vec![p, 8], (0..p * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        positions: (0..p).collect(),
        ignore: vec![false; p],
    }
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn attention_is_a_distribution() {
    let m = model();
    let (_, att) = m.embed_region(&tokens(1, 4)).unwrap();
    assert!(att.iter().all(|&w| w >= 0.0));
    assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let mut t = tokens(2, 4);
    t.ignore = vec![false, true, false, false];
    let (_, att) = m.embed_region(&t).unwrap();
    assert_eq!(att[1], 0.0);
    assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn identical_tokens_at_one_position_get_uniform_attention() {
    let m = model();
    let row: Vec<f64> = (0..8).map(|i| i as f64 / 10.0).collect();
    let t = RegionTokens {
        features: Tensor::new(vec![4, 8], row.repeat(4)).unwrap(),
        positions: vec![3; 4],
        ignore: vec![false, false, true, false],
    };
    let (_, att) = m.embed_region(&t).unwrap();
    for (k, w) in att.iter().enumerate() {
        let want = if k == 2 { 0.0 } else { 1.0 / 3.0 };
        assert!((w - want).abs() < 1e-12, "{att:?}");
    }
}

#[test]
fn permuting_patches_with_positions_keeps_class_vector() {
    let m = model();
    let t = tokens(3, 4);
    let perm = [2, 0, 3, 1];
    let data = t.features.data();
    let permuted = RegionTokens {
        features: Tensor::new(vec![4, 8], perm.iter().flat_map(|&i| data[i * 8..i * 8 + 8].to_vec()).collect()).unwrap(),
        positions: perm.to_vec(),
        ignore: vec![false; 4],
    };
    let (a, _) = m.embed_region(&t).unwrap();
    let (b, _) = m.embed_region(&permuted).unwrap();
    assert!(max_dev(&a, &b) < 1e-12);
}

#[test]
fn slide_embedding_is_the_mean_of_region_vectors() {
    let m = model();
    let (r1, r2) = (tokens(4, 4), tokens(5, 4));
    let (a, _) = m.embed_region(&r1).unwrap();
    let (b, _) = m.embed_region(&r2).unwrap();
    assert_eq!(m.embed_slide(std::slice::from_ref(&r1)).unwrap(), a);
    assert_eq!(m.embed_slide(&[r1.clone(), r1.clone()]).unwrap(), a);
    let both = m.embed_slide(&[r1.clone(), r2.clone()]).unwrap();
    let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
    assert!(max_dev(&both, &mid) < 1e-12);
    assert_eq!(both, m.embed_slide(&[r2, r1]).unwrap());
    assert!(m.embed_slide(&[]).is_err());
}

#[test]
fn fully_padded_region_is_rejected() {
    let m = model();
    let mut t = tokens(6, 4);
    t.ignore = vec![true; 4];
    assert_eq!(m.embed_region(&t).unwrap_err().to_string(), "empty region");
}

/// The masked loss ignores unmasked rows of both the reconstruction and the
/// target features, and the mask token hides masked inputs.
#[test]
fn masked_loss_has_zero_gradient_at_unmasked_positions() {
    let m = model();
    let t = tokens(8, 4);
    let mask = [true, false, true, false];
    let target = tokens(9, 4).features;
    let loss_of = |feats: &Tensor<f64>, targ: &Tensor<f64>| -> (f64, Graph<f64>, [oncorisk::diffcore::Var; 4]) {
        let mut g = Graph::new();
        let f = g.leaf(&feats.clone().with_grad());
        let tv = g.leaf(&targ.clone().with_grad());
        let out = m.aggr.encode_region(&mut g, &m.store, f, &t.positions, &t.ignore, Some(&mask)).unwrap();
        let preds = m.aggr.reconstruct(&mut g, &m.store, out.tokens).unwrap();
        let loss = masked_mse(&mut g, preds, tv, &mask).unwrap();
        (g.value(loss)[0], g, [f, tv, preds, loss])
    };
    let (_, g, [f, tv, preds, loss]) = loss_of(&t.features, &target);
    let grads = g.backward_grads(loss).unwrap();
    let (gf, gt, gp) = (grads.wrt(f).unwrap(), grads.wrt(tv).unwrap(), grads.wrt(preds).unwrap());
    for (row, &masked) in mask.iter().enumerate() {
        let cols = row * 8..row * 8 + 8;
        if masked {
            assert!(gf[cols.clone()].iter().all(|&v| v == 0.0), "masked inputs are replaced");
            assert!(gt[cols].iter().any(|&v| v != 0.0));
        } else {
            assert!(gt[cols.clone()].iter().all(|&v| v == 0.0));
            assert!(gp[cols].iter().all(|&v| v == 0.0));
        }
    }
    // finite differences agree: perturbing an unmasked target leaves the loss unchanged
    let h = 1e-5;
    for idx in 0..32 {
        let mut plus = target.clone();
        plus.data_mut()[idx] += h;
        let mut minus = target.clone();
        minus.data_mut()[idx] -= h;
        let fd = (loss_of(&t.features, &plus).0 - loss_of(&t.features, &minus).0) / (2.0 * h);
        if !mask[idx / 8] {
            assert_eq!(fd, 0.0);
        } else {
            assert!((fd - gt[idx]).abs() < 1e-6);
        }
    }
}

/// Finite-difference check over sampled entries of every parameter tensor
/// for encoder, transformer and both heads.
#[test]
fn full_stack_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut m = OncoModel::<f64>::new(cfg, 11).unwrap();
    let slide = tiny_slide("s", [150, 60, 120], 2, 1);
    let loss_fn = |m: &OncoModel<f64>| -> (f64, Graph<f64>, oncorisk::diffcore::Var) {
        let mut g = Graph::new();
        let present: Vec<&[u8]> = slide.regions.iter().flat_map(|r| r.patches.iter().flatten().map(Vec::as_slice)).collect();
        let x = g.leaf(&m.patchnet.input_tensor(&present).unwrap());
        let feats = m.patchnet.forward(&mut g, &m.store, x).unwrap();
        let mut cls = Vec::new();
        for k in 0..2 {
            let rows: Vec<usize> = (4 * k..4 * k + 4).collect();
            let f = g.gather_rows(feats, &rows).unwrap();
            let out = m.aggr.encode_region(&mut g, &m.store, f, &[0, 1, 2, 3], &[false; 4], None).unwrap();
            cls.push(out.cls);
        }
        let st = g.concat_rows(&cls).unwrap();
        let emb = g.mean_rows(st).unwrap();
        let reg = m.aggr.regression_head(&mut g, &m.store, emb).unwrap();
        let logit = m.aggr.classifier_head(&mut g, &m.store, emb).unwrap();
        let target = g.constant(vec![1, 1], vec![0.3]).unwrap();
        let l1 = g.mse_loss(reg, target).unwrap();
        let l2 = g.bce_with_logits_loss(logit, &[1.0], &[2.0]).unwrap();
        let loss = g.add(l1, l2).unwrap();
        (g.value(loss)[0], g, loss)
    };
    let (_, g, loss) = loss_fn(&m);
    m.store.zero_grad();
    g.backward(loss, &mut m.store).unwrap();
    let ids: Vec<_> = m.store.ids().collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for id in ids {
        let n = m.store.get(id).numel();
        let analytic = m.store.get(id).grad().unwrap().to_vec();
        for _ in 0..n.min(6) {
            let k = rng.random_range(0..n);
            let orig = m.store.get(id).data()[k];
            m.store.get_mut(id).data_mut()[k] = orig + h;
            let lp = loss_fn(&m).0;
            m.store.get_mut(id).data_mut()[k] = orig - h;
            let lm = loss_fn(&m).0;
            m.store.get_mut(id).data_mut()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(1e-3);
            assert!(err < 1e-4, "{}[{k}]: analytic {} vs numeric {fd}", m.store.name(id), analytic[k]);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4);
}

fn opts(steps: usize, lr: f64, seed: u64) -> TrainOptions {
    TrainOptions {
        steps,
        batch_size: 4,
        adam: AdamConfig { lr, ..AdamConfig::default() },
        seed,
        eval_every: 0,
    }
}

#[test]
fn pretraining_overfits_one_slide_and_is_reproducible() {
    let slides = vec![tiny_slide("s", [160, 70, 130], 2, 3)];
    let mut a = model();
    let ra = a.pretrain_masked(&slides, 0.5, &opts(500, 3e-3, 1)).unwrap();
    let first = ra.losses[0];
    let last = ra.losses[ra.losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    assert_eq!(a.phase, Phase::Pretrain);
    let mut b = model();
    let rb = b.pretrain_masked(&slides, 0.5, &opts(500, 3e-3, 1)).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert!(matches!(b.pretrain_masked(&slides, 1.0, &opts(1, 1e-3, 1)), Err(Error::Config(_))));
}

#[test]
fn regression_overfits_four_slides() {
    let slides: Vec<_> = (0..4)
        .map(|i| tiny_slide(&format!("s{i}"), [60 + 40 * i as u8, 50, 140 - 20 * i as u8], 2, i as u64))
        .collect();
    let scores = [8.0, 22.0, 41.0, 77.0];
    let labelled: Vec<_> = slides.iter().zip(scores).collect();
    let mut m = model();
    m.finetune_regression(&labelled, &opts(400, 1e-2, 2), None).unwrap();
    let preds: Vec<f64> = slides.iter().map(|s| m.predict(s).unwrap().raw_score).collect();
    let r2 = r_squared(&scores, &preds).unwrap();
    assert!(r2 > 0.95, "R² {r2}, preds {preds:?}");
}

#[test]
fn classifier_outputs_probabilities_and_checkpoint_round_trips() {
    let slides: Vec<_> = (0..6)
        .map(|i| tiny_slide(&format!("s{i}"), [80 + 25 * i as u8, 60, 120], 2, 10 + i as u64))
        .collect();
    let labels = [RiskCategory::Low, RiskCategory::Low, RiskCategory::Low, RiskCategory::Low, RiskCategory::High, RiskCategory::High];
    let labelled: Vec<_> = slides.iter().zip(labels).collect();
    let mut m = model();
    assert!(m.predict_slide(&slides[0]).is_err());
    m.finetune_classifier(&labelled, &opts(20, 1e-2, 3), None).unwrap();
    let p = m.predict_slide(&slides[0]).unwrap();
    assert!(p.prob_high > 0.0 && p.prob_high < 1.0);
    assert_eq!(p.prob_high + (1.0 - p.prob_high), 1.0);
    assert_eq!(p, m.predict_slide(&slides[0]).unwrap());
    let mut reordered = slides[0].clone();
    reordered.regions.reverse();
    let q = m.predict_slide(&reordered).unwrap();
    assert_eq!((p.prob_high, p.raw_score), (q.prob_high, q.raw_score));

    let ckpt = m.checkpoint(serde_json::json!({"note": "test"}));
    let bytes = ckpt.to_bytes().unwrap();
    let back = oncorisk::diffcore::Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let restored = OncoModel::from_checkpoint(&back, Some(&tiny_config())).unwrap();
    assert_eq!(restored.predict_slide(&slides[0]).unwrap(), p);

    let mut other = tiny_config();
    other.aggrformer.hidden = 16;
    assert!(matches!(OncoModel::from_checkpoint(&back, Some(&other)), Err(Error::Version(_))));

    let single: Vec<_> = slides.iter().map(|s| (s, RiskCategory::Low)).collect();
    assert!(model().finetune_classifier(&single, &opts(1, 1e-2, 3), None).is_err());
}

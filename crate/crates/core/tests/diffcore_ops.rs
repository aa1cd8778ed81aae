use oncorisk::diffcore::{check_gradients, Conv2dSpec, Graph, ParamStore, Tensor, Var};
use oncorisk::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = g.constant(shape, w).unwrap();
    let m = g.mul(x, c).unwrap();
    g.sum(m)
}

fn assert_grad(name: &str, inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> oncorisk::Result<Var>) {
    let r = check_gradients(inputs, H, build).unwrap();
    assert!(
        r.max_rel_err < TOL,
        "{name}: max relative error {} over {} entries",
        r.max_rel_err,
        r.checked
    );
}

#[test]
fn gradient_check_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..3u64 {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..6));
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        assert_grad("matmul", &[a.clone(), b.clone()], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(probe(g, y, trial))
        });
        let c = rand_tensor(&mut rng, &[m, k]);
        assert_grad("add", &[a.clone(), c.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            Ok(probe(g, y, trial))
        });
        assert_grad("sub_mul", &[a.clone(), c.clone()], |g, v| {
            let s = g.sub(v[0], v[1])?;
            let y = g.mul(s, v[1])?;
            Ok(probe(g, y, trial))
        });
        let row = rand_tensor(&mut rng, &[k]);
        assert_grad("add_row", &[a.clone(), row], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            Ok(probe(g, y, trial))
        });
        let x = rand_tensor(&mut rng, &[m, n]);
        let gamma = rand_tensor(&mut rng, &[n]);
        let beta = rand_tensor(&mut rng, &[n]);
        assert_grad("layer_norm", &[x.clone(), gamma, beta], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            Ok(probe(g, y, trial))
        });
        assert_grad("softmax", &[x.clone()], |g, v| {
            let y = g.softmax(v[0], None)?;
            Ok(probe(g, y, trial))
        });
        let mut mask = vec![false; n];
        mask[0] = true;
        assert_grad("masked_softmax", &[x.clone()], |g, v| {
            let y = g.softmax(v[0], Some(&mask))?;
            Ok(probe(g, y, trial))
        });
        assert_grad("gelu", &[x.clone()], |g, v| {
            let y = g.gelu(v[0]);
            Ok(probe(g, y, trial))
        });
        assert_grad("relu", &[x.clone()], |g, v| {
            let y = g.relu(v[0]);
            Ok(probe(g, y, trial))
        });
        assert_grad("sigmoid_scale", &[x.clone()], |g, v| {
            let s = g.scale(v[0], 1.7);
            let y = g.sigmoid(s);
            Ok(probe(g, y, trial))
        });
        assert_grad("transpose_reshape", &[x.clone()], |g, v| {
            let t = g.transpose(v[0])?;
            let y = g.reshape(t, vec![m * n, 1])?;
            Ok(probe(g, y, trial))
        });
        assert_grad("slice_concat", &[x.clone(), a.clone()], |g, v| {
            let s = g.slice_cols(v[0], 1, n - 1)?;
            let c = g.concat_cols(&[v[0], s])?;
            let r = g.concat_rows(&[v[0], v[0]])?;
            let l = probe(g, c, trial);
            let q = probe(g, r, trial + 7);
            let t = g.add(l, q)?;
            let extra = g.concat_cols(&[v[1], v[1]])?;
            let e = probe(g, extra, trial + 9);
            g.add(t, e)
        });
        let table = rand_tensor(&mut rng, &[5, n]);
        assert_grad("embedding_lookup", &[table], |g, v| {
            let y = g.embedding_lookup(v[0], &[4, 0, 4, 2])?;
            Ok(probe(g, y, trial))
        });
        let fill = rand_tensor(&mut rng, &[1, n]);
        let flags: Vec<bool> = (0..m).map(|i| i % 2 == 0).collect();
        assert_grad("replace_rows", &[x.clone(), fill], |g, v| {
            let y = g.replace_rows(v[0], v[1], &flags)?;
            Ok(probe(g, y, trial))
        });
        assert_grad("mean_rows", &[x.clone()], |g, v| {
            let y = g.mean_rows(v[0])?;
            Ok(probe(g, y, trial))
        });
        let t = rand_tensor(&mut rng, &[m, n]);
        assert_grad("mse_loss", &[x.clone(), t], |g, v| g.mse_loss(v[0], v[1]));
        let logits = rand_tensor(&mut rng, &[m * n]);
        let targets: Vec<f64> = (0..m * n).map(|i| (i % 2) as f64).collect();
        let weights: Vec<f64> = (0..m * n).map(|i| 1.0 + (i % 3) as f64).collect();
        assert_grad("bce_with_logits", &[logits], |g, v| {
            g.bce_with_logits_loss(v[0], &targets, &weights)
        });

        let (nb, c, o, hw) = (2, 2, 3, 6);
        let img = rand_tensor(&mut rng, &[nb, c, hw, hw]);
        let w = rand_tensor(&mut rng, &[o, c, 3, 3]);
        let bias = rand_tensor(&mut rng, &[o]);
        for spec in [
            Conv2dSpec { stride: 1, padding: 1 },
            Conv2dSpec { stride: 2, padding: 0 },
        ] {
            assert_grad("conv2d", &[img.clone(), w.clone(), bias.clone()], |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], spec)?;
                Ok(probe(g, y, trial))
            });
        }
        assert_grad("maxpool2d", &[img.clone()], |g, v| {
            let y = g.maxpool2d(v[0], 2)?;
            Ok(probe(g, y, trial))
        });
        assert_grad("global_avg_pool", &[img.clone()], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            Ok(probe(g, y, trial))
        });
    }
}

#[test]
fn random_three_layer_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[4, 5]);
    let w1 = rand_tensor(&mut rng, &[5, 6]);
    let w2 = rand_tensor(&mut rng, &[6, 6]);
    let w3 = rand_tensor(&mut rng, &[6, 1]);
    assert_grad("mlp", &[x, w1, w2, w3], |g, v| {
        let h1 = g.matmul(v[0], v[1])?;
        let a1 = g.gelu(h1);
        let h2 = g.matmul(a1, v[2])?;
        let a2 = g.sigmoid(h2);
        let h3 = g.matmul(a2, v[3])?;
        let sq = g.mul(h3, h3)?;
        Ok(g.sum(sq))
    });
}

#[test]
fn softmax_rows_sum_to_one_even_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let data: Vec<f64> = (0..40).map(|_| rng.random_range(-1e3..1e3)).collect();
    let x = g.constant(vec![4, 10], data).unwrap();
    let y = g.softmax(x, None).unwrap();
    for row in g.value(y).chunks(10) {
        assert!(row.iter().all(|v| v.is_finite()));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let gamma = g.constant(vec![10], vec![1.0; 10]).unwrap();
    let beta = g.constant(vec![10], vec![0.0; 10]).unwrap();
    let ln = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(g.value(ln).iter().all(|v| v.is_finite()));
}

#[test]
fn identity_cases() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let eye = g.constant(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
    let p = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(p), g.value(a));

    let img: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64).sin()).collect();
    let x = g.constant(vec![2, 3, 4, 4], img.clone()).unwrap();
    // 1x1 all-ones kernel on a single channel is the identity
    let one = g.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let zero = g.constant(vec![1], vec![0.0]).unwrap();
    let single = g.constant(vec![1, 1, 4, 4], img[..16].to_vec()).unwrap();
    let y = g.conv2d(single, one, zero, Conv2dSpec::default()).unwrap();
    assert_eq!(g.value(y), &img[..16]);
    assert!(g.conv2d(x, one, zero, Conv2dSpec::default()).is_err());
}

#[test]
fn backward_of_sum_and_half_square() {
    let mut store = ParamStore::new();
    let id = store.insert("x", Tensor::new(vec![3], vec![0.5, -2.0, 4.0]).unwrap());
    let mut g = Graph::new();
    let x = g.param(&store, id);
    let s = g.sum(x);
    g.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[1.0, 1.0, 1.0]);

    // accumulates without reset
    g.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[2.0, 2.0, 2.0]);
    store.zero_grad();

    let mut g = Graph::new();
    let x = g.param(&store, id);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    g.backward(half, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[0.5, -2.0, 4.0]);
}

#[test]
fn non_scalar_loss_is_a_domain_error() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
    assert!(matches!(g.backward_grads(x), Err(Error::Domain(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    let c = g.constant(vec![3, 2], vec![0.0; 6]).unwrap();
    assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
}

#[test]
fn single_precision_graph_runs() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = g.softmax(x, None).unwrap();
    let s: f32 = g.value(y).iter().sum();
    assert!((s - 1.0).abs() < 1e-6);
}

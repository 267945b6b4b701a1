use super::checkpoint;
use super::*;
use proptest::prelude::*;

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_identity_and_hand_values() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = Tensor::from_rows(&[vec![3.0, -1.0], vec![0.5, 2.0]]).unwrap();
    let mv = g.constant(m.clone());
    let out = g.matmul(eye, mv).unwrap();
    assert_eq!(g.value(out), &m);

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let ones = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let out = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = Sampler::new(7);
    let a = rng.gaussian_tensor(&[3, 4], 1.0);
    let b = rng.gaussian_tensor(&[4, 2], 1.0);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(av, bv).unwrap();
    let oracle = triple_loop(&a, &b);
    for (x, y) in g.value(out).data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
    // transposed operands go through the same strides
    let at = g.transpose(av).unwrap();
    let out_t = g.matmul_ext(at, bv, true, false).unwrap();
    assert!(g.value(out_t).max_abs_diff(g.value(out)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn softmax_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
    let s = g.softmax_rows(x, None).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap());
    let s = g.softmax_rows(x, None).unwrap();
    assert!((g.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-15);

    let mut rng = Sampler::new(3);
    let row = rng.gaussian_vec(9, 2.0);
    let x = g.constant(Tensor::new(vec![1, 9], row.clone()).unwrap());
    let s = g.softmax_rows(x, None).unwrap();
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    for (v, r) in g.value(s).data().iter().zip(&row) {
        assert!((v - r.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_mask_zeroes_entries_and_rejects_full_mask() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 5.0, 2.0], vec![0.0, 0.0, 0.0]]).unwrap());
    let mask = [false, true, false, true, true, true];
    assert!(matches!(
        g.softmax_rows(x, Some(&mask)),
        Err(crate::Error::DegenerateRow { row: 1 })
    ));
    let mask = [false, true, false, true, false, true];
    let s = g.softmax_rows(x, Some(&mask)).unwrap();
    let d = g.value(s).data();
    assert_eq!(d[1], 0.0);
    assert_eq!(d[3], 0.0);
    assert_eq!(d[5], 0.0);
    assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
    assert_eq!(d[4], 1.0);
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let grads = {
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap()
    };
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    let report = check_gradient(&mut store, &[x], 20, 1, |g| {
        let xv = g.param(x);
        let sq = g.mul(xv, xv)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn frozen_parameter_receives_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = store.add("b", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
    store.set_frozen(w, true);
    let f = |g: &mut Graph<'_>| {
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.matmul(x, wv)?;
        let y = g.add_bias(y, bv)?;
        let y = g.gelu(y)?;
        g.sum(y)
    };
    let grads = {
        let mut g = Graph::new(&store);
        let l = f(&mut g).unwrap();
        g.backward(l).unwrap()
    };
    assert!(grads.get(w).is_none());
    assert!(grads.get(b).is_some());
    let before = store.tensor(w).clone();
    let mut opt = Adam::new(0.1);
    opt.step(&mut store, &grads);
    assert_eq!(store.tensor(w), &before);
    let r = check_gradient(&mut store, &[w, b], 10, 2, f).unwrap();
    assert!(r.max_rel_error < 1e-6);
}

/// Random composite exercising most ops on one tape.
fn composite_loss(g: &mut Graph<'_>, ids: &[ParamId]) -> crate::Result<Var> {
    let mut rng = Sampler::new(99);
    let x = g.constant(rng.gaussian_tensor(&[6, 4], 1.0));
    let w = g.param(ids[0]);
    let gain = g.param(ids[1]);
    let bias = g.param(ids[2]);
    let table = g.param(ids[3]);
    let h = g.matmul(x, w)?; // [6, 8]
    let h = g.layernorm(h, gain, bias)?;
    let h = g.silu(h)?;
    let q = g.slice_cols(h, 0, 4)?;
    let kv = g.slice_cols(h, 4, 4)?;
    let att = g.attention(q, kv, kv, 2, 2, true)?; // 2 sequences of 3
    let emb = g.embedding(table, &[1, 0, 2, 2, 1, 0])?; // [6, 4]
    let mixed = g.mul(att, emb)?;
    let both = g.concat_cols(&[mixed, emb])?;
    let pooled = g.mean_groups(both, 3)?; // [2, 8]
    let normed = g.l2_normalize_rows(pooled)?;
    let t = g.transpose(normed)?; // [8, 2]
    let logits = g.matmul_ext(both, t, false, false)?; // [6, 2]
    let logits = g.gelu(logits)?;
    let ce = g.cross_entropy(logits, &[Some(0), Some(1), None, Some(1), Some(0), Some(0)])?;
    let sm = g.softmax_rows(logits, None)?;
    let target = g.constant(Tensor::filled(vec![6, 2], 0.5));
    let m = g.mse(sm, target)?;
    let total = g.add(ce, m)?;
    g.scale(total, 1.5)
}

#[test]
fn composite_graph_passes_gradient_check() {
    let mut store = ParamStore::new();
    let mut rng = Sampler::new(5);
    let ids = vec![
        store.add("w", rng.gaussian_tensor(&[4, 8], 0.5)),
        store.add("gain", rng.uniform_tensor(&[8], 0.5, 1.5)),
        store.add("bias", rng.gaussian_tensor(&[8], 0.1)),
        store.add("table", rng.gaussian_tensor(&[3, 4], 1.0)),
    ];
    let r = check_gradient(&mut store, &ids, 60, 11, |g| composite_loss(g, &ids)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn spatial_ops_pass_gradient_check() {
    let mut store = ParamStore::new();
    let mut rng = Sampler::new(8);
    let x = store.add("x", rng.gaussian_tensor(&[2 * 4 * 4, 3], 1.0));
    let w = store.add("w", rng.gaussian_tensor(&[27, 5], 0.3));
    let gb = store.add("gb", rng.gaussian_tensor(&[2, 5], 0.3));
    let r = check_gradient(&mut store, &[x, w, gb], 60, 4, |g| {
        let dims = SpatialDims { batch: 2, height: 4, width: 4, channels: 3 };
        let xv = g.param(x);
        let cols = g.im2col(xv, dims, 3, 2, 1)?; // -> 2x2x2
        let wv = g.param(w);
        let y = g.matmul(cols, wv)?;
        let gbv = g.param(gb);
        let y = g.add_group_bias(y, gbv, 4)?;
        let d2 = SpatialDims { batch: 2, height: 2, width: 2, channels: 5 };
        let up = g.upsample2(y, d2)?;
        let d4 = SpatialDims { batch: 2, height: 4, width: 4, channels: 5 };
        let pooled = g.avg_pool(up, d4, 2)?;
        let z = g.sub(pooled, y)?;
        let z = g.silu(z)?;
        let z2 = g.gather_rows(up, &[0, 5, 5, 31])?;
        let s1 = g.mean(z)?;
        let z2 = g.mul(z2, z2)?;
        let s2 = g.sum(z2)?;
        g.add(s1, s2)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn cross_attention_gradient_check() {
    let mut store = ParamStore::new();
    let mut rng = Sampler::new(21);
    let q = store.add("q", rng.gaussian_tensor(&[2 * 5, 6], 1.0));
    let kv = store.add("kv", rng.gaussian_tensor(&[2 * 3, 6], 1.0));
    let r = check_gradient(&mut store, &[q, kv], 50, 9, |g| {
        let (qv, kvv) = (g.param(q), g.param(kv));
        let o = g.attention(qv, kvv, kvv, 3, 2, false)?;
        let o = g.mul(o, qv)?;
        g.sum(o)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn attention_rows_are_causal_softmax_rows() {
    let store = ParamStore::new();
    let mut rng = Sampler::new(1);
    let mut g = Graph::new(&store);
    let q = g.constant(rng.gaussian_tensor(&[4, 8], 1.0));
    let k = g.constant(rng.gaussian_tensor(&[4, 8], 1.0));
    let a = g.attention(q, k, k, 2, 1, true).unwrap();
    let p = g.attention_probs(a).unwrap();
    for h in 0..2 {
        for i in 0..4 {
            let row = &p[(h * 4 + i) * 4..(h * 4 + i + 1) * 4];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, v) in row.iter().enumerate() {
                if j > i {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }
}

#[test]
fn adam_is_deterministic_for_a_seed() {
    let run = |seed: u64| {
        let mut store = ParamStore::new();
        let mut rng = Sampler::new(seed);
        let w = store.add("w", rng.gaussian_tensor(&[3, 3], 1.0));
        let mut opt = Adam::new(0.01);
        for _ in 0..20 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.constant(rng.gaussian_tensor(&[2, 3], 1.0));
                let wv = g.param(w);
                let y = g.matmul(x, wv).unwrap();
                let y = g.gelu(y).unwrap();
                let l = g.sum(y).unwrap();
                g.backward(l).unwrap()
            };
            opt.step(&mut store, &grads);
        }
        store.tensor(w).clone()
    };
    let (a, b) = (run(4), run(4));
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(a, run(5));
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    assert!(checkpoint::decode(b"EGL0").is_err());
    let rec = vec![("a".to_string(), Tensor::scalar(1.0))];
    let bytes = checkpoint::encode(&rec);
    assert_eq!(&bytes[..4], b"EGL1");
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 1..4), 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = Sampler::new(seed);
        let records: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("p{i}.w"), rng.gaussian_tensor(s, 1e3)))
            .collect();
        let bytes = checkpoint::encode(&records);
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for ((n1, t1), (n2, t2)) in records.iter().zip(&back) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            prop_assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        prop_assert_eq!(checkpoint::encode(&back), bytes);
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = g.softmax_rows(x, None).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }
}

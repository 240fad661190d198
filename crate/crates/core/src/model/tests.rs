use super::*;
use ndarray::{array, Array2};
use rand::Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Scalar triple loop, written without ndarray linear algebra.
fn naive_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let (n, dk) = q.dim();
    let m = k.nrows();
    let mut out = Array2::zeros((n, v.ncols()));
    for i in 0..n {
        let mut scores = vec![0.0; m];
        for j in 0..m {
            let mut s = 0.0;
            for c in 0..dk {
                s += q[[i, c]] * k[[j, c]];
            }
            scores[j] = s / (dk as f64).sqrt();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in 0..m {
            for c in 0..v.ncols() {
                out[[i, c]] += exps[j] / total * v[[j, c]];
            }
        }
    }
    out
}

fn tiny_config(pe_mode: PeMode) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 8,
        gene_dim: 3,
        dropout_rate: 0.0,
        pe_mode,
        pe_table_size: 4,
        plain_mhsa: false,
    }
}

fn positions(n: usize) -> Vec<SpotPosition> {
    (0..n)
        .map(|i| SpotPosition {
            ordinal: i,
            x: 10.0 * i as f64,
            y: 5.0 + 3.0 * i as f64,
        })
        .collect()
}

#[test]
fn attention_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let q = random_matrix(&mut rng, 3, 4);
        let k = random_matrix(&mut rng, 3, 4);
        let v = random_matrix(&mut rng, 3, 4);
        let (out, map) = attention(&q.view(), &k.view(), &v.view());
        let oracle = naive_attention(&q, &k, &v);
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(map.dim(), (3, 3));
        for row in map.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn single_spot_attention_returns_value_row() {
    let q = array![[0.3, -2.0]];
    let k = array![[1.5, 0.2]];
    let v = array![[4.0, -1.0, 7.0]];
    let (out, _) = attention(&q.view(), &k.view(), &v.view());
    assert_eq!(out, v);
}

#[test]
fn zero_queries_average_values() {
    let q = Array2::zeros((3, 2));
    let k = array![[1.0, 2.0], [3.0, -1.0], [0.0, 5.0]];
    let v = array![[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]];
    let (out, _) = attention(&q.view(), &k.view(), &v.view());
    for row in out.rows() {
        assert!((row[0] - 3.0).abs() < 1e-12);
        assert!((row[1] - 5.0).abs() < 1e-12);
    }
}

#[test]
fn single_identity_head_reduces_to_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_matrix(&mut rng, 5, 6);
    let eye = Array2::eye(6);
    let p = AttentionParams {
        w_q: eye.clone(),
        w_k: eye.clone(),
        w_v: eye.clone(),
        w_o: eye,
    };
    let got = multi_head_attention(&x, &p, 1);
    let (want, _) = attention(&x.view(), &x.view(), &x.view());
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mhsa_preserves_shape_and_permutes_with_rows() {
    let cfg = tiny_config(PeMode::SinusoidalXy);
    let model = HisToSgeModel::new(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_matrix(&mut rng, 6, 16);
    let y = model.mhsa(&x, 0);
    assert_eq!(y.dim(), x.dim());
    assert!(y.iter().all(|v| v.is_finite()));
    let perm = [3usize, 0, 5, 1, 4, 2];
    let xp = x.select(Axis(0), &perm);
    let yp = model.mhsa(&xp, 0);
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..16 {
            assert!((yp[[i, c]] - y[[p, c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_permutation_equivariant() {
    for mode in [PeMode::SinusoidalXy, PeMode::LearnedTable] {
        let mut cfg = tiny_config(mode);
        cfg.pe_table_size = 6;
        let model = HisToSgeModel::new(cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 6, 16);
        let pos = positions(6);
        let out = model.forward(x.view(), &pos).unwrap();
        let perm = [5usize, 2, 0, 4, 1, 3];
        let xp = x.select(Axis(0), &perm);
        let posp: Vec<_> = perm.iter().map(|&i| pos[i]).collect();
        let outp = model.forward(xp.view(), &posp).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for g in 0..3 {
                assert!((outp[[i, g]] - out[[p, g]]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn default_config_shapes() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.d_model, 1029);
    assert_eq!(cfg.d_model % cfg.n_heads, 0);
    let model = HisToSgeModel::new(cfg, 0).unwrap();
    let x = Array2::from_elem((5, 1029), 0.01);
    let pos = positions(5);
    assert_eq!(model.positional_encoding(&pos).unwrap().dim(), (5, 1029));
    assert_eq!(model.forward(x.view(), &pos).unwrap().dim(), (5, 1000));
}

#[test]
fn eight_heads_do_not_divide_1029() {
    let cfg = ModelConfig {
        n_heads: 8,
        ..ModelConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
}

#[test]
fn zeroed_head_gives_zero_predictions() {
    let mut model = HisToSgeModel::new(tiny_config(PeMode::SinusoidalXy), 4).unwrap();
    model.params.head.w2.fill(0.0);
    model.params.head.b2.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = model.forward(random_matrix(&mut rng, 4, 16).view(), &positions(4)).unwrap();
    assert!(out.iter().all(|v| *v == 0.0));
}

#[test]
fn duplicate_spot_predicts_identically() {
    let model = HisToSgeModel::new(tiny_config(PeMode::SinusoidalXy), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut x = random_matrix(&mut rng, 4, 16);
    let row = x.row(1).to_owned();
    x.row_mut(3).assign(&row);
    let mut pos = positions(4);
    pos[3] = SpotPosition { ordinal: 3, ..pos[1] };
    let out = model.forward(x.view(), &pos).unwrap();
    for g in 0..3 {
        assert!((out[[1, g]] - out[[3, g]]).abs() < 1e-12);
    }
}

#[test]
fn sinusoidal_encoding_examples() {
    let a = SpotPosition { ordinal: 0, x: 12.0, y: 40.0 };
    let b = SpotPosition { ordinal: 1, x: 12.0, y: 40.0 };
    let c = SpotPosition { ordinal: 2, x: 13.0, y: 40.0 };
    let pe = sinusoidal_xy(&[a, b, c], 1029);
    assert_eq!(pe.row(0), pe.row(1));
    assert_ne!(pe.row(0), pe.row(2));
    assert!(pe.iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn learned_table_rejects_unknown_ordinal() {
    let model = HisToSgeModel::new(tiny_config(PeMode::LearnedTable), 1).unwrap();
    let pos = [SpotPosition { ordinal: 4, x: 0.0, y: 0.0 }];
    assert!(matches!(model.positional_encoding(&pos), Err(Error::Encoding(_))));
}

#[test]
fn loss_examples() {
    let a = array![[0.5, 1.0], [2.0, -1.0]];
    assert_eq!(loss(&a, &a).unwrap(), 0.0);
    assert_eq!(loss(&array![[0.0, 0.0]], &array![[1.0, 1.0]]).unwrap(), 1.0);
    let b = array![[1.5, 0.0], [2.0, 3.0]];
    assert_eq!(loss(&a, &b).unwrap(), loss(&b, &a).unwrap());
    assert!(loss(&a, &array![[1.0]]).is_err());
}

fn fd_loss(model: &HisToSgeModel, x: &Array2<f64>, pos: &[SpotPosition], y: &Array2<f64>) -> f64 {
    loss(&model.forward(x.view(), pos).unwrap(), y).unwrap()
}

fn max_grad_error(mode: PeMode, plain: bool) -> f64 {
    let mut cfg = tiny_config(mode);
    cfg.plain_mhsa = plain;
    let model = HisToSgeModel::new(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random_matrix(&mut rng, 4, 16);
    let y = random_matrix(&mut rng, 4, 3);
    let pos = positions(4);
    let (_, grads) = model.loss_and_grad(x.view(), &pos, y.view(), None).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.iter().cloned().collect()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let n_tensors = analytic.len();
    for ti in 0..n_tensors {
        for ei in 0..analytic[ti].len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            *plus.params.tensors_mut()[ti].1.iter_mut().nth(ei).unwrap() += h;
            *minus.params.tensors_mut()[ti].1.iter_mut().nth(ei).unwrap() -= h;
            let numeric = (fd_loss(&plus, &x, &pos, &y) - fd_loss(&minus, &x, &pos, &y)) / (2.0 * h);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    assert!(max_grad_error(PeMode::LearnedTable, false) <= 1e-4);
    assert!(max_grad_error(PeMode::SinusoidalXy, false) <= 1e-4);
    assert!(max_grad_error(PeMode::SinusoidalXy, true) <= 1e-4);
}

#[test]
fn dropout_only_with_rng() {
    let mut cfg = tiny_config(PeMode::SinusoidalXy);
    cfg.dropout_rate = 0.5;
    let model = HisToSgeModel::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_matrix(&mut rng, 4, 16);
    let pos = positions(4);
    let a = model.forward(x.view(), &pos).unwrap();
    let b = model.forward(x.view(), &pos).unwrap();
    assert_eq!(a, b);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (c, _) = model.forward_cached(x.view(), &pos, Some(&mut r)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn checkpoint_roundtrip_is_f32_exact() {
    let mut model = HisToSgeModel::new(tiny_config(PeMode::LearnedTable), 3).unwrap();
    for (_, mut t) in model.params.tensors_mut() {
        t.mapv_inplace(|v| v as f32 as f64);
    }
    let ckpt = Checkpoint {
        model,
        meta: CheckpointMeta {
            step: 12,
            epoch: 3,
            gene_names: vec!["a".into(), "b".into(), "c".into()],
            ..Default::default()
        },
    };
    let mut buf = Vec::new();
    write_checkpoint(&ckpt, &mut buf).unwrap();
    let back = read_checkpoint(&buf).unwrap();
    assert_eq!(back, ckpt);
    let mut buf2 = Vec::new();
    write_checkpoint(&back, &mut buf2).unwrap();
    assert_eq!(buf, buf2);
}

#[test]
fn checkpoint_rejects_future_version_and_tampering() {
    let ckpt = Checkpoint {
        model: HisToSgeModel::new(tiny_config(PeMode::SinusoidalXy), 3).unwrap(),
        meta: CheckpointMeta::default(),
    };
    let mut buf = Vec::new();
    write_checkpoint(&ckpt, &mut buf).unwrap();
    let mut future = buf.clone();
    future[8..12].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(read_checkpoint(&future), Err(Error::Incompatible(_))));
    let mut truncated = buf.clone();
    truncated.truncate(buf.len() - 4);
    assert!(matches!(read_checkpoint(&truncated), Err(Error::Incompatible(_))));
}

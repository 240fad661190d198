//! End-to-end acceptance checks. Run with `cargo test --test acceptance`.
//!
//! Prints one PASS/FAIL line per criterion and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use histosge::cli::{run, FINAL_CHECKPOINT};
use histosge::dataset::{load_dataset, save_dataset, split_spots, Spot, StDataset};
use histosge::extractors::{deterministic_fallback_extract, FallbackExtractor, FeatureExtractor, EXTRA_FEATURES};
use histosge::metrics::{ari, evaluate, kmeans_domains, mae, mse};
use histosge::model::{attention, loss, HisToSgeModel, ModelConfig, PeMode, SpotPosition};
use histosge::preprocess::PatchTensor;
use histosge::superres::{construct_unmeasured, scheme_8x, upsample_spots};
use histosge::synthbench::{generate, true_expression_matrix, SynthConfig};
use histosge::trainer::{predict, train, PredictConfig, TrainConfig};
use histosge::Result;
use image::{Rgb, RgbImage};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-2.0..2.0))
}

fn oracle_pcc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        syy += y[i] * y[i];
        sxy += x[i] * y[i];
    }
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn oracle_ari(a: &[usize], b: &[usize]) -> f64 {
    let (mut ss, mut sd, mut ds, mut dd) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    let den = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    if den == 0.0 {
        1.0
    } else {
        2.0 * (ss * dd - sd * ds) / den
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let obs = random_matrix(&mut rng, 10, 10);
        let pred = random_matrix(&mut rng, 10, 10);
        let report = evaluate(&obs, &pred).map_err(|e| e.to_string())?;
        let mut pccs = Vec::new();
        for g in 0..10 {
            let o: Vec<f64> = obs.column(g).to_vec();
            let p: Vec<f64> = pred.column(g).to_vec();
            let want = oracle_pcc(&o, &p);
            pccs.push(want);
            worst = worst.max((report.per_gene_pcc[g].unwrap() - want).abs());
        }
        worst = worst.max((report.mean_pcc - pccs.iter().sum::<f64>() / 10.0).abs());
        let (mut sq, mut ab) = (0.0, 0.0);
        for i in 0..10 {
            for j in 0..10 {
                let d = obs[[i, j]] - pred[[i, j]];
                sq += d * d;
                ab += d.abs();
            }
        }
        worst = worst.max((mse(&obs, &pred).unwrap() - sq / 100.0).abs());
        worst = worst.max((mae(&obs, &pred).unwrap() - ab / 100.0).abs());
        worst = worst.max((report.mse - sq / 100.0).abs());
        worst = worst.max((report.mae - ab / 100.0).abs());
        let k1 = rng.random_range(1..6);
        let k2 = rng.random_range(1..6);
        let a: Vec<usize> = (0..100).map(|_| rng.random_range(0..k1)).collect();
        let b: Vec<usize> = (0..100).map(|_| rng.random_range(0..k2)).collect();
        worst = worst.max((ari(&a, &b).unwrap() - oracle_ari(&a, &b)).abs());
        if ari(&a, &a).unwrap() != 1.0 {
            return Err("ARI of identical partitions is not exactly 1".into());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-10 && secs < 10.0, format!("max abs diff {worst:.2e}, {secs:.2}s"))
}

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut row_err: f64 = 0.0;
    for _ in 0..50 {
        let q = random_matrix(&mut rng, 3, 4);
        let k = random_matrix(&mut rng, 3, 4);
        let v = random_matrix(&mut rng, 3, 4);
        let (out, map) = attention(&q.view(), &k.view(), &v.view());
        if map.dim() != (3, 3) {
            return Err(format!("attention map shape {:?}", map.dim()));
        }
        for i in 0..3 {
            let mut scores = [0.0; 3];
            for j in 0..3 {
                let mut dot = 0.0;
                for c in 0..4 {
                    dot += q[[i, c]] * k[[j, c]];
                }
                scores[j] = dot / 2.0;
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..4 {
                let mut want = 0.0;
                for j in 0..3 {
                    want += e[j] / z * v[[j, c]];
                }
                worst = worst.max((out[[i, c]] - want).abs());
            }
            row_err = row_err.max((map.row(i).sum() - 1.0).abs());
        }
    }
    check(
        worst <= 1e-10 && row_err <= 1e-6,
        format!("max abs diff {worst:.2e}, row-sum error {row_err:.2e}"),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 8,
        gene_dim: 3,
        dropout_rate: 0.0,
        pe_mode: PeMode::SinusoidalXy,
        pe_table_size: 0,
        plain_mhsa: false,
    };
    let model = HisToSgeModel::new(cfg, 31).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = random_matrix(&mut rng, 4, 16);
    let y = random_matrix(&mut rng, 4, 3);
    let pos: Vec<SpotPosition> = (0..4)
        .map(|i| SpotPosition {
            ordinal: i,
            x: 30.0 + 60.0 * i as f64,
            y: 45.0 - 7.0 * i as f64,
        })
        .collect();
    let (_, grads) = model.loss_and_grad(x.view(), &pos, y.view(), None).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.iter().cloned().collect()).collect();
    let f = |m: &HisToSgeModel| loss(&m.forward(x.view(), &pos).unwrap(), &y).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (ti, tensor) in analytic.iter().enumerate() {
        for (ei, &a) in tensor.iter().enumerate() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            *plus.params.tensors_mut()[ti].1.iter_mut().nth(ei).unwrap() += h;
            *minus.params.tensors_mut()[ti].1.iter_mut().nth(ei).unwrap() -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
            count += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-4 && secs < 60.0,
        format!("{count} parameters, max relative error {worst:.2e}, {secs:.2}s"),
    )
}

/// Leading channels of the fallback embedding, small enough for a 16-wide model.
struct TruncatedExtractor;

impl FeatureExtractor for TruncatedExtractor {
    fn name(&self) -> &str {
        "truncated-fallback"
    }

    fn embed_dim(&self) -> usize {
        11
    }

    fn extract(&self, patch: &PatchTensor) -> Result<Vec<f64>> {
        Ok(deterministic_fallback_extract(patch)[..11].to_vec())
    }
}

fn overfit_smoke() -> Outcome {
    let synth = SynthConfig {
        grid_rows: 2,
        grid_cols: 4,
        n_genes: 5,
        seed: 5,
        ..Default::default()
    };
    let (ds, _) = generate(&synth).map_err(|e| e.to_string())?;
    let mcfg = ModelConfig {
        d_model: 11 + EXTRA_FEATURES,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        gene_dim: 5,
        dropout_rate: 0.0,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        epochs: 2000,
        seed: 5,
        ..Default::default()
    };
    let (model, report) = train(&ds, &TruncatedExtractor, &mcfg, &tcfg).map_err(|e| e.to_string())?;
    let last = *report.loss_trace.last().unwrap();
    let pred = predict(&model, &ds, ds.spots(), &TruncatedExtractor, &PredictConfig::default()).unwrap();
    let r = evaluate(ds.expression(), &pred).map_err(|e| e.to_string())?;
    let min_pcc = r.per_gene_pcc.iter().map(|p| p.unwrap_or(f64::NAN)).fold(f64::INFINITY, f64::min);
    check(
        report.steps <= 2000 && last < 1e-3 && min_pcc >= 0.99,
        format!("{} steps, final loss {last:.2e}, min per-gene PCC {min_pcc:.4}", report.steps),
    )
}

fn geometry() -> Outcome {
    let r = 20.0;
    let scheme = scheme_8x(r);
    let half = r / 2.0;
    let diag = r / (2.0 * 2f64.sqrt());
    let want = [
        (half, 0.0),
        (half, PI),
        (half, PI / 2.0),
        (diag, PI / 4.0),
        (diag, 3.0 * PI / 4.0),
        (diag, 5.0 * PI / 4.0),
        (diag, 7.0 * PI / 4.0),
    ];
    if scheme.translations.len() != 7 {
        return Err(format!("{} translations", scheme.translations.len()));
    }
    let offsets = scheme.offsets();
    let mut worst: f64 = 0.0;
    for &(wr, wt) in &want {
        let (wx, wy) = (wr * wt.cos(), wr * wt.sin());
        let best = offsets
            .iter()
            .map(|&(x, y)| (x - wx).abs().max((y - wy).abs()))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    let (dx, dy) = scheme.offsets()[1];
    worst = worst.max((dx - 5.0).abs()).max((dy - 5.0).abs());

    let pitch = 8u32;
    let mut spots = Vec::new();
    for row in 0..5u32 {
        for col in 0..5u32 {
            spots.push(Spot::new(format!("s{row}{col}"), 4 + col * pitch, 4 + row * pitch));
        }
    }
    let bounds = (5 * pitch, 5 * pitch);
    let scheme = scheme_8x(pitch as f64);
    let got = construct_unmeasured(&spots, &scheme, bounds);
    let mut kept: Vec<(i64, i64)> = spots.iter().map(|s| (s.x_px as i64, s.y_px as i64)).collect();
    let mut expected = Vec::new();
    for s in &spots {
        for (k, &(r, t)) in scheme.translations.iter().enumerate() {
            let x = (s.x_px as f64 + r * t.cos()).round() as i64;
            let y = (s.y_px as f64 + r * t.sin()).round() as i64;
            if x < 0 || y < 0 || x >= bounds.0 as i64 || y >= bounds.1 as i64 {
                continue;
            }
            if kept.iter().any(|&(a, b)| (((a - x).pow(2) + (b - y).pow(2)) as f64).sqrt() <= 1.0) {
                continue;
            }
            kept.push((x, y));
            expected.push((format!("{}#u{k}", s.spot_id), x as u32, y as u32));
        }
    }
    let got: Vec<(String, u32, u32)> = got.into_iter().map(|s| (s.spot_id, s.x_px, s.y_px)).collect();
    check(
        worst <= 1e-9 && got == expected,
        format!(
            "offset error {worst:.2e}; 5x5 grid: {} constructed, brute force {}, identical {}",
            got.len(),
            expected.len(),
            got == expected
        ),
    )
}

struct Trained {
    ds: StDataset,
    truth: histosge::synthbench::TruthDescriptor,
    model: HisToSgeModel,
    train_secs: f64,
}

fn train_synthetic() -> std::result::Result<Trained, String> {
    let (ds, truth) = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let (tr, _) = split_spots(&ds, 0.5, 0).map_err(|e| e.to_string())?;
    let mcfg = ModelConfig {
        n_layers: 1,
        d_ff: 128,
        gene_dim: ds.n_genes(),
        ..Default::default()
    };
    let tcfg = TrainConfig {
        epochs: 200,
        seed: 0,
        ..Default::default()
    };
    let start = Instant::now();
    let (model, _) = train(&tr, &FallbackExtractor, &mcfg, &tcfg).map_err(|e| e.to_string())?;
    Ok(Trained {
        ds,
        truth,
        model,
        train_secs: start.elapsed().as_secs_f64(),
    })
}

fn synthetic_recovery(t: &Trained) -> Outcome {
    let start = Instant::now();
    let (tr, te) = split_spots(&t.ds, 0.5, 0).map_err(|e| e.to_string())?;
    let pred = predict(&t.model, &te, te.spots(), &FallbackExtractor, &PredictConfig::default())
        .map_err(|e| e.to_string())?;
    let r = evaluate(te.expression(), &pred).map_err(|e| e.to_string())?;
    let mean = tr.expression().mean_axis(Axis(0)).unwrap();
    let baseline = Array2::from_shape_fn(te.expression().dim(), |(_, g)| mean[g]);
    let base_mse = mse(te.expression(), &baseline).unwrap();
    let secs = t.train_secs + start.elapsed().as_secs_f64();
    check(
        r.mean_pcc >= 0.80 && r.mse <= 0.5 * base_mse && secs < 600.0,
        format!(
            "{} held-out spots, PCC {:.4}, MSE {:.4} vs mean baseline {:.4}, {secs:.1}s",
            te.n_spots(),
            r.mean_pcc,
            r.mse,
            base_mse
        ),
    )
}

fn superres_recovery(t: &Trained) -> Outcome {
    let img = t.ds.image();
    let (_, all) = upsample_spots(t.ds.spots(), 8, (img.width(), img.height())).map_err(|e| e.to_string())?;
    let constructed: Vec<Spot> = all.into_iter().filter(|s| !s.measured).collect();
    let pred = predict(&t.model, &t.ds, &constructed, &FallbackExtractor, &PredictConfig::default())
        .map_err(|e| e.to_string())?;
    let truth = true_expression_matrix(&t.truth, &constructed).map_err(|e| e.to_string())?;
    let r = evaluate(&truth, &pred).map_err(|e| e.to_string())?;
    let labels = kmeans_domains(&pred, 4, 0).map_err(|e| e.to_string())?;
    let classes: Vec<usize> = constructed
        .iter()
        .map(|s| t.truth.class_at(s.x_px, s.y_px).unwrap())
        .collect();
    let score = ari(&labels, &classes).unwrap();
    check(
        r.mean_pcc >= 0.75 && score >= 0.8,
        format!("{} constructed spots, PCC {:.4}, k-means ARI {score:.4}", constructed.len(), r.mean_pcc),
    )
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["histosge"];
    argv.extend_from_slice(args);
    run(argv)
}

fn determinism() -> Outcome {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let p = |x: &Path| x.display().to_string();
    let ds = tmp.path().join("synth");
    let code = cli(&["synth", "--out", &p(&ds), "--rows", "4", "--cols", "4", "--genes", "8", "--seed", "9"]);
    if code != 0 {
        return Err(format!("synth exited {code}"));
    }
    let cfg = tmp.path().join("config.toml");
    fs::write(&cfg, "[model]\nn_layers = 1\nd_ff = 32\n[train]\nepochs = 20\nbatch_size = 8\n").unwrap();
    let mut ckpts = Vec::new();
    for run_name in ["a", "b"] {
        let out = tmp.path().join(run_name);
        let code = cli(&["train", "--dataset", &p(&ds), "--out", &p(&out), "--config", &p(&cfg), "--seed", "11"]);
        if code != 0 {
            return Err(format!("train exited {code}"));
        }
        ckpts.push(fs::read(out.join(FINAL_CHECKPOINT)).unwrap());
    }
    let mut plots = Vec::new();
    for name in ["a.png", "b.png"] {
        let out = tmp.path().join(name);
        let code = cli(&["plot", "--dataset", &p(&ds), "--gene", "gene_003", "--out", &p(&out)]);
        if code != 0 {
            return Err(format!("plot exited {code}"));
        }
        plots.push(fs::read(out).unwrap());
    }
    check(
        ckpts[0] == ckpts[1] && plots[0] == plots[1],
        format!(
            "checkpoints identical {} ({} bytes), plots identical {}",
            ckpts[0] == ckpts[1],
            ckpts[0].len(),
            plots[0] == plots[1]
        ),
    )
}

fn random_dataset(rng: &mut ChaCha8Rng, i: usize) -> StDataset {
    let (w, h) = (rng.random_range(8..64u32), rng.random_range(8..64u32));
    let img = RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
    let n = rng.random_range(1..30usize);
    let g = rng.random_range(1..12usize);
    let mut seen = std::collections::HashSet::new();
    let mut spots = Vec::new();
    while spots.len() < n {
        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        if seen.insert((x, y)) {
            spots.push(Spot::new(format!("spot-{i}-{}", spots.len()), x, y));
        }
    }
    let expr = Array2::from_shape_simple_fn((n, g), || {
        if rng.random_bool(0.3) {
            0.0
        } else {
            rng.random_range(0.0..1.0f64) * 10f64.powi(rng.random_range(-6..7))
        }
    });
    let genes: Vec<String> = (0..g).map(|j| format!("G{j}_{}", rng.random_range(0..1000))).collect();
    let annotations = rng.random_bool(0.5).then(|| {
        spots
            .iter()
            .map(|s| (s.spot_id.clone(), format!("layer {}", rng.random_range(1..7))))
            .collect::<BTreeMap<_, _>>()
    });
    StDataset::new(format!("slice_{i}"), Arc::new(img), spots, expr, genes, annotations).unwrap()
}

fn round_trip() -> Outcome {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let ds = random_dataset(&mut rng, i);
        let dir = tmp.path().join(format!("ds{i}"));
        save_dataset(&ds, &dir).map_err(|e| e.to_string())?;
        let back = load_dataset(&dir).map_err(|e| e.to_string())?;
        if back.spots() != ds.spots()
            || back.gene_names() != ds.gene_names()
            || back.slice_id() != ds.slice_id()
            || back.annotations() != ds.annotations()
            || back.image() != ds.image()
            || back.expression().dim() != ds.expression().dim()
        {
            return Err(format!("dataset {i} changed in a round trip"));
        }
        for (a, b) in ds.expression().iter().zip(back.expression()) {
            let rel = if *a == 0.0 { b.abs() } else { ((a - b) / a).abs() };
            worst = worst.max(rel);
        }
    }
    check(worst <= 1e-12, format!("50 datasets, max relative expression error {worst:.2e}"))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail}");
            }
        }
    };
    report(1, "metric oracles", metric_oracles());
    report(2, "attention oracle", attention_oracle());
    report(3, "gradient check", gradient_check());
    report(4, "overfit smoke", overfit_smoke());
    report(5, "geometry", geometry());
    match train_synthetic() {
        Ok(t) => {
            report(6, "synthetic recovery", synthetic_recovery(&t));
            report(7, "super-resolution recovery", superres_recovery(&t));
        }
        Err(e) => {
            report(6, "synthetic recovery", Err(e.clone()));
            report(7, "super-resolution recovery", Err(e));
        }
    }
    report(8, "determinism", determinism());
    report(9, "dataset round trip", round_trip());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

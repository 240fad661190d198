//! Prediction metrics, adjusted Rand index and k-means spatial domains.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-4;
pub const KMEANS_N_INIT: usize = 10;
pub const PCA_COMPONENTS: usize = 50;

fn pcc_view(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!("pcc of lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Contract("pcc needs at least 2 observations".into()));
    }
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation: covariance over the product of standard deviations.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    pcc_view(ArrayView1::from(x), ArrayView1::from(y))
}

fn check_shapes(obs: &Array2<f64>, pred: &Array2<f64>) -> Result<()> {
    if obs.dim() != pred.dim() {
        return Err(Error::Contract(format!(
            "observed {:?} and predicted {:?} differ in shape",
            obs.dim(),
            pred.dim()
        )));
    }
    if obs.is_empty() {
        return Err(Error::Contract("empty matrices".into()));
    }
    Ok(())
}

pub fn mse(obs: &Array2<f64>, pred: &Array2<f64>) -> Result<f64> {
    check_shapes(obs, pred)?;
    Ok(obs.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / obs.len() as f64)
}

pub fn mae(obs: &Array2<f64>, pred: &Array2<f64>) -> Result<f64> {
    check_shapes(obs, pred)?;
    Ok(obs.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / obs.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PccAxis {
    /// One correlation per gene, across spots.
    #[default]
    Gene,
    /// One correlation per spot, across genes.
    Spot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` marks genes with zero variance in either matrix.
    pub per_gene_pcc: Vec<Option<f64>>,
    /// Mean over the defined correlations along `pcc_axis`.
    pub mean_pcc: f64,
    pub mse: f64,
    pub mae: f64,
    pub n_spots: usize,
    pub n_genes: usize,
    /// Correlations excluded from `mean_pcc` for being undefined.
    pub n_undefined: usize,
    pub pcc_axis: PccAxis,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gene_names: Vec<String>,
}

impl MetricsReport {
    pub fn with_gene_names(mut self, names: &[String]) -> Self {
        self.gene_names = names.to_vec();
        self
    }

    fn gene_label(&self, i: usize) -> String {
        self.gene_names.get(i).cloned().unwrap_or_else(|| format!("gene_{i}"))
    }

    /// Genes with defined PCC, best first; ties keep column order.
    pub fn ranked_genes(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .per_gene_pcc
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (i, p)))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().map(|(i, p)| (self.gene_label(i), p)).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let axis = match self.pcc_axis {
            PccAxis::Gene => "gene",
            PccAxis::Spot => "spot",
        };
        writeln!(s, "{:<12} {:>14}", "metric", "value").unwrap();
        writeln!(s, "{:<12} {:>14.6}", "mean_pcc", self.mean_pcc).unwrap();
        writeln!(s, "{:<12} {:>14.6}", "mse", self.mse).unwrap();
        writeln!(s, "{:<12} {:>14.6}", "mae", self.mae).unwrap();
        writeln!(s, "{:<12} {:>14}", "n_spots", self.n_spots).unwrap();
        writeln!(s, "{:<12} {:>14}", "n_genes", self.n_genes).unwrap();
        writeln!(s, "{:<12} {:>14}", "n_undefined", self.n_undefined).unwrap();
        writeln!(s, "{:<12} {:>14}", "pcc_axis", axis).unwrap();
        s
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let axis = match self.pcc_axis {
            PccAxis::Gene => "gene",
            PccAxis::Spot => "spot",
        };
        format!(
            "metric,value\nmean_pcc,{}\nmse,{}\nmae,{}\nn_spots,{}\nn_genes,{}\nn_undefined,{}\npcc_axis,{}\n",
            self.mean_pcc, self.mse, self.mae, self.n_spots, self.n_genes, self.n_undefined, axis
        )
    }

    /// `gene,pcc` rows in column order; undefined entries are empty.
    pub fn per_gene_csv(&self) -> String {
        let mut s = String::from("gene,pcc\n");
        for (i, p) in self.per_gene_pcc.iter().enumerate() {
            match p {
                Some(p) => writeln!(s, "{},{}", self.gene_label(i), p).unwrap(),
                None => writeln!(s, "{},", self.gene_label(i)).unwrap(),
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate(obs: &Array2<f64>, pred: &Array2<f64>) -> Result<MetricsReport> {
    evaluate_with(obs, pred, PccAxis::Gene)
}

pub fn evaluate_with(obs: &Array2<f64>, pred: &Array2<f64>, axis: PccAxis) -> Result<MetricsReport> {
    check_shapes(obs, pred)?;
    let corr = |ax: Axis| -> Result<Vec<Option<f64>>> {
        obs.axis_iter(ax)
            .zip(pred.axis_iter(ax))
            .map(|(a, b)| match pcc_view(a, b) {
                Ok(r) => Ok(Some(r)),
                Err(Error::UndefinedCorrelation) => Ok(None),
                Err(e) => Err(e),
            })
            .collect()
    };
    let per_gene = if obs.nrows() >= 2 {
        corr(Axis(1))?
    } else {
        vec![None; obs.ncols()]
    };
    let along = match axis {
        PccAxis::Gene => per_gene.clone(),
        PccAxis::Spot if obs.ncols() >= 2 => corr(Axis(0))?,
        PccAxis::Spot => vec![None; obs.nrows()],
    };
    let defined: Vec<f64> = along.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Evaluation(format!(
            "PCC is undefined for all {} {}",
            along.len(),
            if axis == PccAxis::Gene { "genes" } else { "spots" }
        )));
    }
    Ok(MetricsReport {
        mean_pcc: defined.iter().sum::<f64>() / defined.len() as f64,
        n_undefined: along.len() - defined.len(),
        per_gene_pcc: per_gene,
        mse: mse(obs, pred)?,
        mae: mae(obs, pred)?,
        n_spots: obs.nrows(),
        n_genes: obs.ncols(),
        pcc_axis: axis,
        gene_names: Vec::new(),
    })
}

fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index from the pair-counting contingency table.
///
/// When the expected and maximum index coincide (e.g. both partitions are a
/// single cluster) the result is 1.0.
pub fn ari<A: Eq + Hash, B: Eq + Hash>(labels_a: &[A], labels_b: &[B]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::Contract(format!(
            "label lists have lengths {} and {}",
            labels_a.len(),
            labels_b.len()
        )));
    }
    let n = labels_a.len();
    if n < 2 {
        return Err(Error::Contract("ARI needs at least 2 labels".into()));
    }
    let mut table: HashMap<(&A, &B), u64> = HashMap::new();
    let mut rows: HashMap<&A, u64> = HashMap::new();
    let mut cols: HashMap<&B, u64> = HashMap::new();
    for (a, b) in labels_a.iter().zip(labels_b) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c as f64)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c as f64)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c as f64)).sum();
    let expected = sa * sb / choose2(n as f64);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Principal component scores (`n x min(n_components, n, d)`), signs fixed so
/// each column's largest-magnitude entry is positive.
pub fn pca_scores(x: &Array2<f64>, n_components: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let xc = x - &mean.insert_axis(Axis(0));
    let k = n_components.min(n).min(d);
    let m = DMatrix::from_row_iterator(n, d, xc.iter().copied());
    let mut scores = Array2::zeros((n, k));
    if d <= n {
        let eig = SymmetricEigen::new(m.transpose() * &m);
        let order = descending(eig.eigenvalues.as_slice());
        for (c, &j) in order.iter().take(k).enumerate() {
            let v = eig.eigenvectors.column(j);
            for i in 0..n {
                scores[[i, c]] = (0..d).map(|t| m[(i, t)] * v[t]).sum();
            }
        }
    } else {
        let eig = SymmetricEigen::new(&m * m.transpose());
        let order = descending(eig.eigenvalues.as_slice());
        for (c, &j) in order.iter().take(k).enumerate() {
            let s = eig.eigenvalues[j].max(0.0).sqrt();
            let u = eig.eigenvectors.column(j);
            for i in 0..n {
                scores[[i, c]] = u[i] * s;
            }
        }
    }
    for mut col in scores.columns_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    scores
}

fn descending(vals: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    idx
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, x.row(first))).collect();
    let mut chosen = vec![first];
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        centers.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, x.row(pick)));
        }
    }
    centers
}

fn assign(x: &Array2<f64>, centers: &Array2<f64>, labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, r) in x.rows().into_iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (c, cr) in centers.rows().into_iter().enumerate() {
            let d = sq_dist(r, cr);
            if d < best.0 {
                best = (d, c);
            }
        }
        labels[i] = best.1;
        inertia += best.0;
    }
    inertia
}

fn lloyd(x: &Array2<f64>, mut centers: Array2<f64>) -> (Vec<usize>, f64) {
    let (n, d) = x.dim();
    let k = centers.nrows();
    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITER {
        assign(x, &centers, &mut labels);
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, r) in x.rows().into_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &r);
            counts[labels[i]] += 1;
        }
        let mut new = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                new.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // move an empty cluster onto the point worst served by its centre
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(x.row(a), centers.row(labels[a]))
                            .total_cmp(&sq_dist(x.row(b), centers.row(labels[b])))
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                new.row_mut(c).assign(&x.row(far));
            }
        }
        let shift: f64 = (&new - &centers).iter().map(|v| v * v).sum::<f64>().sqrt();
        centers = new;
        if shift <= KMEANS_TOL {
            break;
        }
    }
    let inertia = assign(x, &centers, &mut labels);
    (labels, inertia)
}

/// Relabels clusters in order of first appearance.
fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// k-means on spot rows, after projecting to 50 principal components when
/// there are more than 50 genes. Best of 10 k-means++ initialisations.
pub fn kmeans_domains(expression: &Array2<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = expression.nrows();
    if k < 2 {
        return Err(Error::Parameter(format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::Parameter(format!("k = {k} exceeds the {n} spots")));
    }
    if expression.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("expression contains non-finite values".into()));
    }
    let x = if expression.ncols() > PCA_COMPONENTS {
        pca_scores(expression, PCA_COMPONENTS)
    } else {
        expression.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_N_INIT {
        let centers = kmeans_pp(&x, k, &mut rng);
        let (labels, inertia) = lloyd(&x, centers);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((labels, inertia));
        }
    }
    Ok(canonical_labels(&best.unwrap().0))
}

//! Layer-wise representation diagnostics: linear probing, silhouette,
//! k-means + adjusted Rand index, and 2-D PCA projections.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Activation, PromptTokens, SteerableModel};
use crate::seed;

/// Activations with class labels, captured at one layer.
#[derive(Debug, Clone)]
pub struct LabeledActivations {
    pub rows: Vec<(Activation, usize)>,
    pub layer: usize,
    pub label_names: Vec<String>,
    /// `truth` or `stance`; carried through to reports.
    pub scheme: String,
}

impl LabeledActivations {
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Validation("no labeled activations".into()));
        }
        let dim = self.rows[0].0.dim();
        if self.rows.iter().any(|(a, _)| a.dim() != dim) {
            return Err(Error::Validation("inconsistent activation dimensions".into()));
        }
        let mut seen: Vec<usize> = self.rows.iter().map(|(_, l)| *l).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() < 2 {
            return Err(Error::Validation("need at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.rows.iter().map(|(_, l)| *l).max().map_or(0, |m| m + 1)
    }
}

/// A trained multinomial linear probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearProbe {
    /// Row-major [classes, dim + 1]; last column is the bias.
    pub weights: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
    /// Standardization fit on the training split.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub test_accuracy: f64,
}

impl LinearProbe {
    pub fn predict(&self, x: &[f64]) -> usize {
        let z: Vec<f64> = x
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..self.classes {
            let row = &self.weights[c * (self.dim + 1)..(c + 1) * (self.dim + 1)];
            let score = row[..self.dim]
                .iter()
                .zip(&z)
                .map(|(w, v)| w * v)
                .sum::<f64>()
                + row[self.dim];
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        best
    }
}

/// Cross-entropy loss with L2 penalty and its gradient for a multinomial
/// linear classifier over standardized features. Exposed so the analytic
/// gradient can be checked against finite differences.
pub fn probe_loss_and_grad(
    weights: &[f64],
    xs: &[Vec<f64>],
    ys: &[usize],
    classes: usize,
    l2: f64,
) -> (f64, Vec<f64>) {
    let dim = xs[0].len();
    let cols = dim + 1;
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for (x, &y) in xs.iter().zip(ys) {
        let mut scores = vec![0.0; classes];
        for c in 0..classes {
            let row = &weights[c * cols..(c + 1) * cols];
            scores[c] = row[..dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + row[dim];
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += -(scores[y] - max - z.ln()) / n;
        for c in 0..classes {
            let p = exps[c] / z;
            let err = (p - if c == y { 1.0 } else { 0.0 }) / n;
            let row = &mut grad[c * cols..(c + 1) * cols];
            for (g, v) in row[..dim].iter_mut().zip(x) {
                *g += err * v;
            }
            row[dim] += err;
        }
    }
    for (i, w) in weights.iter().enumerate() {
        loss += 0.5 * l2 * w * w;
        grad[i] += l2 * w;
    }
    (loss, grad)
}

/// Probe trainer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            learning_rate: 0.1,
            iterations: 500,
            train_fraction: 0.8,
        }
    }
}

/// Trains the probe on a stratified split and reports held-out accuracy.
///
/// Features standardize with the training split's mean/variance; training is
/// full-batch gradient descent on the penalized cross-entropy.
pub fn train_linear_probe(
    data: &LabeledActivations,
    config: &ProbeConfig,
    split_seed: u64,
) -> Result<LinearProbe> {
    data.validate()?;
    let classes = data.n_classes();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, (_, label)) in data.rows.iter().enumerate() {
        per_class[*label].push(i);
    }
    for (c, members) in per_class.iter().enumerate() {
        if !members.is_empty() && members.len() < 2 {
            return Err(Error::Validation(format!("class {c} has fewer than 2 rows")));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(split_seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for members in &mut per_class {
        members.shuffle(&mut rng);
        let n_train = ((members.len() as f64 * config.train_fraction).round() as usize)
            .clamp(1, members.len().saturating_sub(1).max(1));
        train_idx.extend_from_slice(&members[..n_train]);
        test_idx.extend_from_slice(&members[n_train..]);
    }
    let dim = data.rows[0].0.dim();

    // Standardize on the training split.
    let mut mean = vec![0.0; dim];
    for &i in &train_idx {
        for (m, v) in mean.iter_mut().zip(&data.rows[i].0.values) {
            *m += v / train_idx.len() as f64;
        }
    }
    let mut var = vec![0.0; dim];
    for &i in &train_idx {
        for (s, (v, m)) in var.iter_mut().zip(data.rows[i].0.values.iter().zip(&mean)) {
            *s += (v - m) * (v - m) / train_idx.len() as f64;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-12)).collect();
    let standardize = |i: usize| -> Vec<f64> {
        data.rows[i]
            .0
            .values
            .iter()
            .zip(mean.iter().zip(&std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    };

    let xs: Vec<Vec<f64>> = train_idx.iter().map(|&i| standardize(i)).collect();
    let ys: Vec<usize> = train_idx.iter().map(|&i| data.rows[i].1).collect();
    let mut weights = vec![0.0; classes * (dim + 1)];
    for _ in 0..config.iterations {
        let (_, grad) = probe_loss_and_grad(&weights, &xs, &ys, classes, config.l2);
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
    }
    let probe = LinearProbe {
        weights,
        classes,
        dim,
        feature_mean: mean,
        feature_std: std,
        test_accuracy: 0.0,
    };
    let mut correct = 0usize;
    for &i in &test_idx {
        if probe.predict(&data.rows[i].0.values) == data.rows[i].1 {
            correct += 1;
        }
    }
    let test_accuracy = correct as f64 / test_idx.len().max(1) as f64;
    Ok(LinearProbe {
        test_accuracy,
        ..probe
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette over points: `(b - a) / max(a, b)` with Euclidean
/// distances; singleton clusters (and the degenerate a = b = 0 case) score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            got: labels.len(),
        });
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::UndefinedMetric(
            "silhouette needs at least 2 clusters".into(),
        ));
    }
    let mut total = 0.0;
    for (i, point) in points.iter().enumerate() {
        let own = &clusters[&labels[i]];
        if own.len() == 1 {
            continue; // scores 0
        }
        let a = own
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| euclidean(point, &points[j]))
            .sum::<f64>()
            / (own.len() - 1) as f64;
        let b = clusters
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(_, members)| {
                members
                    .iter()
                    .map(|&j| euclidean(point, &points[j]))
                    .sum::<f64>()
                    / members.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

/// Seeded k-means with k-means++ initialization, up to 100 Lloyd iterations
/// per restart, 10 restarts keeping the lowest inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed_value: u64) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidParameter(format!(
            "k must be in 1..={}, got {k}",
            points.len()
        )));
    }
    let dim = points[0].len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..10 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed::derive(seed_value, &[restart]));
        // k-means++ seeding
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        centers.push(points[rng.gen_range(0..points.len())].clone());
        while centers.len() < k {
            let d2: Vec<f64> = points
                .iter()
                .map(|p| {
                    centers
                        .iter()
                        .map(|c| {
                            p.iter()
                                .zip(c)
                                .map(|(x, y)| (x - y) * (x - y))
                                .sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d2.iter().sum();
            if total == 0.0 {
                centers.push(points[rng.gen_range(0..points.len())].clone());
                continue;
            }
            let mut u: f64 = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            centers.push(points[chosen].clone());
        }
        // Lloyd iterations
        let mut labels = vec![0usize; points.len()];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut best_c = 0;
                let mut best_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = p
                        .iter()
                        .zip(center)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>();
                    if d < best_d {
                        best_d = d;
                        best_c = c;
                    }
                }
                if labels[i] != best_c {
                    labels[i] = best_c;
                    changed = true;
                }
            }
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &l) in points.iter().zip(&labels) {
                counts[l] += 1;
                for (s, v) in sums[l].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for s in sums[c].iter_mut() {
                        *s /= counts[c] as f64;
                    }
                    centers[c] = sums[c].clone();
                } else {
                    // Re-seed an empty cluster deterministically: the point
                    // farthest from its assigned center.
                    let (far, _) = points
                        .iter()
                        .enumerate()
                        .map(|(i, p)| (i, euclidean(p, &centers[labels[i]])))
                        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                        .unwrap();
                    centers[c] = points[far].clone();
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| {
                p.iter()
                    .zip(&centers[l])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum();
        if best.as_ref().map_or(true, |(bi, _)| inertia < *bi) {
            best = Some((inertia, labels));
        }
    }
    Ok(best.unwrap().1)
}

/// Standard contingency-table adjusted Rand index.
pub fn adjusted_rand_index(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::DimensionMismatch {
            expected: labels_a.len(),
            got: labels_b.len(),
        });
    }
    let n = labels_a.len();
    if n < 2 {
        return Err(Error::UndefinedMetric("ARI needs at least 2 points".into()));
    }
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, f64> = BTreeMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *table.entry((a, b)).or_insert(0.0) += 1.0;
        *rows.entry(a).or_insert(0.0) += 1.0;
        *cols.entry(b).or_insert(0.0) += 1.0;
    }
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_rows: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_cols: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = sum_rows * sum_cols / choose2(n as f64);
    let max = 0.5 * (sum_rows + sum_cols);
    if (max - expected).abs() < 1e-12 {
        // Both partitions trivial (e.g. single cluster each): perfect
        // agreement by convention.
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// 2-D PCA output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaProjection {
    /// Row-major [n, 2] coordinates.
    pub coords: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
}

/// Projects onto the top-2 covariance eigenvectors (power iteration with
/// deflation). Sign convention: each component's largest-magnitude entry is
/// positive.
pub fn pca_project(points: &[Vec<f64>]) -> Result<PcaProjection> {
    if points.len() < 3 {
        return Err(Error::Validation("PCA needs at least 3 points".into()));
    }
    let dim = points[0].len();
    if dim < 2 {
        return Err(Error::Validation("PCA needs dimension >= 2".into()));
    }
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    // Covariance-vector product without materializing the matrix.
    let cov_mul = |v: &[f64], exclude: Option<&[f64]>| -> Vec<f64> {
        let mut out = vec![0.0; dim];
        let w: Vec<f64> = match exclude {
            Some(e) => {
                let proj: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
                v.iter().zip(e).map(|(a, b)| a - proj * b).collect()
            }
            None => v.to_vec(),
        };
        for row in &centered {
            let dot: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            for (o, r) in out.iter_mut().zip(row) {
                *o += dot * r / (n - 1.0);
            }
        }
        if let Some(e) = exclude {
            let proj: f64 = out.iter().zip(e).map(|(a, b)| a * b).sum();
            for (o, b) in out.iter_mut().zip(e) {
                *o -= proj * b;
            }
        }
        out
    };
    let total_variance: f64 = (0..dim)
        .map(|j| centered.iter().map(|r| r[j] * r[j]).sum::<f64>() / (n - 1.0))
        .sum();
    if total_variance <= 0.0 {
        return Err(Error::UndefinedMetric("rank-0 data: no variance".into()));
    }
    let power = |exclude: Option<&[f64]>, init_axis: usize| -> (Vec<f64>, f64) {
        let mut v = vec![0.0; dim];
        v[init_axis] = 1.0;
        // Deterministic tie-resilient start: add a small ramp.
        for (i, vi) in v.iter_mut().enumerate() {
            *vi += 1e-3 * (i + 1) as f64;
        }
        let mut eigen = 0.0;
        for _ in 0..2000 {
            let mut next = cov_mul(&v, exclude);
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            for x in next.iter_mut() {
                *x /= norm;
            }
            let prev_eigen = eigen;
            eigen = norm;
            let delta: f64 = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            if delta < 1e-13 && (eigen - prev_eigen).abs() < 1e-13 {
                break;
            }
        }
        (v, eigen)
    };
    let (mut c1, l1) = power(None, 0);
    normalize_sign(&mut c1);
    let (mut c2_raw, l2) = power(Some(&c1), 1);
    // Exact orthogonalization against c1.
    let proj: f64 = c2_raw.iter().zip(&c1).map(|(a, b)| a * b).sum();
    for (x, b) in c2_raw.iter_mut().zip(&c1) {
        *x -= proj * b;
    }
    let norm = c2_raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in c2_raw.iter_mut() {
            *x /= norm;
        }
    }
    normalize_sign(&mut c2_raw);
    let coords: Vec<[f64; 2]> = centered
        .iter()
        .map(|r| {
            [
                r.iter().zip(&c1).map(|(a, b)| a * b).sum(),
                r.iter().zip(&c2_raw).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();
    Ok(PcaProjection {
        coords,
        components: [c1, c2_raw],
        explained_variance: [l1 / total_variance, l2 / total_variance],
    })
}

fn normalize_sign(v: &mut [f64]) {
    let mut max_idx = 0;
    let mut max_abs = 0.0;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > max_abs {
            max_abs = x.abs();
            max_idx = i;
        }
    }
    if v[max_idx] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Which diagnostics a layer sweep computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMetric {
    ProbeAccuracy,
    Silhouette,
    Ari,
}

/// Per-layer diagnostic values plus the best layer per metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub scheme: String,
    /// (layer, metric, value) rows.
    pub rows: Vec<(usize, ProbeMetric, f64)>,
    pub peak_layer: BTreeMap<String, usize>,
}

impl ProbeReport {
    pub fn value(&self, layer: usize, metric: ProbeMetric) -> Option<f64> {
        self.rows
            .iter()
            .find(|(l, m, _)| *l == layer && *m == metric)
            .map(|(_, _, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,metric,value\n");
        for (layer, metric, value) in &self.rows {
            let name = match metric {
                ProbeMetric::ProbeAccuracy => "probe_accuracy",
                ProbeMetric::Silhouette => "silhouette",
                ProbeMetric::Ari => "ari",
            };
            out.push_str(&format!("{layer},{name},{value}\n"));
        }
        out
    }
}

/// Captures final-token activations for every layer and labeled prompt, then
/// runs the requested metrics per layer.
pub fn layer_sweep<M: SteerableModel>(
    model: &M,
    prompts: &[(PromptTokens, usize)],
    label_names: &[String],
    scheme: &str,
    metrics: &[ProbeMetric],
    seed_value: u64,
) -> Result<ProbeReport> {
    if prompts.is_empty() {
        return Err(Error::Validation("no labeled prompts".into()));
    }
    let layers: Vec<usize> = (0..model.layer_count()).collect();
    let mut per_layer: Vec<Vec<(Activation, usize)>> =
        vec![Vec::with_capacity(prompts.len()); layers.len()];
    for (prompt, label) in prompts {
        let cap = model.forward_with_capture(prompt, &layers)?;
        for &l in &layers {
            per_layer[l].push((cap.activations[&l].clone(), *label));
        }
    }
    let mut rows = Vec::new();
    for &layer in &layers {
        let data = LabeledActivations {
            rows: per_layer[layer].clone(),
            layer,
            label_names: label_names.to_vec(),
            scheme: scheme.to_string(),
        };
        let points: Vec<Vec<f64>> = data.rows.iter().map(|(a, _)| a.values.clone()).collect();
        let labels: Vec<usize> = data.rows.iter().map(|(_, l)| *l).collect();
        for metric in metrics {
            let value = match metric {
                ProbeMetric::ProbeAccuracy => {
                    train_linear_probe(
                        &data,
                        &ProbeConfig::default(),
                        seed::derive(seed_value, &[layer as u64, 0]),
                    )?
                    .test_accuracy
                }
                ProbeMetric::Silhouette => silhouette(&points, &labels)?,
                ProbeMetric::Ari => {
                    let k = data.n_classes();
                    let pred = kmeans(&points, k, seed::derive(seed_value, &[layer as u64, 1]))?;
                    adjusted_rand_index(&pred, &labels)?
                }
            };
            rows.push((layer, *metric, value));
        }
    }
    let mut peak_layer = BTreeMap::new();
    for metric in metrics {
        let name = match metric {
            ProbeMetric::ProbeAccuracy => "probe_accuracy",
            ProbeMetric::Silhouette => "silhouette",
            ProbeMetric::Ari => "ari",
        };
        let best = rows
            .iter()
            .filter(|(_, m, _)| m == metric)
            .max_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(b.0.cmp(&a.0)))
            .map(|(l, _, _)| *l)
            .unwrap_or(0);
        peak_layer.insert(name.to_string(), best);
    }
    Ok(ProbeReport {
        scheme: scheme.to_string(),
        rows,
        peak_layer,
    })
}

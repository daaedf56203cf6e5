//! Clustering metrics over posterior means and anchor-axis projections of
//! perceptual ratings.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

pub const KMEANS_RESTARTS: usize = 20;
pub const KMEANS_SEED: u64 = 0x5eed;
const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("anchors A and B coincide")]
    DegenerateAxis,
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate input for {metric}: {reason}")]
    DegenerateInput { metric: &'static str, reason: String },
    #[error("{0} labels for {1} points")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn degenerate(metric: &'static str, reason: impl Into<String>) -> EvalError {
    EvalError::DegenerateInput { metric, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Roughness,
    Slipperiness,
    Hardness,
}

/// `(X - A)(B - A) / (B - A)^2`: 0 at A, 1 at B.
pub fn anchor_projection<T: Scalar>(x: T, a: T, b: T) -> Result<T, EvalError> {
    let axis = b - a;
    if axis == T::zero() {
        return Err(EvalError::DegenerateAxis);
    }
    Ok((x - a) * axis / (axis * axis))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    #[serde(default)]
    pub participant: String,
    pub attribute: Attribute,
    pub a: f64,
    pub b: f64,
    pub x: f64,
    /// filled by [`ProjectionRecord::project`]
    #[serde(default)]
    pub t: Option<f64>,
}

impl ProjectionRecord {
    pub fn new(attribute: Attribute, a: f64, b: f64, x: f64) -> Result<Self, EvalError> {
        let t = anchor_projection(x, a, b)?;
        Ok(Self { participant: String::new(), attribute, a, b, x, t: Some(t) })
    }

    pub fn project(&mut self) -> Result<f64, EvalError> {
        let t = anchor_projection(self.x, self.a, self.b)?;
        self.t = Some(t);
        Ok(t)
    }
}

/// Fraction of `t` in the closed interval [0, 1], per attribute.
pub fn inside_rate(records: &[ProjectionRecord]) -> Result<BTreeMap<Attribute, f64>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut counts: BTreeMap<Attribute, (usize, usize)> = BTreeMap::new();
    for r in records {
        let t = match r.t {
            Some(t) => t,
            None => anchor_projection(r.x, r.a, r.b)?,
        };
        let c = counts.entry(r.attribute).or_default();
        c.1 += 1;
        if (0.0..=1.0).contains(&t) {
            c.0 += 1;
        }
    }
    Ok(counts.into_iter().map(|(k, (i, n))| (k, i as f64 / n as f64)).collect())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<ProjectionRecord>, EvalError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let mut rec: ProjectionRecord = rec?;
        rec.project()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(records: &[ProjectionRecord], w: W) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- clustering

fn to_rows<T: Scalar>(points: &Array2<T>) -> Vec<Vec<f64>> {
    points.rows().into_iter().map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Labels renumbered 0.. in order of first appearance.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let n = map.len();
        out.push(*map.entry(l).or_insert(n));
    }
    (out, map.len())
}

fn centroids(points: &[Vec<f64>], labels: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = points.first().map_or(0, |p| p.len());
    let mut c = vec![vec![0.0; d]; k];
    let mut n = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        n[l] += 1;
        for (a, b) in c[l].iter_mut().zip(p) {
            *a += b;
        }
    }
    for (ci, &ni) in c.iter_mut().zip(&n) {
        if ni > 0 {
            ci.iter_mut().for_each(|v| *v /= ni as f64);
        }
    }
    (c, n)
}

/// Mean silhouette. Points in singleton clusters score 0.
pub fn silhouette<T: Scalar>(points: &Array2<T>, labels: &[usize]) -> Result<f64, EvalError> {
    let pts = to_rows(points);
    check_lengths(&pts, labels)?;
    let (lab, k) = compact(labels);
    if k < 2 {
        return Err(degenerate("silhouette", "fewer than two classes"));
    }
    let n = pts.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(&pts[i], &pts[j]).sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let sizes = centroids(&pts, &lab, k).1;
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        if sizes[lab[i]] < 2 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[lab[j]] += dist[i * n + j];
        }
        let a = sums[lab[i]] / (sizes[lab[i]] - 1) as f64;
        let b = (0..k).filter(|&c| c != lab[i]).map(|c| sums[c] / sizes[c] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

fn check_lengths(pts: &[Vec<f64>], labels: &[usize]) -> Result<(), EvalError> {
    if pts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if pts.len() != labels.len() {
        return Err(EvalError::LengthMismatch(labels.len(), pts.len()));
    }
    Ok(())
}

/// Between- over within-cluster dispersion, each divided by its degrees of freedom.
pub fn calinski_harabasz<T: Scalar>(points: &Array2<T>, labels: &[usize]) -> Result<f64, EvalError> {
    let pts = to_rows(points);
    check_lengths(&pts, labels)?;
    let (lab, k) = compact(labels);
    let n = pts.len();
    if k < 2 || n <= k {
        return Err(degenerate("calinski_harabasz", format!("{k} clusters for {n} points")));
    }
    let (c, sizes) = centroids(&pts, &lab, k);
    let all = centroids(&pts, &vec![0; n], 1).0.remove(0);
    let between: f64 = c.iter().zip(&sizes).map(|(ci, &s)| s as f64 * sq_dist(ci, &all)).sum();
    let within: f64 = pts.iter().zip(&lab).map(|(p, &l)| sq_dist(p, &c[l])).sum();
    if within == 0.0 {
        return Err(degenerate("calinski_harabasz", "zero within-cluster dispersion"));
    }
    Ok(between * (n - k) as f64 / (within * (k - 1) as f64))
}

/// Mean over clusters of the worst `(s_i + s_j) / d(c_i, c_j)`.
pub fn davies_bouldin<T: Scalar>(points: &Array2<T>, labels: &[usize]) -> Result<f64, EvalError> {
    let pts = to_rows(points);
    check_lengths(&pts, labels)?;
    let (lab, k) = compact(labels);
    if k < 2 {
        return Err(degenerate("davies_bouldin", "fewer than two clusters"));
    }
    let (c, sizes) = centroids(&pts, &lab, k);
    let mut scatter = vec![0.0; k];
    for (p, &l) in pts.iter().zip(&lab) {
        scatter[l] += sq_dist(p, &c[l]).sqrt();
    }
    for (s, &n) in scatter.iter_mut().zip(&sizes) {
        *s /= n as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = sq_dist(&c[i], &c[j]).sqrt();
            if d == 0.0 {
                return Err(degenerate("davies_bouldin", "coincident centroids"));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (a, ka) = compact(a);
    let (b, kb) = compact(b);
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(&b) {
        table[x][y] += 1.0;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, rows, cols)
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

pub fn adjusted_rand(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(degenerate("adjusted_rand", "fewer than two points"));
    }
    let (table, rows, cols) = contingency(a, b);
    let index: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let sa: f64 = rows.iter().map(|&v| choose2(v)).sum();
    let sb: f64 = cols.iter().map(|&v| choose2(v)).sum();
    let expected = sa * sb / choose2(a.len() as f64);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Mutual information over the arithmetic mean of the two entropies.
pub fn normalized_mutual_info(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = a.len() as f64;
    let (table, rows, cols) = contingency(a, b);
    let entropy = |v: &[f64]| -> f64 { v.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum() };
    let (ha, hb) = (entropy(&rows), entropy(&cols));
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0.0 {
                mi += c / n * (c * n / (rows[i] * cols[j])).ln();
            }
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignment: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn kmeans_once(pts: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeans {
    let n = pts.len();
    let mut centers = vec![pts[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(pts[pick].clone());
        for (d, p) in d2.iter_mut().zip(pts) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let best = (0..k)
                .map(|c| (c, sq_dist(p, &centers[c])))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
                .0;
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let (mut c, sizes) = centroids(pts, &assignment, k);
        // an emptied cluster takes the point farthest from its center
        for e in (0..k).filter(|&e| sizes[e] == 0) {
            let far = (0..n)
                .map(|i| (i, sq_dist(&pts[i], &c[assignment[i]])))
                .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc })
                .0;
            c[e] = pts[far].clone();
            assignment[far] = e;
            changed = true;
        }
        centers = c;
        if !changed {
            break;
        }
    }
    let inertia = pts.iter().zip(&assignment).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
    KMeans { assignment, centers, inertia }
}

/// k-means++ seeding, Lloyd iterations, best of `restarts` by inertia.
pub fn kmeans<T: Scalar>(points: &Array2<T>, k: usize, seed: u64, restarts: usize) -> Result<KMeans, EvalError> {
    let pts = to_rows(points);
    if pts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if k == 0 || k > pts.len() {
        return Err(degenerate("kmeans", format!("k = {k} for {} points", pts.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(&pts, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub silhouette: f64,
    pub calinski_harabasz: f64,
    pub davies_bouldin: f64,
    pub adjusted_rand: f64,
    pub nmi: f64,
}

/// Every metric against the class labels; ARI and NMI compare a seeded
/// k-means with one cluster per class.
pub fn clustering_metrics<T: Scalar>(points: &Array2<T>, labels: &[usize], seed: u64) -> Result<ClusterMetrics, EvalError> {
    let (lab, k) = compact(labels);
    let mut sizes = vec![0usize; k];
    lab.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().any(|&s| s < 2) {
        return Err(degenerate("silhouette", "a class has fewer than two points"));
    }
    let km = kmeans(points, k, seed, KMEANS_RESTARTS)?;
    Ok(ClusterMetrics {
        silhouette: silhouette(points, labels)?,
        calinski_harabasz: calinski_harabasz(points, labels)?,
        davies_bouldin: davies_bouldin(points, labels)?,
        adjusted_rand: adjusted_rand(&km.assignment, labels)?,
        nmi: normalized_mutual_info(&km.assignment, labels)?,
    })
}

/// Coordinates on the first two principal axes. Each axis is signed so its
/// largest-magnitude loading is positive.
pub fn pca_2d<T: Scalar>(points: &Array2<T>) -> Result<Vec<[f64; 2]>, EvalError> {
    let pts = to_rows(points);
    if pts.len() < 2 {
        return Err(degenerate("pca", "fewer than two points"));
    }
    let d = pts[0].len();
    let mean = centroids(&pts, &vec![0; pts.len()], 1).0.remove(0);
    let x = DMatrix::from_fn(pts.len(), d, |i, j| pts[i][j] - mean[j]);
    let cov = x.transpose() * &x / (pts.len() - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Vec::new();
    for &o in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(o).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(nalgebra::DVector::zeros(d));
    }
    let proj = x * DMatrix::from_columns(&axes);
    Ok((0..pts.len()).map(|i| [proj[(i, 0)], proj[(i, 1)]]).collect())
}

pub fn write_pca_csv<W: Write>(ids: &[String], labels: &[usize], coords: &[[f64; 2]], w: W) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "label", "pc1", "pc2"])?;
    for ((id, l), c) in ids.iter().zip(labels).zip(coords) {
        out.write_record([id.clone(), l.to_string(), c[0].to_string(), c[1].to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_points: usize,
    pub n_classes: usize,
    pub kmeans_seed: u64,
    pub kmeans_restarts: usize,
    pub clustering: ClusterMetrics,
    #[serde(default)]
    pub inside_rates: BTreeMap<Attribute, f64>,
    /// caption retrieval rate, when measured
    #[serde(default)]
    pub retrieval_rate: Option<f64>,
}

impl EvalReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<(), EvalError> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

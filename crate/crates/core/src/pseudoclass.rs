//! Pseudo-class labels from k-means over item factors.
//!
//! Lloyd iterations from k-means++ seeding. Assignment ties go to the lowest
//! class index, and an empty class is reseeded at the point farthest from
//! its current centroid.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Cluster counts visited by `--sweep`.
pub const SWEEP_KS: [usize; 6] = [200, 500, 1000, 2000, 3000, 5000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    /// Euclidean on unit-normalized rows.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub metric: Metric,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 2000,
            seed: 0,
            max_iters: 100,
            tol: 1e-4,
            metric: Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoClassAssignment {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl PseudoClassAssignment {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Points<'a> {
    dim: usize,
    data: &'a [f64],
}

impl Points<'_> {
    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Labels and squared distances to the nearest centroid.
fn assign(points: &Points<'_>, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    points
        .data
        .par_chunks_exact(points.dim)
        .map(|p| nearest(p, centroids, points.dim))
        .unzip()
}

fn kmeans_plus_plus<R: Rng>(points: &Points<'_>, k: usize, rng: &mut R) -> Vec<f64> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * points.dim);
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|p| sq_dist(points.row(p), points.row(first)))
        .collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (p, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(p);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight has a positive entry")
        } else {
            // Only duplicates of existing centroids remain.
            let free: Vec<usize> = (0..n).filter(|&p| !chosen[p]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        let row = points.row(next);
        centroids.extend_from_slice(row);
        for (p, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(p), row));
        }
    }
    centroids
}

/// Moves the centroid of each empty class onto the point farthest from its
/// own centroid (taken from a class with more than one member), then
/// reassigns all points. Repeats until no class is empty.
///
/// Each move strictly lowers inertia unless every candidate donor already
/// sits on its centroid (exact duplicates); then the donor is relabelled
/// without reassignment, which is the one case where the lowest-index tie
/// rule is not kept.
fn repair_empty(
    points: &Points<'_>,
    centroids: &mut [f64],
    labels: &mut Vec<usize>,
    dists: &mut Vec<f64>,
    k: usize,
) {
    let dim = points.dim;
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&p| sizes[labels[p]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
            .expect("k <= number of points leaves a class with two members");
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(points.row(donor));
        if dists[donor] > 0.0 {
            (*labels, *dists) = assign(points, centroids);
        } else {
            labels[donor] = empty;
        }
    }
}

fn update_centroids(points: &Points<'_>, labels: &[usize], k: usize) -> Vec<f64> {
    let dim = points.dim;
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(points.row(p)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        for s in &mut sums[c * dim..(c + 1) * dim] {
            *s /= n as f64;
        }
    }
    sums
}

fn prepare(factors: &Embedding, metric: Metric) -> Vec<f64> {
    match metric {
        Metric::Euclidean => factors.as_flat().to_vec(),
        Metric::Cosine => {
            let mut out = Vec::with_capacity(factors.as_flat().len());
            for row in factors.rows() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                out.extend(row.iter().map(|v| v * scale));
            }
            out
        }
    }
}

/// Clusters the rows of `factors` into `cfg.k` classes.
pub fn kmeans_fit(factors: &Embedding, cfg: &KMeansConfig) -> Result<PseudoClassAssignment> {
    let n = factors.len();
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if cfg.k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {} exceeds the number of items ({n})",
            cfg.k
        )));
    }
    if cfg.max_iters == 0 {
        return Err(Error::InvalidArgument(
            "max_iters must be at least 1".into(),
        ));
    }
    let dim = factors.dim();
    let data = prepare(factors, cfg.metric);
    let points = Points { dim, data: &data };
    let k = cfg.k;

    let mut rng = rng::stream(cfg.seed, Purpose::KMeans, 0);
    let mut centroids = kmeans_plus_plus(&points, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut previous: Option<Vec<usize>> = None;

    let (labels, dists) = loop {
        let (mut labels, mut dists) = assign(&points, &centroids);
        repair_empty(&points, &mut centroids, &mut labels, &mut dists, k);
        history.push(dists.iter().sum());
        if iterations == cfg.max_iters || previous.as_ref() == Some(&labels) {
            break (labels, dists);
        }
        iterations += 1;
        let updated = update_centroids(&points, &labels, k);
        let shift = centroids
            .chunks_exact(dim)
            .zip(updated.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        previous = Some(labels);
        if shift < cfg.tol {
            let (mut labels, mut dists) = assign(&points, &centroids);
            repair_empty(&points, &mut centroids, &mut labels, &mut dists, k);
            history.push(dists.iter().sum());
            break (labels, dists);
        }
    };
    Ok(PseudoClassAssignment {
        k,
        dim,
        centroids,
        inertia: dists.iter().sum(),
        labels,
        history,
        iterations,
    })
}

/// Runs one more Lloyd step (update then assign) on a finished assignment.
pub fn lloyd_step(
    factors: &Embedding,
    assign_in: &PseudoClassAssignment,
    metric: Metric,
) -> Vec<usize> {
    let data = prepare(factors, metric);
    let points = Points {
        dim: factors.dim(),
        data: &data,
    };
    let centroids = update_centroids(&points, &assign_in.labels, assign_in.k);
    assign(&points, &centroids).0
}

/// `(item_id, class)` rows, one per clustered item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable(pub Vec<(String, usize)>);

pub fn assign_pseudo_classes(
    assignment: &PseudoClassAssignment,
    item_ids: &[String],
) -> Result<LabelTable> {
    if assignment.labels.len() != item_ids.len() {
        return Err(Error::LengthMismatch(format!(
            "{} labels for {} items",
            assignment.labels.len(),
            item_ids.len()
        )));
    }
    Ok(LabelTable(
        item_ids
            .iter()
            .cloned()
            .zip(assignment.labels.iter().copied())
            .collect(),
    ))
}

impl LabelTable {
    pub fn histogram(&self, k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for (_, c) in &self.0 {
            h[*c] += 1;
        }
        h
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let parsed = line
                .split_once('\t')
                .and_then(|(id, c)| Some((id.to_owned(), c.parse().ok()?)));
            rows.push(
                parsed.ok_or_else(|| Error::parse(path, n + 1, "expected `item_id<TAB>class`"))?,
            );
        }
        Ok(LabelTable(rows))
    }
}

/// Writes `item_id<TAB>class_index` lines.
pub fn export_labels(table: &LabelTable, path: &Path) -> Result<()> {
    if table.0.is_empty() {
        return Err(Error::Empty("refusing to write an empty label table"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, c) in &table.0 {
        writeln!(w, "{id}\t{c}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

//! Quality measures for latent factors and item embeddings.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{Entry, Signal, ViewMatrix};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::factorizer::LatentModel;
use crate::rng::{self, Purpose};

/// Root-mean-square error of `y_iᵀx_j` against the cell values.
pub fn rmse(model: &LatentModel, entries: &[Entry]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::Empty("cannot compute RMSE over no entries"));
    }
    let sse: f64 = entries
        .iter()
        .map(|e| (e.value() - model.score(e.item, e.user)).powi(2))
        .sum();
    Ok((sse / entries.len() as f64).sqrt())
}

/// Mean over users of the fraction of (positive, negative) pairs in which
/// the negative scores higher, ties counting one half. 0 is a perfect
/// ranking and random scores give 0.5. Users lacking either a positive or a
/// negative in `entries` are skipped.
pub fn personalized_ranking(model: &LatentModel, entries: &[Entry]) -> Result<f64> {
    ranking_error(entries, |e| model.score(e.item, e.user))
}

/// [`personalized_ranking`] with an arbitrary scoring function.
pub fn ranking_error(entries: &[Entry], score: impl Fn(&Entry) -> f64) -> Result<f64> {
    let mut by_user: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for e in entries {
        let slot = by_user.entry(e.user).or_default();
        match e.signal {
            Signal::Positive => slot.0.push(score(e)),
            Signal::Negative => slot.1.push(score(e)),
        }
    }
    let mut total = 0.0;
    let mut users = 0usize;
    for (pos, mut neg) in by_user.into_values() {
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        neg.sort_unstable_by(f64::total_cmp);
        let mut wrong = 0.0;
        for p in &pos {
            let below_or_equal = neg.partition_point(|n| n <= p);
            let below = neg.partition_point(|n| n < p);
            wrong += (neg.len() - below_or_equal) as f64 + 0.5 * (below_or_equal - below) as f64;
        }
        total += wrong / (pos.len() * neg.len()) as f64;
        users += 1;
    }
    if users == 0 {
        return Err(Error::Empty(
            "no user has both a positive and a negative entry",
        ));
    }
    Ok(total / users as f64)
}

/// Exhaustive cosine-similarity search over the rows of an embedding.
/// Zero rows (and zero queries) have similarity 0 with everything.
#[derive(Debug, Clone)]
pub struct CosineIndex {
    dim: usize,
    unit: Vec<f64>,
    len: usize,
}

fn normalize(v: &[f64], out: &mut Vec<f64>) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.extend(v.iter().map(|x| x / norm));
    } else {
        out.extend(std::iter::repeat_n(0.0, v.len()));
    }
}

fn by_similarity(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl CosineIndex {
    pub fn new(emb: &Embedding) -> Self {
        let mut unit = Vec::with_capacity(emb.as_flat().len());
        for row in emb.rows() {
            normalize(row, &mut unit);
        }
        CosineIndex {
            dim: emb.dim(),
            unit,
            len: emb.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.unit[k * self.dim..(k + 1) * self.dim]
    }

    /// Top `top_n` rows among `candidates` (all rows if `None`) by cosine
    /// similarity to `query`, descending, ties to the lower row index.
    /// `exclude` removes one row from the pool.
    pub fn search(
        &self,
        query: &[f64],
        top_n: usize,
        candidates: Option<&[usize]>,
        exclude: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let mut q = Vec::with_capacity(self.dim);
        normalize(query, &mut q);
        let sim = |k: usize| {
            (
                self.row(k).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>(),
                k,
            )
        };
        let mut scored: Vec<(f64, usize)> = match candidates {
            Some(c) => c
                .iter()
                .copied()
                .filter(|&k| Some(k) != exclude)
                .map(sim)
                .collect(),
            None => (0..self.len)
                .filter(|&k| Some(k) != exclude)
                .map(sim)
                .collect(),
        };
        if top_n < scored.len() {
            scored.select_nth_unstable_by(top_n, by_similarity);
            scored.truncate(top_n);
        }
        scored.sort_unstable_by(by_similarity);
        scored.into_iter().map(|(s, k)| (k, s)).collect()
    }
}

/// Cosine k-NN of `query` among all rows of `index`.
pub fn knn_cosine(query: &[f64], index: &Embedding, top_n: usize) -> Result<Vec<(usize, f64)>> {
    if index.is_empty() {
        return Err(Error::Empty("cannot search an empty index"));
    }
    if top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    if query.len() != index.dim() {
        return Err(Error::LengthMismatch(format!(
            "query has dim {}, index {}",
            query.len(),
            index.dim()
        )));
    }
    Ok(CosineIndex::new(index).search(query, top_n, None, None))
}

/// For each query row, its `top_n` nearest candidate rows, excluding itself.
pub fn nearest_neighbors(
    emb: &Embedding,
    queries: &[usize],
    candidates: Option<&[usize]>,
    top_n: usize,
) -> Vec<Vec<usize>> {
    let index = CosineIndex::new(emb);
    queries
        .par_iter()
        .map(|&q| {
            index
                .search(emb.row(q), top_n, candidates, Some(q))
                .into_iter()
                .map(|(k, _)| k)
                .collect()
        })
        .collect()
}

/// Sorted viewer lists for each embedding row, looked up by item id. Rows
/// whose id is not an item of `m` get an empty list.
pub fn viewer_sets(emb: &Embedding, m: &ViewMatrix) -> Vec<Vec<usize>> {
    emb.ids()
        .iter()
        .map(|id| match m.item_of(id) {
            Some(i) => m.viewers(i).collect(),
            None => Vec::new(),
        })
        .collect()
}

/// `|a ∩ b| / |a ∪ b|` of two ascending lists; 0 when both are empty.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut k, mut common) = (0, 0, 0usize);
    while i < a.len() && k < b.len() {
        match a[i].cmp(&b[k]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => k += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                k += 1;
            }
        }
    }
    let union = a.len() + b.len() - common;
    if union == 0 {
        0.0
    } else {
        common as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JaccardCurve {
    /// Entry `r` is the mean Jaccard at neighbor rank `r + 1`.
    pub mean_by_rank: Vec<f64>,
    /// Queries with no viewers; all their Jaccard values are 0.
    pub empty_viewer_queries: usize,
}

impl JaccardCurve {
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (r, v) in self.mean_by_rank.iter().enumerate() {
            writeln!(w, "{}\t{}", r + 1, v).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn curve_from_neighbors(
    queries: &[usize],
    neighbors: &[Vec<usize>],
    viewers: &[Vec<usize>],
) -> JaccardCurve {
    let depth = neighbors.iter().map(Vec::len).max().unwrap_or(0);
    let mut sums = vec![0.0; depth];
    let mut counts = vec![0usize; depth];
    for (&q, nn) in queries.iter().zip(neighbors) {
        for (r, &k) in nn.iter().enumerate() {
            sums[r] += jaccard(&viewers[q], &viewers[k]);
            counts[r] += 1;
        }
    }
    JaccardCurve {
        mean_by_rank: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s / c as f64)
            .collect(),
        empty_viewer_queries: queries.iter().filter(|&&q| viewers[q].is_empty()).count(),
    }
}

/// Mean common-viewer Jaccard between each query row and its rank-`r`
/// cosine neighbor, for `r = 1..=top_n`. The pool is every other row.
pub fn common_viewer_curve(
    queries: &[usize],
    emb: &Embedding,
    m: &ViewMatrix,
    top_n: usize,
) -> JaccardCurve {
    let neighbors = nearest_neighbors(emb, queries, None, top_n);
    curve_from_neighbors(queries, &neighbors, &viewer_sets(emb, m))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OwnerViews {
    /// Mean over queries with an owner of the number of neighbors the owner viewed.
    pub mean: f64,
    pub counted_queries: usize,
    pub skipped_queries: usize,
}

fn owners_from_neighbors(
    emb: &Embedding,
    m: &ViewMatrix,
    queries: &[usize],
    neighbors: &[Vec<usize>],
    viewers: &[Vec<usize>],
) -> OwnerViews {
    let (mut total, mut counted, mut skipped) = (0usize, 0usize, 0usize);
    for (&q, nn) in queries.iter().zip(neighbors) {
        match m.item_of(&emb.ids()[q]).and_then(|i| m.owner(i)) {
            Some(owner) => {
                total += nn
                    .iter()
                    .filter(|&&k| viewers[k].binary_search(&owner).is_ok())
                    .count();
                counted += 1;
            }
            None => skipped += 1,
        }
    }
    OwnerViews {
        mean: if counted == 0 {
            0.0
        } else {
            total as f64 / counted as f64
        },
        counted_queries: counted,
        skipped_queries: skipped,
    }
}

/// Mean number of a query's `top_n` neighbors viewed by the query's owner.
pub fn owner_view_count(
    queries: &[usize],
    emb: &Embedding,
    m: &ViewMatrix,
    top_n: usize,
) -> OwnerViews {
    let neighbors = nearest_neighbors(emb, queries, None, top_n);
    owners_from_neighbors(emb, m, queries, &neighbors, &viewer_sets(emb, m))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineMetrics {
    pub pairs: usize,
    pub mean_jaccard: f64,
    pub jaccard_std_error: f64,
    /// Fraction of pairs `(q, k)` with an owner of `q` for which that owner viewed `k`.
    pub owner_view_rate: f64,
    pub owner_pairs: usize,
}

/// Jaccard and owner-view rate over uniformly drawn pairs of distinct items.
pub fn random_baseline(m: &ViewMatrix, n_pairs: usize, seed: u64) -> Result<BaselineMetrics> {
    let pool: Vec<usize> = (0..m.n_items()).collect();
    random_baseline_in(m, &pool, n_pairs, seed)
}

/// [`random_baseline`] restricted to the items in `pool`.
pub fn random_baseline_in(
    m: &ViewMatrix,
    pool: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<BaselineMetrics> {
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(
            "random pairs need at least 2 items".into(),
        ));
    }
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be at least 1".into()));
    }
    let viewers: Vec<Vec<usize>> = (0..m.n_items()).map(|i| m.viewers(i).collect()).collect();
    let mut rng = rng::stream(seed, Purpose::Baseline, 0);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let (mut owner_hits, mut owner_pairs) = (0usize, 0usize);
    for _ in 0..n_pairs {
        let a = rng.random_range(0..pool.len());
        let mut b = rng.random_range(0..pool.len() - 1);
        if b >= a {
            b += 1;
        }
        let (q, k) = (pool[a], pool[b]);
        let j = jaccard(&viewers[q], &viewers[k]);
        sum += j;
        sum_sq += j * j;
        if let Some(owner) = m.owner(q) {
            owner_pairs += 1;
            owner_hits += usize::from(viewers[k].binary_search(&owner).is_ok());
        }
    }
    let n = n_pairs as f64;
    let mean = sum / n;
    let var = if n_pairs > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(BaselineMetrics {
        pairs: n_pairs,
        mean_jaccard: mean,
        jaccard_std_error: (var / n).sqrt(),
        owner_view_rate: if owner_pairs == 0 {
            0.0
        } else {
            owner_hits as f64 / owner_pairs as f64
        },
        owner_pairs,
    })
}

/// Which rows serve as queries and as the retrieval pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryPool {
    /// Training items query the other training items.
    Tr,
    /// Held-out items query the training items.
    Te,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rmse: Option<f64>,
    pub pr: Option<f64>,
    pub query_pool: QueryPool,
    pub n_queries: usize,
    pub top_n: usize,
    pub jaccard_curve: Vec<f64>,
    pub empty_viewer_queries: usize,
    pub owner_view_mean: f64,
    pub owner_skipped_queries: usize,
    pub random_baselines: RandomBaselines,
    pub config: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RandomBaselines {
    pub mean_jaccard: f64,
    pub jaccard_std_error: f64,
    pub owner_view_rate: f64,
    /// `owner_view_rate × top_n`, comparable to `owner_view_mean`.
    pub owner_view_count: f64,
    pub pairs: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub struct EvalInput<'a> {
    pub matrix: &'a ViewMatrix,
    /// Model and validation entries for RMSE and PR, when available.
    pub model: Option<(&'a LatentModel, &'a [Entry])>,
    pub embedding: &'a Embedding,
    pub tr_items: &'a [usize],
    pub te_items: &'a [usize],
    pub pool: QueryPool,
    pub top_n: usize,
    pub baseline_pairs: usize,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
}

/// Computes every metric of [`EvalReport`].
pub fn evaluate(input: EvalInput<'_>) -> Result<EvalReport> {
    let m = input.matrix;
    let emb = input.embedding;
    let rows_of = |items: &[usize]| -> Vec<usize> {
        let index = emb.index();
        let mut rows: Vec<usize> = items
            .iter()
            .filter_map(|&i| index.get(m.item_ids()[i].as_str()).copied())
            .collect();
        rows.sort_unstable();
        rows
    };
    let tr_rows = rows_of(input.tr_items);
    let queries = match input.pool {
        QueryPool::Tr => tr_rows.clone(),
        QueryPool::Te => rows_of(input.te_items),
    };
    if queries.is_empty() {
        return Err(Error::Empty("no query items have an embedding"));
    }
    let neighbors = nearest_neighbors(emb, &queries, Some(&tr_rows), input.top_n);
    let viewers = viewer_sets(emb, m);
    let curve = curve_from_neighbors(&queries, &neighbors, &viewers);
    let owners = owners_from_neighbors(emb, m, &queries, &neighbors, &viewers);
    let baseline = random_baseline_in(m, input.tr_items, input.baseline_pairs, input.seed)?;

    let (rmse, pr) = match input.model {
        Some((model, val)) if !val.is_empty() => (
            Some(rmse(model, val)?),
            personalized_ranking(model, val).ok(),
        ),
        _ => (None, None),
    };

    Ok(EvalReport {
        rmse,
        pr,
        query_pool: input.pool,
        n_queries: queries.len(),
        top_n: input.top_n,
        jaccard_curve: curve.mean_by_rank,
        empty_viewer_queries: curve.empty_viewer_queries,
        owner_view_mean: owners.mean,
        owner_skipped_queries: owners.skipped_queries,
        random_baselines: RandomBaselines {
            mean_jaccard: baseline.mean_jaccard,
            jaccard_std_error: baseline.jaccard_std_error,
            owner_view_rate: baseline.owner_view_rate,
            owner_view_count: baseline.owner_view_rate * input.top_n as f64,
            pairs: baseline.pairs,
        },
        config: input.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, j: usize, v: u8) -> Entry {
        Entry::new(
            i,
            j,
            if v == 1 {
                Signal::Positive
            } else {
                Signal::Negative
            },
        )
    }

    fn emb(rows: &[&[f64]]) -> Embedding {
        Embedding::from_rows(
            rows[0].len(),
            rows.iter()
                .enumerate()
                .map(|(k, r)| (format!("i{k}"), r.to_vec())),
        )
        .unwrap()
    }

    #[test]
    fn rmse_cases() {
        let zero = LatentModel::zeros(2, 1, 2);
        assert_eq!(rmse(&zero, &[e(0, 0, 0), e(1, 0, 0)]).unwrap(), 0.0);
        // errors +1 (positive, predicted 0) and -1 (negative, predicted 1)
        let mut m = LatentModel::zeros(2, 1, 1);
        m.user_mut(0)[0] = 1.0;
        m.item_mut(1)[0] = 1.0;
        assert_eq!(rmse(&m, &[e(0, 0, 1), e(1, 0, 0)]).unwrap(), 1.0);
        assert!(rmse(&m, &[]).is_err());
    }

    #[test]
    fn ranking_cases() {
        let entries = [e(0, 0, 1), e(1, 0, 1), e(2, 0, 0)];
        let perfect = ranking_error(&entries, |x| x.value()).unwrap();
        assert_eq!(perfect, 0.0);
        assert_eq!(ranking_error(&entries, |_| 0.3).unwrap(), 0.5);
        // positives {0.9, 0.2}, negative {0.5}: one of two pairs wrong
        let s = [0.9, 0.2, 0.5];
        assert_eq!(ranking_error(&entries, |x| s[x.item]).unwrap(), 0.5);
        assert!(ranking_error(&[e(0, 0, 1), e(1, 1, 0)], |_| 0.0).is_err());
    }

    #[test]
    fn knn_hand_computed() {
        // rows: (1,0), (1,1), (0,1), (-1,0); query (2,1)
        let idx = emb(&[&[1.0, 0.0], &[1.0, 1.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let got = knn_cosine(&[2.0, 1.0], &idx, 4).unwrap();
        let order: Vec<usize> = got.iter().map(|g| g.0).collect();
        assert_eq!(order, vec![1, 0, 2, 3]);
        let s5 = 5f64.sqrt();
        let want = [3.0 / (s5 * 2f64.sqrt()), 2.0 / s5, 1.0 / s5, -2.0 / s5];
        for (g, w) in got.iter().zip(want) {
            assert!((g.1 - w).abs() < 1e-15);
        }
        let top = knn_cosine(&[0.0, 1.0], &idx, 1).unwrap();
        assert_eq!(top[0].0, 2);
        assert!((top[0].1 - 1.0).abs() < 1e-15);
        let orth = knn_cosine(&[0.0, 1.0], &idx, 4).unwrap();
        assert_eq!(orth.iter().find(|g| g.0 == 0).unwrap().1, 0.0);
    }

    #[test]
    fn knn_ties_and_zero_vectors() {
        let idx = emb(&[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]]);
        let got = knn_cosine(&[3.0, 0.0], &idx, 3).unwrap();
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert_eq!(got[2].1, 0.0);
        assert!(knn_cosine(&[1.0], &Embedding::new(1), 1).is_err());
    }

    #[test]
    fn jaccard_set_arithmetic() {
        assert_eq!(jaccard(&[1, 2, 3], &[2, 3, 4, 5]), 2.0 / 5.0);
        assert_eq!(jaccard(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(jaccard(&[1], &[2]), 0.0);
        assert_eq!(jaccard(&[], &[]), 0.0);
    }

    fn pos(i: usize, j: usize) -> Entry {
        e(i, j, 1)
    }

    #[test]
    fn owner_counts_toy() {
        // Query item 0 (owner user 9). Items 1..=5 are all nearer than item 6;
        // the owner viewed items 1, 3 and 5.
        let mut entries = vec![pos(0, 9), pos(1, 9), pos(3, 9), pos(5, 9)];
        entries.extend((1..7).map(|i| pos(i, i)));
        let mut m = ViewMatrix::from_entries(7, 10, entries).unwrap();
        m.set_owner(0, 9).unwrap();
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                if i == 6 {
                    vec![-1.0, 0.0]
                } else {
                    vec![1.0, i as f64 * 0.1]
                }
            })
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let x = emb(&refs);
        let r = owner_view_count(&[0], &x, &m, 5);
        assert_eq!(r.mean, 3.0);
        let none = owner_view_count(&[1], &x, &m, 5);
        assert_eq!((none.counted_queries, none.skipped_queries), (0, 1));
    }

    #[test]
    fn baseline_extremes() {
        let same =
            ViewMatrix::from_entries(4, 2, (0..4).flat_map(|i| [pos(i, 0), pos(i, 1)])).unwrap();
        assert_eq!(random_baseline(&same, 100, 1).unwrap().mean_jaccard, 1.0);
        let disjoint = ViewMatrix::from_entries(4, 4, (0..4).map(|i| pos(i, i))).unwrap();
        assert_eq!(
            random_baseline(&disjoint, 100, 1).unwrap().mean_jaccard,
            0.0
        );
        assert!(random_baseline(&disjoint, 0, 1).is_err());
    }
}

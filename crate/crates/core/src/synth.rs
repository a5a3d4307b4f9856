//! Planted synthetic corpora with known item clusters and factors.
//!
//! Items and users draw latent vectors from a `G`-component Gaussian
//! mixture with unit-norm component means; each item also carries a heavy-tailed popularity bias. A cell
//! is viewed when `y*_iᵀx*_j + bias_i + ε_ij` clears a global threshold
//! picked to hit the requested density.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{Entry, Signal, ViewMatrix};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::eval::{self, CosineIndex};
use crate::factorizer::LatentModel;
use crate::pseudoclass::PseudoClassAssignment;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub dim: usize,
    pub components: usize,
    /// Tail exponent of the Pareto draw behind item popularity bias.
    pub alpha: f64,
    pub noise_sd: f64,
    pub target_density: f64,
    /// Spread of a latent vector around its component mean, relative to
    /// the mean's expected norm.
    pub spread: f64,
    /// Multiplier on the `Pareto(alpha) − 1` bias draw.
    pub bias_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 2000,
            n_users: 1000,
            dim: 10,
            components: 10,
            alpha: 1.5,
            noise_sd: 0.1,
            target_density: 0.01,
            spread: 0.5,
            bias_scale: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub dim: usize,
    /// `M × d*`, row-major.
    pub item_factors: Vec<f64>,
    /// `N × d*`, row-major.
    pub user_factors: Vec<f64>,
    pub item_components: Vec<usize>,
    pub item_bias: Vec<f64>,
    pub threshold: f64,
    pub matrix: ViewMatrix,
}

fn gaussian_rows<R: Rng>(rng: &mut R, n: usize, dim: usize, sd: f64) -> Vec<f64> {
    (0..n * dim)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws a planted corpus from `cfg`.
pub fn generate_planted(cfg: &SynthConfig) -> Result<PlantedCorpus> {
    if cfg.n_items == 0 || cfg.n_users == 0 || cfg.dim == 0 || cfg.components == 0 {
        return Err(Error::InvalidArgument(
            "synthetic sizes must be positive".into(),
        ));
    }
    if cfg.alpha.is_nan() || cfg.alpha <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {}",
            cfg.alpha
        )));
    }
    let d = cfg.dim;
    let unit = 1.0 / (d as f64).sqrt();
    let mut rng = rng::stream(cfg.seed, Purpose::Synth, 0);

    let mut means = gaussian_rows(&mut rng, cfg.components, d, unit);
    // unit-norm means: no component dominates the global threshold by scale
    for mu in means.chunks_exact_mut(d) {
        let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            mu.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let draw_members = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let comps: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..cfg.components))
            .collect();
        let mut rows = gaussian_rows(rng, n, d, cfg.spread * unit);
        for (row, &c) in rows.chunks_exact_mut(d).zip(&comps) {
            for (v, mu) in row.iter_mut().zip(&means[c * d..(c + 1) * d]) {
                *v += mu;
            }
        }
        (comps, rows)
    };
    let (item_components, item_factors) = draw_members(cfg.n_items, &mut rng);
    let (_, user_factors) = draw_members(cfg.n_users, &mut rng);
    let item_bias: Vec<f64> = (0..cfg.n_items)
        .map(|_| {
            // inverse-CDF Pareto(alpha) with unit scale, shifted to start at 0
            let u: f64 = 1.0 - rng.random::<f64>();
            cfg.bias_scale * (u.powf(-1.0 / cfg.alpha) - 1.0)
        })
        .collect();

    plant(
        d,
        item_factors,
        user_factors,
        item_components,
        item_bias,
        cfg.noise_sd,
        cfg.target_density,
        cfg.seed,
    )
}

/// Thresholds explicit latent truth into a view matrix.
#[allow(clippy::too_many_arguments)]
pub fn plant(
    dim: usize,
    item_factors: Vec<f64>,
    user_factors: Vec<f64>,
    item_components: Vec<usize>,
    item_bias: Vec<f64>,
    noise_sd: f64,
    target_density: f64,
    seed: u64,
) -> Result<PlantedCorpus> {
    if !(target_density > 0.0 && target_density <= 0.05) {
        return Err(Error::InvalidArgument(format!(
            "target_density must lie in (0, 0.05], got {target_density}"
        )));
    }
    if noise_sd.is_nan() || noise_sd < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise_sd must be non-negative, got {noise_sd}"
        )));
    }
    let n_items = item_components.len();
    if item_factors.len() != n_items * dim
        || item_bias.len() != n_items
        || !user_factors.len().is_multiple_of(dim)
    {
        return Err(Error::LengthMismatch(
            "planted truth arrays disagree in shape".into(),
        ));
    }
    let n_users = user_factors.len() / dim;

    let mut noise_rng = rng::stream(seed, Purpose::Synth, 1);
    let mut scores = Vec::with_capacity(n_items * n_users);
    for i in 0..n_items {
        let y = &item_factors[i * dim..(i + 1) * dim];
        for x in user_factors.chunks_exact(dim) {
            let eps = if noise_sd > 0.0 {
                noise_sd * noise_rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            scores.push(y.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + item_bias[i] + eps);
        }
    }

    let cells = scores.len();
    let want = (target_density * cells as f64).round() as usize;
    if want == 0 {
        return Err(Error::InvalidArgument(
            "target density rounds to zero views".into(),
        ));
    }
    let mut sorted = scores.clone();
    let (_, &mut kth, _) = sorted.select_nth_unstable_by(want - 1, |a, b| b.total_cmp(a));
    // Ties at the k-th score: include them all (>=) or none (>), whichever
    // lands within 10% of the target.
    let at_least = scores.iter().filter(|&&s| s >= kth).count();
    let above = scores.iter().filter(|&&s| s > kth).count();
    let within = |c: usize| (c as f64 - want as f64).abs() <= 0.1 * want as f64 && c > 0;
    let inclusive = match (within(at_least), within(above)) {
        (true, true) => at_least - want <= want - above,
        (true, false) => true,
        (false, true) => false,
        (false, false) => {
            return Err(Error::InvalidArgument(format!(
                "no threshold brackets target density {target_density}: ties give {above} or {at_least} views"
            )))
        }
    };
    let viewed = |s: f64| if inclusive { s >= kth } else { s > kth };

    let entries = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| viewed(s))
        .map(|(c, _)| Entry::new(c / n_users, c % n_users, Signal::Positive));
    let mut matrix = ViewMatrix::from_entries(n_items, n_users, entries)?;

    let mut owner_rng = rng::stream(seed, Purpose::Synth, 2);
    for i in 0..n_items {
        let viewers: Vec<usize> = matrix.viewers(i).collect();
        if !viewers.is_empty() {
            let owner = viewers[owner_rng.random_range(0..viewers.len())];
            matrix.set_owner(i, owner)?;
        }
    }

    Ok(PlantedCorpus {
        dim,
        item_factors,
        user_factors,
        item_components,
        item_bias,
        threshold: kth,
        matrix,
    })
}

impl PlantedCorpus {
    pub fn true_item_embedding(&self) -> Embedding {
        let mut e = Embedding::new(self.dim);
        for (i, row) in self.item_factors.chunks_exact(self.dim).enumerate() {
            e.push(self.matrix.item_ids()[i].clone(), row)
                .expect("row length equals planted dimension");
        }
        e
    }

    /// Fraction of positives held by the most popular 10% of items.
    pub fn top_decile_share(&self) -> f64 {
        let mut pop: Vec<usize> = (0..self.matrix.n_items())
            .map(|i| self.matrix.viewers(i).count())
            .collect();
        pop.sort_unstable_by(|a, b| b.cmp(a));
        let top = pop.len().div_ceil(10);
        let total: usize = pop.iter().sum();
        pop[..top].iter().sum::<usize>() as f64 / total.max(1) as f64
    }

    /// Writes `views.tsv`, `owners.tsv`, and `truth.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = &self.matrix;

        let path = dir.join("views.tsv");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for e in m.entries() {
            writeln!(w, "{}\t{}", m.item_ids()[e.item], m.user_ids()[e.user])
                .map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        m.write_owners(&dir.join("owners.tsv"))?;

        let path = dir.join("truth.tsv");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for i in 0..m.n_items() {
            writeln!(
                w,
                "{}\t{}\t{}",
                m.item_ids()[i],
                self.item_components[i],
                self.item_bias[i]
            )
            .map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Reads `item_id<TAB>component<TAB>bias` into an id → component map.
pub fn read_truth(path: &Path) -> Result<HashMap<String, usize>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let f: Vec<&str> = line.split('\t').collect();
        let comp = (f.len() == 3 && f[2].parse::<f64>().is_ok())
            .then(|| f[1].parse::<usize>().ok())
            .flatten()
            .ok_or_else(|| {
                Error::parse(path, n + 1, "expected `item_id<TAB>component<TAB>bias`")
            })?;
        out.insert(f[0].to_owned(), comp);
    }
    Ok(out)
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(format!(
            "{} vs {} labels",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("ARI needs at least 2 points".into()));
    }
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| choose2(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| choose2(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| choose2(n)).sum();
    let expected = sum_a * sum_b / choose2(a.len());
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // Both partitions are all-singletons or both a single class.
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub ari: f64,
    /// Mean fraction of each item's 10 nearest true-factor neighbors that
    /// are also among its 10 nearest learned-factor neighbors.
    pub neighborhood_overlap: f64,
    pub val_rmse: f64,
    pub pr: f64,
}

/// Compares learned structure with the planted truth. `items` lists the
/// corpus item index behind each row of `assign.labels`.
pub fn oracle_check(
    corpus: &PlantedCorpus,
    model: &LatentModel,
    assign: &PseudoClassAssignment,
    items: &[usize],
    val: &[Entry],
) -> Result<OracleReport> {
    if assign.labels.len() != items.len() {
        return Err(Error::LengthMismatch(
            "assignment rows and item list differ".into(),
        ));
    }
    let truth: Vec<usize> = items.iter().map(|&i| corpus.item_components[i]).collect();
    let ari = adjusted_rand_index(&truth, &assign.labels)?;

    let truth_emb = corpus.true_item_embedding();
    let true_rows = Embedding::from_rows(
        corpus.dim,
        items
            .iter()
            .map(|&i| (String::new(), truth_emb.row(i).to_vec())),
    )?;
    let learned_rows = Embedding::from_rows(
        model.dim(),
        items
            .iter()
            .map(|&i| (String::new(), model.item(i).to_vec())),
    )?;
    let (ti, li) = (
        CosineIndex::new(&true_rows),
        CosineIndex::new(&learned_rows),
    );
    let k = 10.min(items.len().saturating_sub(1));
    let overlap: f64 = (0..items.len())
        .into_par_iter()
        .map(|r| {
            if k == 0 {
                return 0.0;
            }
            let a: Vec<usize> = ti
                .search(true_rows.row(r), k, None, Some(r))
                .into_iter()
                .map(|x| x.0)
                .collect();
            let b = li.search(learned_rows.row(r), k, None, Some(r));
            b.iter().filter(|x| a.contains(&x.0)).count() as f64 / k as f64
        })
        .sum::<f64>()
        / items.len().max(1) as f64;

    Ok(OracleReport {
        ari,
        neighborhood_overlap: overlap,
        val_rmse: eval::rmse(model, val)?,
        pr: eval::personalized_ranking(model, val)?,
    })
}

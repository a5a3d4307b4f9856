//! Popularity-weighted negative sampling over missing cells.
//!
//! Each missing cell `(i, j)` is drawn with probability proportional to a
//! weight of item `i`'s popularity, normalized per user; viewed cells have
//! probability zero. Per user, `round(neg_ratio × positives)` distinct cells
//! are drawn without replacement and recorded as negatives.

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::corpus::{Entry, PopularityTable, Signal, ViewMatrix};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// How an item's popularity count becomes a sampling weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `ln(1 + p)`
    #[default]
    LogPopularity,
    /// `p`
    Popularity,
}

impl Weighting {
    pub fn weight(self, popularity: usize) -> f64 {
        match self {
            Weighting::LogPopularity => (popularity as f64).ln_1p(),
            Weighting::Popularity => popularity as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub neg_ratio: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            neg_ratio: 2.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Number of negatives to request for a user with `positives` views.
    pub fn quota(&self, positives: usize) -> usize {
        (self.neg_ratio * positives as f64 + 0.5).floor() as usize
    }
}

/// Per-user categorical distributions over missing cells.
///
/// Stored as one weight per item plus each user's excluded (non-missing)
/// items; the per-user distribution is the item weights with the excluded
/// items zeroed, renormalized.
#[derive(Debug, Clone)]
pub struct SamplingDistribution {
    weights: Vec<f64>,
    alias: Option<WeightedAliasIndex<f64>>,
    total: f64,
    excluded: Vec<Vec<usize>>,
    mass: Vec<f64>,
    support: Vec<usize>,
}

pub fn build_sampling_distribution(
    m: &ViewMatrix,
    p: &PopularityTable,
    weighting: Weighting,
) -> SamplingDistribution {
    let weights: Vec<f64> = p.counts().iter().map(|&c| weighting.weight(c)).collect();
    let total: f64 = weights.iter().sum();
    let n_weighted = weights.iter().filter(|&&w| w > 0.0).count();
    let alias = WeightedAliasIndex::new(weights.clone()).ok();

    let mut excluded = vec![Vec::new(); m.n_users()];
    for e in m.entries() {
        excluded[e.user].push(e.item);
    }
    let (mass, support) = excluded
        .iter()
        .map(|ex| {
            let ex_mass: f64 = ex.iter().map(|&i| weights[i]).sum();
            let ex_support = ex.iter().filter(|&&i| weights[i] > 0.0).count();
            let support = n_weighted - ex_support;
            let mass = if support == 0 { 0.0 } else { total - ex_mass };
            (mass, support)
        })
        .unzip();

    SamplingDistribution {
        weights,
        alias,
        total,
        excluded,
        mass,
        support,
    }
}

impl SamplingDistribution {
    pub fn n_items(&self) -> usize {
        self.weights.len()
    }

    pub fn n_users(&self) -> usize {
        self.excluded.len()
    }

    pub fn item_weight(&self, item: usize) -> f64 {
        self.weights[item]
    }

    fn is_excluded(&self, user: usize, item: usize) -> bool {
        self.excluded[user].binary_search(&item).is_ok()
    }

    /// Number of missing cells with nonzero weight for `user`.
    pub fn support_size(&self, user: usize) -> usize {
        self.support[user]
    }

    /// `Pr(item | user)`.
    pub fn prob(&self, item: usize, user: usize) -> f64 {
        if self.support[user] == 0 || self.is_excluded(user, item) {
            0.0
        } else {
            self.weights[item] / self.mass[user]
        }
    }

    /// Full distribution for one user, indexed by item.
    pub fn user_probs(&self, user: usize) -> Vec<f64> {
        (0..self.n_items()).map(|i| self.prob(i, user)).collect()
    }

    /// Draws up to `n` distinct missing items for `user`, in draw order.
    /// Each draw is proportional to weight among the items not yet drawn.
    pub fn draw<R: Rng>(&self, user: usize, n: usize, rng: &mut R) -> Vec<usize> {
        let support = self.support[user];
        if n == 0 || support == 0 {
            return Vec::new();
        }
        if n >= support {
            return (0..self.n_items())
                .filter(|&i| self.weights[i] > 0.0 && !self.is_excluded(user, i))
                .collect();
        }
        // Rejection against the global alias table is cheap while the user's
        // excluded mass and the requested share of the support stay small.
        let sparse_user = self.mass[user] >= 0.5 * self.total && 2 * n <= support;
        match &self.alias {
            Some(alias) if sparse_user => self.draw_by_rejection(alias, user, n, rng),
            _ => self.draw_by_keys(user, n, rng),
        }
    }

    fn draw_by_rejection<R: Rng>(
        &self,
        alias: &WeightedAliasIndex<f64>,
        user: usize,
        n: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        let mut drawn = Vec::with_capacity(n);
        while drawn.len() < n {
            let i = alias.sample(rng);
            if !self.is_excluded(user, i) && !drawn.contains(&i) {
                drawn.push(i);
            }
        }
        drawn
    }

    /// Exponential-key scan: key_i = E_i / w_i with E_i ~ Exp(1); the `n`
    /// smallest keys, ascending, are distributed as successive weighted
    /// draws without replacement.
    fn draw_by_keys<R: Rng>(&self, user: usize, n: usize, rng: &mut R) -> Vec<usize> {
        let mut keyed: Vec<(f64, usize)> = (0..self.n_items())
            .filter(|&i| self.weights[i] > 0.0 && !self.is_excluded(user, i))
            .map(|i| {
                let e: f64 = Exp1.sample(rng);
                (e / self.weights[i], i)
            })
            .collect();
        keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.truncate(n);
        keyed.into_iter().map(|(_, i)| i).collect()
    }

    #[cfg(test)]
    fn total_weight(&self) -> (f64, usize) {
        (
            self.total,
            self.weights.iter().filter(|&&w| w > 0.0).count(),
        )
    }
}

/// Draws negatives for every user and returns the augmented matrix.
///
/// User `j` draws from its own stream keyed by `(seed, j)`, so the result
/// does not depend on thread count.
pub fn sample_negatives(
    m: &ViewMatrix,
    dist: &SamplingDistribution,
    cfg: &SamplerConfig,
) -> Result<ViewMatrix> {
    if !(cfg.neg_ratio > 0.0 && cfg.neg_ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "neg_ratio must be positive, got {}",
            cfg.neg_ratio
        )));
    }
    if dist.n_items() != m.n_items() || dist.n_users() != m.n_users() {
        return Err(Error::LengthMismatch(
            "sampling distribution was built for a different matrix".into(),
        ));
    }
    let positives = m.user_columns();
    let drawn: Vec<Vec<usize>> = (0..m.n_users())
        .into_par_iter()
        .map(|j| {
            let n = cfg.quota(positives[j].positives.len());
            let mut rng = rng::stream(cfg.seed, Purpose::Negatives, j as u64);
            dist.draw(j, n, &mut rng)
        })
        .collect();

    let mut out = m.clone();
    for (j, items) in drawn.into_iter().enumerate() {
        for i in items {
            out.insert(Entry::new(i, j, Signal::Negative))?;
        }
    }
    Ok(out)
}

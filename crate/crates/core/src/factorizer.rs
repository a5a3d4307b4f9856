//! Regularized matrix factorization of the non-missing cells by SGD.
//!
//! Minimizes `Σ (v_ij − y_iᵀx_j)² + λ(‖x_j‖² + ‖y_i‖²)` over the training
//! cells, with the regularizer applied once per visited cell. Each epoch
//! visits every cell once in a fresh seeded permutation.
//!
//! With `workers > 1` the permutation is cut into contiguous chunks that
//! run concurrently against shared factor storage, without locks. Factor
//! values live in `AtomicU64` cells accessed with relaxed ordering, so
//! concurrent read-modify-write sequences on the same vector may interleave
//! (updates can be lost) but no access is undefined behaviour.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{CorpusSplit, Entry, ViewMatrix};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::eval;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    dim: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl LatentModel {
    pub fn zeros(n_items: usize, n_users: usize, dim: usize) -> Self {
        LatentModel {
            dim,
            users: vec![0.0; n_users * dim],
            items: vec![0.0; n_items * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_items(&self) -> usize {
        self.items.len() / self.dim.max(1)
    }

    pub fn n_users(&self) -> usize {
        self.users.len() / self.dim.max(1)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub fn user(&self, j: usize) -> &[f64] {
        &self.users[j * self.dim..(j + 1) * self.dim]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub fn user_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.users[j * self.dim..(j + 1) * self.dim]
    }

    /// `y_iᵀ x_j` without bounds reporting.
    pub fn score(&self, i: usize, j: usize) -> f64 {
        dot(self.item(i), self.user(j))
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|v| v.is_finite())
    }

    /// Item factors for `items`, keyed by the matrix's item ids.
    pub fn item_embedding(&self, m: &ViewMatrix, items: &[usize]) -> Embedding {
        let mut e = Embedding::new(self.dim);
        for &i in items {
            e.push(m.item_ids()[i].clone(), self.item(i))
                .expect("row length equals model dimension");
        }
        e
    }

    pub fn user_embedding(&self, m: &ViewMatrix) -> Embedding {
        let mut e = Embedding::new(self.dim);
        for j in 0..self.n_users() {
            e.push(m.user_ids()[j].clone(), self.user(j))
                .expect("row length equals model dimension");
        }
        e
    }

    /// Rebuilds a model over `m`'s index space from factor files. Ids absent
    /// from the embeddings get zero vectors; ids unknown to `m` are ignored.
    pub fn from_embeddings(m: &ViewMatrix, items: &Embedding, users: &Embedding) -> Result<Self> {
        if items.dim() != users.dim() {
            return Err(Error::LengthMismatch(format!(
                "item factors have dim {}, user factors {}",
                items.dim(),
                users.dim()
            )));
        }
        let mut model = Self::zeros(m.n_items(), m.n_users(), items.dim());
        for (k, id) in items.ids().iter().enumerate() {
            if let Some(i) = m.item_of(id) {
                model.item_mut(i).copy_from_slice(items.row(k));
            }
        }
        for (k, id) in users.ids().iter().enumerate() {
            if let Some(j) = m.user_of(id) {
                model.user_mut(j).copy_from_slice(users.row(k));
            }
        }
        Ok(model)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub dim: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub workers: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            dim: 100,
            lr0: 0.02,
            lr_decay: 0.95,
            epochs: 40,
            workers: 1,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!(
                "init_scale must be non-negative, got {}",
                self.init_scale
            ));
        }
        Ok(())
    }

    /// Step size used during `epoch` (counted from 0).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    fn header(&self) -> String {
        format!(
            "# lambda={} dim={} lr={} lr_decay={} epochs={} workers={} seed={} init_scale={}",
            self.lambda,
            self.dim,
            self.lr0,
            self.lr_decay,
            self.epochs,
            self.workers,
            self.seed,
            self.init_scale
        )
    }
}

/// Gaussian initialization with standard deviation `init_scale / √d`.
pub fn init_model(cfg: &TrainConfig, n_items: usize, n_users: usize) -> LatentModel {
    let sd = cfg.init_scale / (cfg.dim as f64).sqrt();
    let mut rng = rng::stream(cfg.seed, Purpose::Init, 0);
    let mut model = LatentModel::zeros(n_items, n_users, cfg.dim);
    for v in model.users.iter_mut().chain(model.items.iter_mut()) {
        let z: f64 = rng.sample(StandardNormal);
        *v = sd * z;
    }
    model
}

/// Sum over `entries` of squared error plus the per-cell regularizer.
pub fn objective(model: &LatentModel, entries: &[Entry], lambda: f64) -> f64 {
    entries
        .iter()
        .map(|e| {
            let (y, x) = (model.item(e.item), model.user(e.user));
            let err = e.value() - dot(y, x);
            err * err + lambda * (dot(x, x) + dot(y, y))
        })
        .sum()
}

/// Simultaneous update of `x` and `y` for one cell with value `v`, using
/// the pre-update values on both right-hand sides. Returns false if any
/// updated coordinate is non-finite.
#[inline]
fn update_pair(x: &mut [f64], y: &mut [f64], v: f64, lr: f64, lambda: f64) -> bool {
    let err = v - dot(y, x);
    let mut finite = true;
    for (xk, yk) in x.iter_mut().zip(y.iter_mut()) {
        let (x0, y0) = (*xk, *yk);
        *xk = x0 + lr * (err * y0 - lambda * x0);
        *yk = y0 + lr * (err * x0 - lambda * y0);
        finite &= xk.is_finite() && yk.is_finite();
    }
    finite
}

/// One SGD step on a single cell. `epoch` only labels the divergence error.
pub fn sgd_step(
    model: &mut LatentModel,
    entry: Entry,
    lr: f64,
    lambda: f64,
    epoch: usize,
) -> Result<()> {
    let d = model.dim;
    let x = &mut model.users[entry.user * d..(entry.user + 1) * d];
    let y = &mut model.items[entry.item * d..(entry.item + 1) * d];
    if update_pair(x, y, entry.value(), lr, lambda) {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            item: entry.item,
            user: entry.user,
        })
    }
}

/// `y_iᵀ x_j`, checking both indices.
pub fn predict(model: &LatentModel, i: usize, j: usize) -> Result<f64> {
    if i >= model.n_items() {
        return Err(Error::IndexOutOfRange {
            what: "items",
            index: i,
            len: model.n_items(),
        });
    }
    if j >= model.n_users() {
        return Err(Error::IndexOutOfRange {
            what: "users",
            index: j,
            len: model.n_users(),
        });
    }
    Ok(model.score(i, j))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_objective: f64,
    pub val_rmse: f64,
}

/// Per-epoch training trace. Row 0 describes the initial model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn initial(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("log has the initial record")
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.config.header();
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{}", r.epoch, r.train_objective, r.val_rmse);
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_tsv().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Trains on `split.train`, reporting validation RMSE on `split.val`.
pub fn train(
    m: &ViewMatrix,
    split: &CorpusSplit,
    cfg: &TrainConfig,
) -> Result<(LatentModel, TrainLog)> {
    fit(m.n_items(), m.n_users(), &split.train, &split.val, cfg)
}

/// Same as [`train`] on explicit entry lists.
pub fn fit(
    n_items: usize,
    n_users: usize,
    train: &[Entry],
    val: &[Entry],
    cfg: &TrainConfig,
) -> Result<(LatentModel, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set is empty"));
    }
    for e in train.iter().chain(val) {
        if e.item >= n_items || e.user >= n_users {
            return Err(Error::IndexOutOfRange {
                what: "model",
                index: e.item.max(e.user),
                len: n_items.min(n_users),
            });
        }
    }

    let mut model = init_model(cfg, n_items, n_users);
    let record = |epoch: usize, model: &LatentModel| EpochRecord {
        epoch,
        train_objective: objective(model, train, cfg.lambda),
        val_rmse: if val.is_empty() {
            f64::NAN
        } else {
            eval::rmse(model, val).expect("validation set is non-empty")
        },
    };
    let mut log = TrainLog {
        config: cfg.clone(),
        records: vec![record(0, &model)],
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Epoch, epoch as u64));
        let visits = order.iter().map(|&k| train[k]);
        if cfg.workers == 1 {
            for e in visits {
                sgd_step(&mut model, e, lr, cfg.lambda, epoch + 1)?;
            }
        } else {
            let batch: Vec<Entry> = visits.collect();
            run_lock_free(&mut model, &batch, lr, cfg.lambda, cfg.workers, epoch + 1)?;
        }
        if !model.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                item: 0,
                user: 0,
            });
        }
        log.records.push(record(epoch + 1, &model));
    }
    Ok((model, log))
}

/// Factor storage shared between workers without locking.
struct SharedFactors {
    dim: usize,
    users: Vec<AtomicU64>,
    items: Vec<AtomicU64>,
}

impl SharedFactors {
    fn from_model(model: &LatentModel) -> Self {
        let wrap = |v: &[f64]| v.iter().map(|f| AtomicU64::new(f.to_bits())).collect();
        SharedFactors {
            dim: model.dim,
            users: wrap(&model.users),
            items: wrap(&model.items),
        }
    }

    fn write_back(&self, model: &mut LatentModel) {
        let unwrap = |src: &[AtomicU64], dst: &mut [f64]| {
            for (a, d) in src.iter().zip(dst) {
                *d = f64::from_bits(a.load(Ordering::Relaxed));
            }
        };
        unwrap(&self.users, &mut model.users);
        unwrap(&self.items, &mut model.items);
    }

    fn load(cells: &[AtomicU64], out: &mut [f64]) {
        for (a, o) in cells.iter().zip(out) {
            *o = f64::from_bits(a.load(Ordering::Relaxed));
        }
    }

    fn store(cells: &[AtomicU64], vals: &[f64]) {
        for (a, v) in cells.iter().zip(vals) {
            a.store(v.to_bits(), Ordering::Relaxed);
        }
    }

    fn step(&self, e: Entry, lr: f64, lambda: f64, x: &mut [f64], y: &mut [f64]) -> bool {
        let d = self.dim;
        let xs = &self.users[e.user * d..(e.user + 1) * d];
        let ys = &self.items[e.item * d..(e.item + 1) * d];
        Self::load(xs, x);
        Self::load(ys, y);
        let ok = update_pair(x, y, e.value(), lr, lambda);
        Self::store(xs, x);
        Self::store(ys, y);
        ok
    }
}

fn run_lock_free(
    model: &mut LatentModel,
    batch: &[Entry],
    lr: f64,
    lambda: f64,
    workers: usize,
    epoch: usize,
) -> Result<()> {
    let shared = SharedFactors::from_model(model);
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let chunk = batch.len().div_ceil(workers);

    std::thread::scope(|s| {
        for part in batch.chunks(chunk) {
            let (shared, abort, failure) = (&shared, &abort, &failure);
            s.spawn(move || {
                let mut x = vec![0.0; shared.dim];
                let mut y = vec![0.0; shared.dim];
                for &e in part {
                    if abort.load(Ordering::Relaxed) {
                        return;
                    }
                    if !shared.step(e, lr, lambda, &mut x, &mut y) {
                        abort.store(true, Ordering::Relaxed);
                        let mut f = failure.lock().unwrap();
                        f.get_or_insert(Error::Divergence {
                            epoch,
                            item: e.item,
                            user: e.user,
                        });
                        return;
                    }
                }
            });
        }
    });

    shared.write_back(model);
    match failure.into_inner().unwrap() {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Signal;

    fn cfg(dim: usize) -> TrainConfig {
        TrainConfig {
            dim,
            ..TrainConfig::default()
        }
    }

    fn entry(i: usize, j: usize, v: u8) -> Entry {
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

    fn model_from(dim: usize, items: &[&[f64]], users: &[&[f64]]) -> LatentModel {
        LatentModel {
            dim,
            items: items.concat(),
            users: users.concat(),
        }
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let c = cfg(100);
        let a = init_model(&c, 5000, 5000);
        assert_eq!(a, init_model(&c, 5000, 5000));
        let all: Vec<f64> = a.items.iter().chain(&a.users).copied().collect();
        assert_eq!(all.len(), 1_000_000);
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (all.len() - 1) as f64;
        assert!((var.sqrt() - 0.01).abs() < 0.001, "sd {}", var.sqrt());

        let zero = init_model(
            &TrainConfig {
                init_scale: 0.0,
                ..c
            },
            3,
            2,
        );
        assert_eq!(zero, LatentModel::zeros(3, 2, 100));
    }

    #[test]
    fn objective_of_zero_model_counts_positives() {
        let m = LatentModel::zeros(2, 2, 3);
        let e = [entry(0, 0, 1), entry(0, 1, 0), entry(1, 1, 1)];
        assert_eq!(objective(&m, &e, 0.0), 2.0);
    }

    #[test]
    fn objective_of_exact_rank_one_fit_is_zero() {
        let m = model_from(1, &[&[1.0], &[1.0]], &[&[1.0], &[1.0]]);
        let e = [
            entry(0, 0, 1),
            entry(0, 1, 1),
            entry(1, 0, 1),
            entry(1, 1, 1),
        ];
        assert_eq!(objective(&m, &e, 0.0), 0.0);
    }

    #[test]
    fn objective_by_hand() {
        // y0=(1,2) y1=(0.5,-1); x0=(1,0) x1=(-1,1); lambda = 0.1
        // (0,0,1): pred 1, err 0; reg 0.1*(1+5) = 0.6
        // (0,1,0): pred 1, err -1 -> 1; reg 0.1*(2+5) = 0.7
        // (1,1,1): pred -1.5, err 2.5 -> 6.25; reg 0.1*(2+1.25) = 0.325
        let m = model_from(
            2,
            &[&[1.0, 2.0], &[0.5, -1.0]],
            &[&[1.0, 0.0], &[-1.0, 1.0]],
        );
        let e = [entry(0, 0, 1), entry(0, 1, 0), entry(1, 1, 1)];
        let got = objective(&m, &e, 0.1);
        assert!((got - 8.875).abs() < 1e-12, "{got}");
    }

    #[test]
    fn step_at_stationary_point_is_no_op() {
        let mut m = model_from(1, &[&[1.0]], &[&[1.0]]);
        let before = m.clone();
        sgd_step(&mut m, entry(0, 0, 1), 0.5, 0.0, 0).unwrap();
        assert_eq!(m, before);

        let mut m = model_from(2, &[&[0.0, 0.0]], &[&[0.3, 0.7]]);
        let before = m.clone();
        sgd_step(&mut m, entry(0, 0, 0), 0.1, 0.0, 0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn step_uses_pre_update_values() {
        // d=1, x=2, y=3, v=1, lr=0.1, lambda=0: err = -5
        // x' = 2 + 0.1*(-5*3) = 0.5 ; y' = 3 + 0.1*(-5*2) = 2
        let mut m = model_from(1, &[&[3.0]], &[&[2.0]]);
        sgd_step(&mut m, entry(0, 0, 1), 0.1, 0.0, 0).unwrap();
        assert!((m.user(0)[0] - 0.5).abs() < 1e-15);
        assert!((m.item(0)[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn step_matches_central_differences() {
        let m0 = model_from(2, &[&[0.4, -0.3]], &[&[0.2, 0.9]]);
        let e = [entry(0, 0, 1)];
        let (lr, lambda, h) = (0.05, 0.01, 1e-6);
        let mut m1 = m0.clone();
        sgd_step(&mut m1, e[0], lr, lambda, 0).unwrap();
        // step = -(lr / 2) * gradient of the single-cell summand
        for k in 0..2 {
            for is_user in [true, false] {
                let bump = |delta: f64| {
                    let mut m = m0.clone();
                    if is_user {
                        m.user_mut(0)[k] += delta;
                    } else {
                        m.item_mut(0)[k] += delta;
                    }
                    objective(&m, &e, lambda)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let (new, old) = if is_user {
                    (m1.user(0)[k], m0.user(0)[k])
                } else {
                    (m1.item(0)[k], m0.item(0)[k])
                };
                let analytic = -(new - old) * 2.0 / lr;
                assert!(((analytic - fd) / fd).abs() < 1e-4, "{analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn step_reports_divergence() {
        let mut m = model_from(1, &[&[1e200]], &[&[1e200]]);
        let err = sgd_step(&mut m, entry(0, 0, 1), 1.0, 0.0, 7).unwrap_err();
        assert!(matches!(
            err,
            Error::Divergence {
                epoch: 7,
                item: 0,
                user: 0
            }
        ));
    }

    #[test]
    fn predict_checks_indices() {
        let m = model_from(2, &[&[1.0, 2.0]], &[&[3.0, -1.0]]);
        assert_eq!(predict(&m, 0, 0).unwrap(), 1.0);
        assert!(predict(&m, 1, 0).is_err());
        assert!(predict(&m, 0, 1).is_err());
        assert_eq!(predict(&LatentModel::zeros(1, 1, 4), 0, 0).unwrap(), 0.0);
        let swapped = model_from(2, &[&[3.0, -1.0]], &[&[1.0, 2.0]]);
        assert_eq!(predict(&swapped, 0, 0).unwrap(), predict(&m, 0, 0).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lambda: -1.0,
                ..Default::default()
            },
            TrainConfig {
                dim: 0,
                ..Default::default()
            },
            TrainConfig {
                lr0: 0.0,
                ..Default::default()
            },
            TrainConfig {
                lr_decay: 1.5,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                workers: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let c = TrainConfig::default();
        assert!((c.learning_rate(2) - 0.02 * 0.95 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn fit_rejects_empty_training_set() {
        assert!(matches!(fit(2, 2, &[], &[], &cfg(2)), Err(Error::Empty(_))));
    }

    #[test]
    fn log_header_echoes_config() {
        let e = [entry(0, 0, 1), entry(1, 0, 0)];
        let c = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (_, log) = fit(2, 1, &e, &[], &c).unwrap();
        let text = log.to_tsv();
        let mut lines = text.lines();
        assert!(lines
            .next()
            .unwrap()
            .starts_with("# lambda=0.01 dim=100 lr=0.02 lr_decay=0.95"));
        assert_eq!(lines.count(), 3);
        assert!(log.last().val_rmse.is_nan());
    }
}

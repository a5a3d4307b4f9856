//! Sparse ternary view matrix: ingestion, activity filtering, and splits.
//!
//! Cells hold `1` (viewed), `0` (sampled negative), or are absent (missing,
//! conventionally `-1`). Items are rows, users are columns.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Value of a non-missing cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Signal {
    Negative,
    Positive,
}

impl Signal {
    pub fn value(self) -> f64 {
        match self {
            Signal::Negative => 0.0,
            Signal::Positive => 1.0,
        }
    }

    fn code(self) -> &'static str {
        match self {
            Signal::Negative => "0",
            Signal::Positive => "1",
        }
    }

    fn from_code(code: &str) -> Option<Self> {
        match code {
            "0" => Some(Signal::Negative),
            "1" => Some(Signal::Positive),
            _ => None,
        }
    }
}

/// One non-missing cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entry {
    pub item: usize,
    pub user: usize,
    pub signal: Signal,
}

impl Entry {
    pub fn new(item: usize, user: usize, signal: Signal) -> Self {
        Entry { item, user, signal }
    }

    pub fn value(&self) -> f64 {
        self.signal.value()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViewMatrix {
    item_ids: Vec<String>,
    user_ids: Vec<String>,
    item_index: HashMap<String, usize>,
    user_index: HashMap<String, usize>,
    rows: Vec<BTreeMap<usize, Signal>>,
    owners: BTreeMap<usize, usize>,
}

impl ViewMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix with `n_items` × `n_users` and generated ids
    /// (`i0`, `i1`, ... and `u0`, `u1`, ...), then inserts `entries`.
    pub fn from_entries(
        n_items: usize,
        n_users: usize,
        entries: impl IntoIterator<Item = Entry>,
    ) -> Result<Self> {
        let mut m = Self::new();
        for i in 0..n_items {
            m.intern_item(&format!("i{i}"));
        }
        for j in 0..n_users {
            m.intern_user(&format!("u{j}"));
        }
        for e in entries {
            m.insert(e)?;
        }
        Ok(m)
    }

    /// Index of `id`, appending it if unseen.
    pub fn intern_item(&mut self, id: &str) -> usize {
        if let Some(&i) = self.item_index.get(id) {
            return i;
        }
        let i = self.item_ids.len();
        self.item_ids.push(id.to_owned());
        self.item_index.insert(id.to_owned(), i);
        self.rows.push(BTreeMap::new());
        i
    }

    /// Index of `id`, appending it if unseen.
    pub fn intern_user(&mut self, id: &str) -> usize {
        if let Some(&j) = self.user_index.get(id) {
            return j;
        }
        let j = self.user_ids.len();
        self.user_ids.push(id.to_owned());
        self.user_index.insert(id.to_owned(), j);
        j
    }

    /// Sets a cell. Re-inserting the same value is a no-op; overwriting a
    /// non-missing cell with a different value is rejected.
    pub fn insert(&mut self, e: Entry) -> Result<()> {
        self.check_item(e.item)?;
        self.check_user(e.user)?;
        match self.rows[e.item].get(&e.user) {
            Some(&s) if s != e.signal => Err(Error::InvalidArgument(format!(
                "cell ({}, {}) already holds {:?}",
                self.item_ids[e.item], self.user_ids[e.user], s
            ))),
            Some(_) => Ok(()),
            None => {
                self.rows[e.item].insert(e.user, e.signal);
                Ok(())
            }
        }
    }

    pub fn set_owner(&mut self, item: usize, user: usize) -> Result<()> {
        self.check_item(item)?;
        self.check_user(user)?;
        self.owners.insert(item, user);
        Ok(())
    }

    fn check_item(&self, i: usize) -> Result<()> {
        if i < self.n_items() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                what: "items",
                index: i,
                len: self.n_items(),
            })
        }
    }

    fn check_user(&self, j: usize) -> Result<()> {
        if j < self.n_users() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                what: "users",
                index: j,
                len: self.n_users(),
            })
        }
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_of(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn user_of(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn owners(&self) -> &BTreeMap<usize, usize> {
        &self.owners
    }

    pub fn owner(&self, item: usize) -> Option<usize> {
        self.owners.get(&item).copied()
    }

    pub fn get(&self, item: usize, user: usize) -> Option<Signal> {
        self.rows.get(item)?.get(&user).copied()
    }

    /// Number of non-missing cells.
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(BTreeMap::len).sum()
    }

    pub fn n_positive(&self) -> usize {
        self.entries()
            .filter(|e| e.signal == Signal::Positive)
            .count()
    }

    /// `nnz / (M·N)`, or 0 for an empty shape.
    pub fn density(&self) -> f64 {
        let cells = self.n_items() as f64 * self.n_users() as f64;
        if cells == 0.0 {
            0.0
        } else {
            self.nnz() as f64 / cells
        }
    }

    pub fn positive_density(&self) -> f64 {
        let cells = self.n_items() as f64 * self.n_users() as f64;
        if cells == 0.0 {
            0.0
        } else {
            self.n_positive() as f64 / cells
        }
    }

    /// Non-missing cells of one item, ordered by user index.
    pub fn row(&self, item: usize) -> impl Iterator<Item = Entry> + '_ {
        self.rows[item]
            .iter()
            .map(move |(&user, &signal)| Entry { item, user, signal })
    }

    /// All non-missing cells in (item, user) order.
    pub fn entries(&self) -> impl Iterator<Item = Entry> + '_ {
        (0..self.n_items()).flat_map(move |i| self.row(i))
    }

    /// Users with a positive cell for `item`, ascending.
    pub fn viewers(&self, item: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows[item]
            .iter()
            .filter(|(_, &s)| s == Signal::Positive)
            .map(|(&j, _)| j)
    }

    /// Per-user sorted lists of items with a non-missing cell, split by signal.
    pub fn user_columns(&self) -> Vec<UserColumn> {
        let mut cols = vec![UserColumn::default(); self.n_users()];
        for e in self.entries() {
            match e.signal {
                Signal::Positive => cols[e.user].positives.push(e.item),
                Signal::Negative => cols[e.user].negatives.push(e.item),
            }
        }
        cols
    }

    /// Id-level view of the contents, independent of index assignment.
    pub fn triples(&self) -> BTreeSet<(String, String, Signal)> {
        self.entries()
            .map(|e| {
                (
                    self.item_ids[e.item].clone(),
                    self.user_ids[e.user].clone(),
                    e.signal,
                )
            })
            .collect()
    }

    /// Writes `item_id<TAB>user_id<TAB>value` lines in (item, user) order.
    pub fn export_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in self.entries() {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.item_ids[e.item],
                self.user_ids[e.user],
                e.signal.code()
            )
            .map_err(|err| Error::io(path, err))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a matrix export, optionally attaching an owners file.
    pub fn read_tsv(path: &Path, owners: Option<&Path>) -> Result<Self> {
        let mut m = Self::new();
        for_each_record(path, 3, |line, fields| {
            let signal = Signal::from_code(fields[2]).ok_or_else(|| {
                Error::parse(
                    path,
                    line,
                    format!("value must be 0 or 1, got `{}`", fields[2]),
                )
            })?;
            let i = m.intern_item(fields[0]);
            let j = m.intern_user(fields[1]);
            m.insert(Entry::new(i, j, signal))
                .map_err(|e| Error::parse(path, line, e.to_string()))
        })?;
        if let Some(owners) = owners {
            m.attach_owners(owners)?;
        }
        Ok(m)
    }

    /// Reads `item_id<TAB>owner_user_id`. Unknown items are an error; unknown
    /// owners are appended as users with no views.
    pub fn attach_owners(&mut self, path: &Path) -> Result<()> {
        for_each_record(path, 2, |_, fields| {
            let item = self
                .item_of(fields[0])
                .ok_or_else(|| Error::UnknownItem(fields[0].to_owned()))?;
            let user = self.intern_user(fields[1]);
            self.owners.insert(item, user);
            Ok(())
        })
    }

    /// Like [`ViewMatrix::attach_owners`], but skips rows naming items that
    /// are not in the matrix. Returns how many rows were skipped.
    pub fn attach_owners_lenient(&mut self, path: &Path) -> Result<usize> {
        let mut skipped = 0;
        for_each_record(path, 2, |_, fields| {
            match self.item_of(fields[0]) {
                Some(item) => {
                    let user = self.intern_user(fields[1]);
                    self.owners.insert(item, user);
                }
                None => skipped += 1,
            }
            Ok(())
        })?;
        Ok(skipped)
    }

    pub fn write_owners(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (&i, &j) in &self.owners {
            writeln!(w, "{}\t{}", self.item_ids[i], self.user_ids[j])
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Keeps the listed items and users (each list ascending), re-indexing
    /// in their original relative order. Owners pointing at a dropped user
    /// are discarded.
    pub fn restrict(&self, items: &[usize], users: &[usize]) -> Self {
        let mut user_map = vec![None; self.n_users()];
        let mut out = Self::new();
        for &j in users {
            user_map[j] = Some(out.intern_user(&self.user_ids[j]));
        }
        for &i in items {
            let ni = out.intern_item(&self.item_ids[i]);
            for (&j, &s) in &self.rows[i] {
                if let Some(nj) = user_map[j] {
                    out.rows[ni].insert(nj, s);
                }
            }
            if let Some(nj) = self.owner(i).and_then(|j| user_map[j]) {
                out.owners.insert(ni, nj);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserColumn {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Calls `f(line_number, fields)` for every line of a TSV file, requiring
/// exactly `arity` non-empty tab-separated fields per line.
fn for_each_record(
    path: &Path,
    arity: usize,
    mut f: impl FnMut(usize, &[&str]) -> Result<()>,
) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != arity || fields.iter().any(|s| s.is_empty()) {
            return Err(Error::parse(
                path,
                n + 1,
                format!("expected {arity} non-empty tab-separated fields"),
            ));
        }
        f(n + 1, &fields)?;
    }
    Ok(())
}

/// Reads an `item_id<TAB>user_id` view log. Repeat views collapse into one
/// positive cell; ids are indexed in order of first appearance.
pub fn ingest_views(views: &Path, owners: Option<&Path>) -> Result<ViewMatrix> {
    let mut m = ViewMatrix::new();
    for_each_record(views, 2, |_, fields| {
        let i = m.intern_item(fields[0]);
        let j = m.intern_user(fields[1]);
        m.rows[i].insert(j, Signal::Positive);
        Ok(())
    })?;
    if let Some(owners) = owners {
        m.attach_owners(owners)?;
    }
    Ok(m)
}

/// Repeatedly drops items and users whose positive count falls outside
/// `[min_count, max_count]` until no more removals happen.
pub fn apply_activity_filter(
    m: &ViewMatrix,
    min_count: usize,
    max_count: usize,
) -> Result<ViewMatrix> {
    if min_count > max_count {
        return Err(Error::InvalidArgument(format!(
            "min_count {min_count} exceeds max_count {max_count}"
        )));
    }
    let mut item_alive = vec![true; m.n_items()];
    let mut user_alive = vec![true; m.n_users()];
    let in_bounds = |c: usize| (min_count..=max_count).contains(&c);

    loop {
        let mut item_count = vec![0usize; m.n_items()];
        let mut user_count = vec![0usize; m.n_users()];
        for e in m.entries() {
            if e.signal == Signal::Positive && item_alive[e.item] && user_alive[e.user] {
                item_count[e.item] += 1;
                user_count[e.user] += 1;
            }
        }
        let mut changed = false;
        for (alive, &c) in item_alive.iter_mut().zip(&item_count) {
            if *alive && !in_bounds(c) {
                *alive = false;
                changed = true;
            }
        }
        for (alive, &c) in user_alive.iter_mut().zip(&user_count) {
            if *alive && !in_bounds(c) {
                *alive = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let items: Vec<usize> = (0..m.n_items()).filter(|&i| item_alive[i]).collect();
    let users: Vec<usize> = (0..m.n_users()).filter(|&j| user_alive[j]).collect();
    let out = m.restrict(&items, &users);
    if out.nnz() == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

/// Per-item count of positive cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopularityTable(pub Vec<usize>);

impl PopularityTable {
    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

pub fn popularity(m: &ViewMatrix) -> PopularityTable {
    PopularityTable((0..m.n_items()).map(|i| m.viewers(i).count()).collect())
}

/// Partition of items into training (`tr`) and held-out (`te`) sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemSplit {
    pub tr_items: Vec<usize>,
    pub te_items: Vec<usize>,
}

impl ItemSplit {
    /// Membership mask over all items.
    pub fn tr_mask(&self, n_items: usize) -> Vec<bool> {
        let mut mask = vec![false; n_items];
        for &i in &self.tr_items {
            mask[i] = true;
        }
        mask
    }
}

/// Item partition plus the train/validation partition of `tr` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub items: ItemSplit,
    pub train: Vec<Entry>,
    pub val: Vec<Entry>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Uniform seeded partition with `round(te_fraction · M)` held-out items.
pub fn split_items(m: &ViewMatrix, te_fraction: f64, seed: u64) -> Result<ItemSplit> {
    if !(te_fraction > 0.0 && te_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "te_fraction must lie in (0, 1), got {te_fraction}"
        )));
    }
    let n = m.n_items();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 items to split, have {n}"
        )));
    }
    let n_te = round_half_up(te_fraction * n as f64).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::ItemSplit, 0));
    let mut te_items = order[..n_te].to_vec();
    let mut tr_items = order[n_te..].to_vec();
    te_items.sort_unstable();
    tr_items.sort_unstable();
    Ok(ItemSplit { tr_items, te_items })
}

/// Splits the non-missing cells of `tr` rows into train and validation.
/// The validation share is `floor(val_fraction · n)`.
pub fn split_entries(
    m: &ViewMatrix,
    items: ItemSplit,
    val_fraction: f64,
    seed: u64,
) -> Result<CorpusSplit> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let mut pool: Vec<Entry> = items.tr_items.iter().flat_map(|&i| m.row(i)).collect();
    if pool.is_empty() {
        return Err(Error::Empty("no non-missing entries in training items"));
    }
    // Nudge before flooring so that e.g. 0.2 · 100 lands on 20, not 19.
    let n_val = ((val_fraction * pool.len() as f64) + 1e-9).floor() as usize;
    pool.shuffle(&mut rng::stream(seed, Purpose::EntrySplit, 0));
    let mut val = pool.split_off(pool.len() - n_val);
    pool.sort_unstable();
    val.sort_unstable();
    Ok(CorpusSplit {
        items,
        train: pool,
        val,
    })
}

impl CorpusSplit {
    /// Writes `items.tsv` (`item_id<TAB>tr|te`) and `entries.tsv`
    /// (`item_id<TAB>user_id<TAB>value<TAB>train|val`) into `dir`.
    pub fn write(&self, m: &ViewMatrix, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("items.tsv");
        let mut rows: Vec<(usize, &str)> = self
            .items
            .tr_items
            .iter()
            .map(|&i| (i, "tr"))
            .chain(self.items.te_items.iter().map(|&i| (i, "te")))
            .collect();
        rows.sort_unstable();
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for (i, part) in rows {
            writeln!(w, "{}\t{}", m.item_ids()[i], part).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("entries.tsv");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        let tagged = self
            .train
            .iter()
            .map(|e| (e, "train"))
            .chain(self.val.iter().map(|e| (e, "val")));
        for (e, part) in tagged {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                m.item_ids()[e.item],
                m.user_ids()[e.user],
                e.signal.code(),
                part
            )
            .map_err(|err| Error::io(&path, err))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// Reads a split written by [`CorpusSplit::write`], resolving ids
    /// against `m`.
    pub fn read(m: &ViewMatrix, dir: &Path) -> Result<Self> {
        let path = dir.join("items.tsv");
        let mut items = ItemSplit {
            tr_items: Vec::new(),
            te_items: Vec::new(),
        };
        for_each_record(&path, 2, |line, f| {
            let i = m
                .item_of(f[0])
                .ok_or_else(|| Error::parse(&path, line, format!("unknown item `{}`", f[0])))?;
            match f[1] {
                "tr" => items.tr_items.push(i),
                "te" => items.te_items.push(i),
                other => return Err(Error::parse(&path, line, format!("bad part `{other}`"))),
            }
            Ok(())
        })?;
        items.tr_items.sort_unstable();
        items.te_items.sort_unstable();

        let path = dir.join("entries.tsv");
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for_each_record(&path, 4, |line, f| {
            let bad = |what: &str| Error::parse(&path, line, format!("unknown {what} `{}`", f[0]));
            let i = m.item_of(f[0]).ok_or_else(|| bad("item"))?;
            let j = m.user_of(f[1]).ok_or_else(|| bad("user"))?;
            let s = Signal::from_code(f[2])
                .ok_or_else(|| Error::parse(&path, line, "value must be 0 or 1"))?;
            match f[3] {
                "train" => train.push(Entry::new(i, j, s)),
                "val" => val.push(Entry::new(i, j, s)),
                other => return Err(Error::parse(&path, line, format!("bad part `{other}`"))),
            }
            Ok(())
        })?;
        train.sort_unstable();
        val.sort_unstable();
        Ok(CorpusSplit { items, train, val })
    }
}

//! Dense row embeddings keyed by id, and the factors TSV format:
//! a `#dim=<d>` header followed by `id<TAB>f1,f2,...,fd` lines.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
}

impl Embedding {
    pub fn new(dim: usize) -> Self {
        Embedding {
            ids: Vec::new(),
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows(
        dim: usize,
        rows: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self> {
        let mut e = Self::new(dim);
        for (id, row) in rows {
            e.push(id, &row)?;
        }
        Ok(e)
    }

    pub fn push(&mut self, id: String, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::LengthMismatch(format!(
                "row `{id}` has {} values, expected {}",
                row.len(),
                self.dim
            )));
        }
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1)).take(self.ids.len())
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(k, id)| (id.as_str(), k))
            .collect()
    }

    /// Multiplies every value by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Embedding {
            ids: self.ids.clone(),
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut line = String::new();
        writeln!(w, "#dim={}", self.dim).map_err(|e| Error::io(path, e))?;
        for (k, id) in self.ids.iter().enumerate() {
            line.clear();
            line.push_str(id);
            line.push('\t');
            for (c, v) in self.row(k).iter().enumerate() {
                if c > 0 {
                    line.push(',');
                }
                // `Display` for f64 is the shortest round-trip representation.
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::parse(path, 1, "missing `#dim=<d>` header")),
        };
        let dim: usize = header
            .strip_prefix("#dim=")
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| Error::parse(path, 1, "expected `#dim=<d>` header"))?;
        let mut out = Self::new(dim);
        let mut row = Vec::with_capacity(dim);
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            let (id, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected `id<TAB>values`"))?;
            row.clear();
            if dim > 0 {
                for v in values.split(',') {
                    let v: f64 = v
                        .parse()
                        .map_err(|_| Error::parse(path, lineno, format!("bad float `{v}`")))?;
                    row.push(v);
                }
            }
            out.push(id.to_owned(), &row)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_ragged_rows() {
        let mut e = Embedding::new(2);
        assert!(e.push("a".into(), &[1.0]).is_err());
    }

    #[test]
    fn file_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.tsv");
        let e = Embedding::from_rows(
            2,
            [("a".into(), vec![0.1, -2.0]), ("b".into(), vec![1e-5, 3.5])],
        )
        .unwrap();
        e.write_tsv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "#dim=2\na\t0.1,-2\nb\t0.00001,3.5\n");
        assert_eq!(Embedding::read_tsv(&p).unwrap(), e);
    }

    proptest! {
        #[test]
        fn tsv_round_trip_is_bitwise(rows in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 3), 0..20)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.tsv");
            let e = Embedding::from_rows(3, rows.into_iter().enumerate().map(|(k, r)| (format!("x{k}"), r))).unwrap();
            e.write_tsv(&p).unwrap();
            prop_assert_eq!(Embedding::read_tsv(&p).unwrap(), e);
        }
    }
}

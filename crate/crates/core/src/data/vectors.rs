use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::DataError;
use crate::Scalar;

/// Id to fixed-width vector table, read from and written to the text format
/// `id<TAB>v1 v2 ... vd`, one entry per line.
///
/// Lookups of absent ids yield the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorTable<S> {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<S>,
}

pub type EntityTable<S> = VectorTable<S>;

impl<S: Scalar> VectorTable<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
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

    /// Inserts or overwrites.
    pub fn insert(&mut self, id: &str, v: &[S]) -> Result<(), DataError> {
        if v.len() != self.dim {
            return Err(DataError::Format(format!(
                "vector for `{id}` has {} values, table dimension is {}",
                v.len(),
                self.dim
            )));
        }
        match self.index.get(id) {
            Some(&i) => self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(v),
            None => {
                self.index.insert(id.to_string(), self.ids.len());
                self.ids.push(id.to_string());
                self.data.extend_from_slice(v);
            }
        }
        Ok(())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[S]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let d = self.dim;
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn lookup(&self, id: &str) -> Vec<S> {
        self.get(id).map_or_else(|| vec![S::zero(); self.dim], <[S]>::to_vec)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = File::open(path).map_err(|e| DataError::io(path, e))?;
        Self::read(BufReader::new(f)).map_err(|e| e.with_path(path))
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, DataError> {
        let mut table: Option<Self> = None;
        for (i, line) in reader.lines().enumerate() {
            let bad = |msg: String| DataError::Malformed {
                path: None,
                line: i + 1,
                msg,
            };
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected `id<TAB>values`".into()))?;
            let v = rest
                .split_whitespace()
                .map(|x| x.parse::<f64>().map(S::lit))
                .collect::<Result<Vec<S>, _>>()
                .map_err(|e| bad(e.to_string()))?;
            if v.is_empty() {
                return Err(bad(format!("no values for `{id}`")));
            }
            let t = table.get_or_insert_with(|| Self::new(v.len()));
            t.insert(id, &v).map_err(|e| bad(e.to_string()))?;
        }
        table.ok_or_else(|| DataError::Format("vector file is empty".into()))
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, id) in self.ids.iter().enumerate() {
            let vals: Vec<String> = self.row(i).iter().map(|x| format!("{:e}", x.as_f64())).collect();
            writeln!(w, "{id}\t{}", vals.join(" "))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let f = File::create(path).map_err(|e| DataError::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w).and_then(|_| w.flush()).map_err(|e| DataError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_declared_format() {
        let t = VectorTable::<f64>::read("Q42\t0.1 0.2\nQ7\t1 -1\n".as_bytes()).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.get("Q42").unwrap(), &[0.1, 0.2]);
        assert_eq!(t.lookup("Q999"), vec![0.0, 0.0]);
    }

    #[test]
    fn inconsistent_width_is_an_error() {
        let err = VectorTable::<f64>::read("a\t1 2\nb\t1 2 3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 2, .. }));
    }

    #[test]
    fn write_read_is_exact() {
        let mut t = VectorTable::<f64>::new(3);
        t.insert("x", &[0.1, -1.0 / 3.0, 1e-300]).unwrap();
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert_eq!(VectorTable::<f64>::read(&buf[..]).unwrap(), t);
    }
}

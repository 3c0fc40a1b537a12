//! Training data: `(x, theta, y)` triples plus the comma-separated file format
//! with header columns `x0.., th0.., y0..`.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PcfError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    x: Vec<f64>,
    theta: Vec<f64>,
    y: Vec<f64>,
    len: usize,
}

impl Dataset {
    /// Row-major `x` (`N x n`), `theta` (`N x p`) and `y` (`N x d`). `d` may be
    /// 0 for prediction inputs.
    pub fn new(
        n: usize,
        p: usize,
        d: usize,
        x: Vec<f64>,
        theta: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<Self> {
        let len = infer_len(n, p, d, &x, &theta, &y)?;
        for (name, v) in [("x", &x), ("theta", &theta), ("y", &y)] {
            if let Some(k) = v.iter().position(|a| !a.is_finite()) {
                return Err(PcfError::InvalidInput(format!(
                    "non-finite {name} value at flat index {k}"
                )));
            }
        }
        Ok(Dataset {
            n,
            p,
            d,
            x,
            theta,
            y,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn x(&self, k: usize) -> &[f64] {
        &self.x[k * self.n..(k + 1) * self.n]
    }

    #[inline]
    pub fn theta(&self, k: usize) -> &[f64] {
        &self.theta[k * self.p..(k + 1) * self.p]
    }

    #[inline]
    pub fn y(&self, k: usize) -> &[f64] {
        &self.y[k * self.d..(k + 1) * self.d]
    }

    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }

    pub fn theta_flat(&self) -> &[f64] {
        &self.theta
    }

    pub fn y_flat(&self) -> &[f64] {
        &self.y
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.n);
        let mut theta = Vec::with_capacity(idx.len() * self.p);
        let mut y = Vec::with_capacity(idx.len() * self.d);
        for &k in idx {
            x.extend_from_slice(self.x(k));
            theta.extend_from_slice(self.theta(k));
            y.extend_from_slice(self.y(k));
        }
        Dataset {
            n: self.n,
            p: self.p,
            d: self.d,
            x,
            theta,
            y,
            len: idx.len(),
        }
    }

    /// Same samples with new targets.
    pub fn with_targets(&self, d: usize, y: Vec<f64>) -> Result<Dataset> {
        Dataset::new(self.n, self.p, d, self.x.clone(), self.theta.clone(), y)
    }

    /// Seeded shuffle, then the first `round(len * test_fraction)` samples
    /// form the test set. Returns `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let n_test = ((self.len as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(self.len);
        let (test, train) = idx.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        (self.subset(&train), self.subset(&test))
    }

    /// Groups the given samples by bitwise-identical `theta`, in order of
    /// first appearance.
    pub(crate) fn group_by_theta(&self, indices: &[usize]) -> Vec<ThetaGroup> {
        let mut map: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut groups: Vec<ThetaGroup> = Vec::new();
        for &k in indices {
            let key: Vec<u64> = self.theta(k).iter().map(|v| v.to_bits()).collect();
            match map.get(&key) {
                Some(&g) => groups[g].samples.push(k),
                None => {
                    map.insert(key, groups.len());
                    groups.push(ThetaGroup {
                        rep: k,
                        samples: vec![k],
                    });
                }
            }
        }
        groups
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)
            .map_err(|e| PcfError::DataFile(format!("{}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| PcfError::DataFile(format!("cannot read header: {e}")))?
            .clone();
        let columns = parse_header(headers.iter())?;
        let (n, p, d) = columns.dims;
        let mut x = Vec::new();
        let mut theta = Vec::new();
        let mut y = Vec::new();
        let mut row_x = vec![0.0; n];
        let mut row_t = vec![0.0; p];
        let mut row_y = vec![0.0; d];
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| PcfError::DataFile(format!("row {}: {e}", r + 1)))?;
            if rec.len() != columns.kinds.len() {
                return Err(PcfError::DataFile(format!(
                    "row {} has {} fields, header has {}",
                    r + 1,
                    rec.len(),
                    columns.kinds.len()
                )));
            }
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    PcfError::DataFile(format!(
                        "row {}, column {}: cannot parse '{field}'",
                        r + 1,
                        headers.get(c).unwrap_or("?")
                    ))
                })?;
                if !v.is_finite() {
                    return Err(PcfError::DataFile(format!(
                        "row {}, column {}: non-finite value",
                        r + 1,
                        headers.get(c).unwrap_or("?")
                    )));
                }
                match columns.kinds[c] {
                    (ColumnKind::X, i) => row_x[i] = v,
                    (ColumnKind::Theta, i) => row_t[i] = v,
                    (ColumnKind::Y, i) => row_y[i] = v,
                }
            }
            x.extend_from_slice(&row_x);
            theta.extend_from_slice(&row_t);
            y.extend_from_slice(&row_y);
        }
        Dataset::new(n, p, d, x, theta, y).map_err(|e| PcfError::DataFile(e.to_string()))
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let header = column_names(self.n, self.p, self.d);
        wtr.write_record(&header).map_err(csv_err)?;
        for k in 0..self.len {
            let row: Vec<String> = self
                .x(k)
                .iter()
                .chain(self.theta(k))
                .chain(self.y(k))
                .map(|v| format_f64(*v))
                .collect();
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> PcfError {
    PcfError::DataFile(e.to_string())
}

/// Shortest representation that round-trips exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn column_names(n: usize, p: usize, d: usize) -> Vec<String> {
    (0..n)
        .map(|i| format!("x{i}"))
        .chain((0..p).map(|i| format!("th{i}")))
        .chain((0..d).map(|i| format!("y{i}")))
        .collect()
}

fn infer_len(n: usize, p: usize, d: usize, x: &[f64], theta: &[f64], y: &[f64]) -> Result<usize> {
    let mut len: Option<usize> = None;
    for (name, width, v) in [("x", n, x), ("theta", p, theta), ("y", d, y)] {
        if width == 0 {
            if !v.is_empty() {
                return Err(PcfError::InvalidInput(format!(
                    "{name} has width 0 but holds data"
                )));
            }
            continue;
        }
        if v.len() % width != 0 {
            return Err(PcfError::InvalidInput(format!(
                "{name} length {} is not a multiple of {width}",
                v.len()
            )));
        }
        let rows = v.len() / width;
        match len {
            None => len = Some(rows),
            Some(l) if l != rows => {
                return Err(PcfError::InvalidInput(format!(
                    "{name} has {rows} rows, expected {l}"
                )))
            }
            _ => {}
        }
    }
    Ok(len.unwrap_or(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColumnKind {
    X,
    Theta,
    Y,
}

struct Columns {
    kinds: Vec<(ColumnKind, usize)>,
    dims: (usize, usize, usize),
}

fn parse_header<'a>(names: impl Iterator<Item = &'a str>) -> Result<Columns> {
    let mut kinds = Vec::new();
    for name in names {
        let (kind, rest) = if let Some(r) = name.strip_prefix("th") {
            (ColumnKind::Theta, r)
        } else if let Some(r) = name.strip_prefix('x') {
            (ColumnKind::X, r)
        } else if let Some(r) = name.strip_prefix('y') {
            (ColumnKind::Y, r)
        } else {
            return Err(PcfError::DataFile(format!(
                "unrecognized column '{name}' (expected x<i>, th<i> or y<i>)"
            )));
        };
        let idx: usize = rest
            .parse()
            .ok()
            .filter(|_| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
            .ok_or_else(|| PcfError::DataFile(format!("malformed column name '{name}'")))?;
        kinds.push((kind, idx));
    }
    let mut dims = [0usize; 3];
    for (slot, kind) in [ColumnKind::X, ColumnKind::Theta, ColumnKind::Y]
        .iter()
        .enumerate()
    {
        let mut seen: Vec<usize> = kinds
            .iter()
            .filter(|(k, _)| k == kind)
            .map(|(_, i)| *i)
            .collect();
        seen.sort_unstable();
        for (expect, got) in seen.iter().enumerate() {
            if *got != expect {
                let prefix = match kind {
                    ColumnKind::X => "x",
                    ColumnKind::Theta => "th",
                    ColumnKind::Y => "y",
                };
                return Err(PcfError::DataFile(format!(
                    "column '{prefix}{got}' is duplicated or out of sequence (expected '{prefix}{expect}')"
                )));
            }
        }
        dims[slot] = seen.len();
    }
    if kinds.is_empty() {
        return Err(PcfError::DataFile("empty header".into()));
    }
    Ok(Columns {
        kinds,
        dims: (dims[0], dims[1], dims[2]),
    })
}

#[derive(Debug, Clone)]
pub(crate) struct ThetaGroup {
    /// A sample whose `theta` represents the group.
    pub rep: usize,
    pub samples: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_and_column_order() {
        let text = "th0,x0,y0\n1.5,0.25,3\n-2,1e-3,4\n";
        let ds = Dataset::from_reader(text.as_bytes()).unwrap();
        assert_eq!((ds.n, ds.p, ds.d, ds.len()), (1, 1, 1, 2));
        assert_eq!(ds.x(1), &[1e-3]);
        assert_eq!(ds.theta(0), &[1.5]);
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let back = Dataset::from_reader(out.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn malformed_header_names_the_column() {
        let err = Dataset::from_reader("x0,theta0,y0\n1,2,3\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("theta0"), "{err}");
        let err = Dataset::from_reader("x0,x2,y0\n1,2,3\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("x2"), "{err}");
    }

    #[test]
    fn bad_cells_are_rejected() {
        assert!(Dataset::from_reader("x0,y0\n1,abc\n".as_bytes()).is_err());
        assert!(Dataset::from_reader("x0,y0\n1,inf\n".as_bytes()).is_err());
        assert!(Dataset::from_reader("x0,y0\n1\n".as_bytes()).is_err());
    }

    #[test]
    fn split_partitions_samples() {
        let n = 37;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let ds = Dataset::new(1, 0, 1, x.clone(), vec![], x).unwrap();
        let (tr, te) = ds.split(0.2, 7);
        assert_eq!(te.len(), 7);
        assert_eq!(tr.len() + te.len(), n);
        let mut all: Vec<f64> = tr.x_flat().iter().chain(te.x_flat()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..n).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(ds.split(0.2, 7), (tr, te));
    }

    #[test]
    fn groups_share_theta() {
        let ds = Dataset::new(
            1,
            1,
            1,
            vec![0.0, 1.0, 2.0, 3.0],
            vec![5.0, 6.0, 5.0, 6.0],
            vec![0.0; 4],
        )
        .unwrap();
        let g = ds.group_by_theta(&[0, 1, 2, 3]);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].samples, vec![0, 2]);
        assert_eq!(g[1].samples, vec![1, 3]);
    }
}

//! N-ary coding matrices.
//!
//! A coding matrix has one row per original class and one column per base
//! learner. Entry `(c, l)` is the meta-class (1-based, in `1..=n_meta`) that
//! class `c` is merged into for learner `l`. Binary ECOC is the `n_meta = 2`
//! case; an ensemble of randomly initialised full classifiers is the
//! `n_meta = n_classes` case, where every column is a permutation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;

use crate::decoding::hamming_distance;
use crate::seed;
use crate::{Error, Result};

/// Whole-matrix regeneration budget when rows collide.
pub const MAX_GENERATION_ATTEMPTS: usize = 64;

/// An `n_classes x n_learners` matrix over the meta-class alphabet `1..=n_meta`.
///
/// Construction only checks shape and alphabet range. The structural
/// invariants (surjective, balanced columns and distinct rows) hold for
/// every matrix returned by [`generate_coding_matrix`] and can be checked
/// on arbitrary matrices with [`CodingMatrix::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodingMatrix {
    entries: Array2<u32>,
    n_meta: usize,
    seed: u64,
}

impl CodingMatrix {
    pub fn from_rows(rows: &[Vec<u32>], n_meta: usize, seed: u64) -> Result<Self> {
        let n_classes = rows.len();
        if n_classes < 2 {
            return Err(Error::ShapeMismatch(format!("coding matrix needs at least 2 rows, got {n_classes}")));
        }
        let n_learners = rows[0].len();
        if n_learners == 0 {
            return Err(Error::ShapeMismatch("coding matrix needs at least 1 column".into()));
        }
        if n_meta < 2 {
            return Err(Error::InvalidArity { n_classes, n_meta });
        }
        let mut entries = Array2::zeros((n_classes, n_learners));
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_learners {
                return Err(Error::ShapeMismatch(format!("row {r} has {} entries, expected {n_learners}", row.len())));
            }
            for (c, &v) in row.iter().enumerate() {
                check_symbol(v as i64, n_meta)?;
                entries[(r, c)] = v;
            }
        }
        Ok(Self { entries, n_meta, seed })
    }

    pub fn n_classes(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_learners(&self) -> usize {
        self.entries.ncols()
    }

    pub fn n_meta(&self) -> usize {
        self.n_meta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &Array2<u32> {
        &self.entries
    }

    /// Codeword of `class`.
    pub fn row(&self, class: usize) -> ArrayView1<'_, u32> {
        self.entries.row(class)
    }

    pub fn column(&self, learner: usize) -> ArrayView1<'_, u32> {
        self.entries.column(learner)
    }

    /// Column `learner` viewed as a class -> meta-class map.
    pub fn partition(&self, learner: usize) -> Result<MetaPartition> {
        if learner >= self.n_learners() {
            return Err(Error::Range { value: learner as i64, what: format!("learner index < {}", self.n_learners()) });
        }
        MetaPartition::new(self.column(learner).to_vec(), self.n_meta)
    }

    /// The first `k` columns. Rows of a prefix may coincide even when the
    /// full matrix is valid.
    pub fn prefix(&self, k: usize) -> Result<CodingMatrix> {
        if k == 0 || k > self.n_learners() {
            return Err(Error::Range { value: k as i64, what: format!("prefix length in 1..={}", self.n_learners()) });
        }
        Ok(CodingMatrix {
            entries: self.entries.slice(ndarray::s![.., ..k]).to_owned(),
            n_meta: self.n_meta,
            seed: self.seed,
        })
    }

    pub fn metrics(&self) -> MatrixMetrics {
        let n = self.n_classes();
        let mut min = usize::MAX;
        let mut total = 0usize;
        let mut pairs = 0usize;
        for a in 0..n {
            for b in a + 1..n {
                let d = row_distance(self, a, b);
                min = min.min(d);
                total += d;
                pairs += 1;
            }
        }
        MatrixMetrics {
            min_row_distance: min,
            mean_row_distance: total as f64 / pairs as f64,
            merge_degree: (n - self.n_meta.min(n)) as f64 / n as f64,
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let n_meta = self.n_meta;

        for ((r, c), &v) in self.entries.indexed_iter() {
            if v == 0 || v as usize > n_meta {
                violations.push(Violation::Range { row: r, column: c, value: v });
            }
        }

        for (c, col) in self.entries.axis_iter(Axis(1)).enumerate() {
            let mut sizes = vec![0usize; n_meta];
            for &v in col {
                if v >= 1 && v as usize <= n_meta {
                    sizes[v as usize - 1] += 1;
                }
            }
            let missing: Vec<u32> = (1..=n_meta as u32).filter(|&m| sizes[m as usize - 1] == 0).collect();
            if !missing.is_empty() {
                violations.push(Violation::Surjectivity { column: c, missing });
            }
            let max = sizes.iter().copied().max().unwrap_or(0);
            let min = sizes.iter().copied().min().unwrap_or(0);
            if max - min > 1 {
                violations.push(Violation::Balance { column: c, subset_sizes: sizes });
            }
        }

        let mut seen: HashMap<Vec<u32>, usize> = HashMap::new();
        for r in 0..self.n_classes() {
            let key = self.row(r).to_vec();
            match seen.get(&key) {
                Some(&first) => violations.push(Violation::RowCollision { first, second: r }),
                None => {
                    seen.insert(key, r);
                }
            }
        }

        ValidationReport { violations }
    }

    /// Write the matrix in its CSV layout: a metadata comment line followed
    /// by one comma-separated line per class.
    pub fn write_csv<W: Write>(&self, mut sink: W) -> Result<()> {
        let mut out = format!(
            "# n_classes={},n_learners={},n_meta={},seed={}\n",
            self.n_classes(),
            self.n_learners(),
            self.n_meta,
            self.seed
        );
        for row in self.entries.axis_iter(Axis(0)) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{v}").expect("writing to a String cannot fail");
            }
            out.push('\n');
        }
        sink.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(source: R) -> Result<CodingMatrix> {
        let mut lines = source.lines();
        let header = match lines.next() {
            Some(line) => line?,
            None => return Err(parse_err(1, "empty input, expected metadata header")),
        };
        let header = parse_header(&header)?;

        let mut rows = Vec::with_capacity(header.n_classes);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let row_idx = rows.len();
            let mut row = Vec::with_capacity(header.n_learners);
            for cell in line.split(',') {
                let cell = cell.trim();
                let v: i64 = cell
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("row {row_idx}: {cell:?} is not an integer")))?;
                check_symbol(v, header.n_meta)?;
                row.push(v as u32);
            }
            if row.len() != header.n_learners {
                return Err(parse_err(
                    line_no,
                    format!("row {row_idx} has {} entries, expected {}", row.len(), header.n_learners),
                ));
            }
            rows.push(row);
        }
        if rows.len() != header.n_classes {
            return Err(parse_err(
                rows.len() + 2,
                format!("found {} rows, header declares {}", rows.len(), header.n_classes),
            ));
        }
        CodingMatrix::from_rows(&rows, header.n_meta, header.seed)
    }
}

fn check_symbol(v: i64, n_meta: usize) -> Result<()> {
    if v < 1 || v as usize > n_meta {
        return Err(Error::Range { value: v, what: format!("meta-class alphabet 1..={n_meta}") });
    }
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

struct Header {
    n_classes: usize,
    n_learners: usize,
    n_meta: usize,
    seed: u64,
}

fn parse_header(line: &str) -> Result<Header> {
    let body = line
        .trim_end_matches('\r')
        .strip_prefix('#')
        .ok_or_else(|| parse_err(1, "expected '# n_classes=..,n_learners=..,n_meta=..,seed=..'"))?;
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for kv in body.split(',') {
        let (k, v) = kv.split_once('=').ok_or_else(|| parse_err(1, format!("malformed header field {kv:?}")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |key: &str| -> Result<u64> {
        let raw = fields.get(key).ok_or_else(|| parse_err(1, format!("header is missing {key}")))?;
        raw.parse().map_err(|_| parse_err(1, format!("header field {key}={raw:?} is not an unsigned integer")))
    };
    Ok(Header {
        n_classes: get("n_classes")? as usize,
        n_learners: get("n_learners")? as usize,
        n_meta: get("n_meta")? as usize,
        seed: get("seed")?,
    })
}

fn row_distance(m: &CodingMatrix, a: usize, b: usize) -> usize {
    m.row(a).iter().zip(m.row(b).iter()).filter(|(x, y)| x != y).count()
}

/// One column of a coding matrix as a surjective, balanced class -> meta map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaPartition {
    class_to_meta: Vec<u32>,
    subset_sizes: Vec<usize>,
}

impl MetaPartition {
    pub fn new(class_to_meta: Vec<u32>, n_meta: usize) -> Result<Self> {
        let mut subset_sizes = vec![0usize; n_meta];
        for &m in &class_to_meta {
            check_symbol(m as i64, n_meta)?;
            subset_sizes[m as usize - 1] += 1;
        }
        if let Some(missing) = subset_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Range { value: missing as i64 + 1, what: "partition must use every meta-class".into() });
        }
        let max = *subset_sizes.iter().max().expect("n_meta >= 1");
        let min = *subset_sizes.iter().min().expect("n_meta >= 1");
        if max - min > 1 {
            return Err(Error::InvalidConfig(format!("unbalanced partition {subset_sizes:?}")));
        }
        Ok(Self { class_to_meta, subset_sizes })
    }

    pub fn n_classes(&self) -> usize {
        self.class_to_meta.len()
    }

    pub fn n_meta(&self) -> usize {
        self.subset_sizes.len()
    }

    /// 1-based meta-class of every original class.
    pub fn class_to_meta(&self) -> &[u32] {
        &self.class_to_meta
    }

    pub fn subset_sizes(&self) -> &[usize] {
        &self.subset_sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixMetrics {
    pub min_row_distance: usize,
    pub mean_row_distance: f64,
    pub merge_degree: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Range { row: usize, column: usize, value: u32 },
    Surjectivity { column: usize, missing: Vec<u32> },
    Balance { column: usize, subset_sizes: Vec<usize> },
    RowCollision { first: usize, second: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Random dense N-ary coding matrix with balanced columns and distinct rows.
///
/// Each column splits the classes into `n_meta` subsets whose sizes are
/// `floor(n_classes / n_meta)` or `ceil(n_classes / n_meta)`. Columns are drawn
/// from their own stream `(seed, attempt, column)`. Classes that still share
/// a codeword prefix are dealt round-robin across meta-classes, so such
/// groups get split as early as the balance constraint allows; once all
/// prefixes are distinct each column is a uniformly random balanced
/// partition. If rows still collide the whole matrix is redrawn with the
/// next attempt counter, up to [`MAX_GENERATION_ATTEMPTS`] times.
pub fn generate_coding_matrix(n_classes: usize, n_learners: usize, n_meta: usize, seed: u64) -> Result<CodingMatrix> {
    if n_meta < 2 || n_meta > n_classes {
        return Err(Error::InvalidArity { n_classes, n_meta });
    }
    if n_learners == 0 {
        return Err(Error::ShapeMismatch("n_learners must be at least 1".into()));
    }

    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let mut entries = Array2::<u32>::zeros((n_classes, n_learners));
        // Classes sharing a group id have identical codeword prefixes.
        let mut group = vec![0usize; n_classes];
        for col in 0..n_learners {
            let mut rng = seed::rng(seed, &[attempt as u64, col as u64]);

            let mut groups: Vec<Vec<usize>> = Vec::new();
            let mut index: HashMap<usize, usize> = HashMap::new();
            for (class, &g) in group.iter().enumerate() {
                let slot = *index.entry(g).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[slot].push(class);
            }
            groups.shuffle(&mut rng);
            for g in groups.iter_mut() {
                g.shuffle(&mut rng);
            }
            let mut metas: Vec<u32> = (1..=n_meta as u32).collect();
            metas.shuffle(&mut rng);

            for (pos, class) in groups.iter().flatten().enumerate() {
                entries[(*class, col)] = metas[pos % n_meta];
            }
            for class in 0..n_classes {
                group[class] = group[class] * n_meta + entries[(class, col)] as usize - 1;
            }
            // Re-index to keep ids small.
            let mut remap: HashMap<usize, usize> = HashMap::new();
            for g in group.iter_mut() {
                let next = remap.len();
                *g = *remap.entry(*g).or_insert(next);
            }
        }

        let distinct = {
            let mut set = std::collections::HashSet::new();
            group.iter().all(|g| set.insert(*g))
        };
        if distinct {
            return Ok(CodingMatrix { entries, n_meta, seed });
        }
    }
    Err(Error::RowCollision { attempts: MAX_GENERATION_ATTEMPTS })
}

/// Minimum Hamming distance over all unordered pairs of rows.
pub fn min_row_distance(m: &CodingMatrix) -> usize {
    let n = m.n_classes();
    let mut best = usize::MAX;
    for a in 0..n {
        for b in a + 1..n {
            let ra = m.row(a);
            let rb = m.row(b);
            let d = hamming_distance(ra.as_slice().expect("row-major"), rb.as_slice().expect("row-major"))
                .expect("rows have equal length");
            best = best.min(d);
        }
    }
    best
}

/// Fraction of class distinctions collapsed per column, `(N_C - N) / N_C`.
pub fn class_merge_degree(n_classes: usize, n_meta: usize) -> Result<f64> {
    if n_meta < 2 || n_meta > n_classes {
        return Err(Error::InvalidArity { n_classes, n_meta });
    }
    Ok((n_classes - n_meta) as f64 / n_classes as f64)
}

/// Heuristic range for the number of base learners:
/// `[floor(10 log_2.2 N_C), ceil(10 log_1.5 N_C)]`.
pub fn suggested_learner_range(n_classes: usize) -> (usize, usize) {
    let ln = (n_classes as f64).ln();
    let lo = (10.0 * ln / 2.2f64.ln()).floor();
    let hi = (10.0 * ln / 1.5f64.ln()).ceil();
    (lo as usize, hi as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted_sizes(m: &CodingMatrix, col: usize) -> Vec<usize> {
        let mut s = m.partition(col).unwrap().subset_sizes().to_vec();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s
    }

    #[test]
    fn ten_classes_four_meta_split_3322() {
        let m = generate_coding_matrix(10, 12, 4, 3).unwrap();
        for c in 0..12 {
            assert_eq!(sorted_sizes(&m, c), vec![3, 3, 2, 2]);
        }
    }

    #[test]
    fn exact_division_is_even() {
        let m = generate_coding_matrix(6, 9, 3, 11).unwrap();
        for c in 0..9 {
            assert_eq!(sorted_sizes(&m, c), vec![2, 2, 2]);
        }
    }

    #[test]
    fn full_arity_columns_are_permutations() {
        let m = generate_coding_matrix(10, 5, 10, 5).unwrap();
        for c in 0..5 {
            let mut col = m.column(c).to_vec();
            col.sort_unstable();
            assert_eq!(col, (1..=10).collect::<Vec<u32>>());
        }
    }

    #[test]
    fn arity_errors() {
        assert!(matches!(generate_coding_matrix(5, 3, 1, 0), Err(Error::InvalidArity { .. })));
        assert!(matches!(generate_coding_matrix(5, 3, 6, 0), Err(Error::InvalidArity { .. })));
        assert!(matches!(class_merge_degree(5, 6), Err(Error::InvalidArity { .. })));
    }

    #[test]
    fn impossible_distinctness_is_row_collision() {
        // 2^1 codewords cannot separate 4 classes.
        assert!(matches!(generate_coding_matrix(4, 1, 2, 0), Err(Error::RowCollision { attempts: 64 })));
    }

    #[test]
    fn tight_binary_case_still_separates() {
        // 26 classes in 5 binary columns: 32 codewords, balanced columns.
        let m = generate_coding_matrix(26, 5, 2, 9).unwrap();
        assert!(m.validate().is_valid());
    }

    #[test]
    fn min_distance_examples() {
        let m = CodingMatrix::from_rows(&[vec![1, 1, 1], vec![1, 1, 2]], 2, 0).unwrap();
        assert_eq!(min_row_distance(&m), 1);
        let m = CodingMatrix::from_rows(&[vec![1, 2], vec![2, 1]], 2, 0).unwrap();
        assert_eq!(min_row_distance(&m), 2);
    }

    #[test]
    fn min_distance_matches_brute_force() {
        let m = generate_coding_matrix(5, 4, 2, 7).unwrap();
        let mut best = usize::MAX;
        for a in 0..5 {
            for b in 0..5 {
                if a != b {
                    let mut d = 0;
                    for l in 0..4 {
                        if m.entries()[(a, l)] != m.entries()[(b, l)] {
                            d += 1;
                        }
                    }
                    best = best.min(d);
                }
            }
        }
        assert_eq!(min_row_distance(&m), best);
        assert_eq!(m.metrics().min_row_distance, best);
    }

    #[test]
    fn merge_degree_values() {
        assert!((class_merge_degree(10, 3).unwrap() - 0.7).abs() < 1e-12);
        assert!((class_merge_degree(100, 95).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(class_merge_degree(7, 7).unwrap(), 0.0);
    }

    #[test]
    fn learner_range_formula() {
        assert_eq!(suggested_learner_range(10), (29, 57));
        assert_eq!(suggested_learner_range(100), (58, 114));
        assert_eq!(suggested_learner_range(2), (8, 18));
    }

    #[test]
    fn validate_reports_duplicate_rows() {
        let m = CodingMatrix::from_rows(&[vec![1, 2], vec![2, 1], vec![1, 2], vec![2, 1]], 2, 0).unwrap();
        let report = m.validate();
        assert_eq!(
            report.violations,
            vec![Violation::RowCollision { first: 0, second: 2 }, Violation::RowCollision { first: 1, second: 3 }]
        );
        let m = CodingMatrix::from_rows(&[vec![1, 1], vec![2, 2], vec![1, 2], vec![2, 1]], 2, 0).unwrap();
        assert!(m.validate().is_valid());
        let m = CodingMatrix::from_rows(&[vec![1, 1], vec![2, 2], vec![1, 2], vec![2, 2]], 2, 0).unwrap();
        let collisions: Vec<_> =
            m.validate().violations.into_iter().filter(|v| matches!(v, Violation::RowCollision { .. })).collect();
        assert_eq!(collisions, vec![Violation::RowCollision { first: 1, second: 3 }]);
    }

    #[test]
    fn validate_reports_missing_meta_class() {
        let m = CodingMatrix::from_rows(&[vec![1, 1], vec![2, 2], vec![1, 3], vec![2, 1]], 3, 0).unwrap();
        let v = m.validate().violations;
        assert!(v.contains(&Violation::Surjectivity { column: 0, missing: vec![3] }));
        assert_eq!(v.iter().filter(|x| matches!(x, Violation::Surjectivity { .. })).count(), 1);
    }

    #[test]
    fn validate_reports_imbalance() {
        let m = CodingMatrix::from_rows(&[vec![1], vec![1], vec![1], vec![2]], 2, 0).unwrap();
        assert!(m.validate().violations.contains(&Violation::Balance { column: 0, subset_sizes: vec![3, 1] }));
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let m = CodingMatrix::from_rows(&[vec![1, 2], vec![2, 1], vec![3, 3]], 3, 99).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "# n_classes=3,n_learners=2,n_meta=3,seed=99\n1,2\n2,1\n3,3\n");
        assert_eq!(CodingMatrix::read_csv(&buf[..]).unwrap(), m);

        let zero = "# n_classes=2,n_learners=2,n_meta=2,seed=0\n1,0\n2,1\n";
        assert!(matches!(CodingMatrix::read_csv(zero.as_bytes()), Err(Error::Range { value: 0, .. })));

        let ragged = "# n_classes=2,n_learners=2,n_meta=2,seed=0\n1,2\n2\n";
        match CodingMatrix::read_csv(ragged.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("row 1"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let no_header = "1,2\n2,1\n";
        assert!(matches!(CodingMatrix::read_csv(no_header.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn prefix_keeps_leading_columns() {
        let m = generate_coding_matrix(8, 10, 3, 1).unwrap();
        let p = m.prefix(4).unwrap();
        assert_eq!(p.n_learners(), 4);
        assert_eq!(p.entries(), &m.entries().slice(ndarray::s![.., ..4]).to_owned());
        assert!(m.prefix(0).is_err());
        assert!(m.prefix(11).is_err());
    }
}

//! Combined experimental + observational sample, CSV ingestion, validation
//! and fold splitting for cross-fitting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Sample membership: experimental (no long-term outcome) or observational.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    E,
    O,
}

/// One unit. Scalars are stored as length-1 vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub group: Group,
    pub a: u8,
    pub x: Vec<f64>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub s3: Vec<f64>,
    pub y: Option<f64>,
}

impl ObservationRow {
    pub fn is_o(&self) -> bool {
        self.group == Group::O
    }
}

/// Vector widths shared by every row of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_x: usize,
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
}

/// Immutable collection of rows from both samples with cached counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedSample {
    rows: Vec<ObservationRow>,
    dims: Dims,
    n_e: usize,
    n_o: usize,
    /// `[n_E^(0), n_E^(1)]`
    arm_counts_e: [usize; 2],
    /// `[n_O^(0), n_O^(1)]`
    arm_counts_o: [usize; 2],
    o_index: Vec<usize>,
}

impl CombinedSample {
    /// Build a sample, enforcing the structural invariants (y present iff O,
    /// shared widths, binary treatment). Overlap is checked by [`validate`].
    pub fn new(rows: Vec<ObservationRow>) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Schema("sample has no rows".into()))?;
        let dims = Dims {
            d_x: first.x.len(),
            d1: first.s1.len(),
            d2: first.s2.len(),
            d3: first.s3.len(),
        };
        if dims.d1 == 0 || dims.d2 == 0 || dims.d3 == 0 {
            return Err(Error::Schema("s1, s2 and s3 need at least one column each".into()));
        }
        let mut arm_counts_e = [0usize; 2];
        let mut arm_counts_o = [0usize; 2];
        let mut o_index = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            if r.x.len() != dims.d_x || r.s1.len() != dims.d1 || r.s2.len() != dims.d2 || r.s3.len() != dims.d3 {
                return Err(Error::Schema(format!("row {i}: inconsistent vector widths")));
            }
            if r.a > 1 {
                return Err(Error::Schema(format!("row {i}: treatment must be 0 or 1")));
            }
            match (r.group, r.y) {
                (Group::E, Some(_)) => return Err(Error::Schema(format!("row {i}: y present on an E row"))),
                (Group::O, None) => return Err(Error::Schema(format!("row {i}: y missing on an O row"))),
                (Group::E, None) => arm_counts_e[r.a as usize] += 1,
                (Group::O, Some(_)) => {
                    arm_counts_o[r.a as usize] += 1;
                    o_index.push(i);
                }
            }
        }
        Ok(CombinedSample {
            n_e: arm_counts_e[0] + arm_counts_e[1],
            n_o: arm_counts_o[0] + arm_counts_o[1],
            rows,
            dims,
            arm_counts_e,
            arm_counts_o,
            o_index,
        })
    }

    pub fn rows(&self) -> &[ObservationRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<ObservationRow> {
        self.rows
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_e(&self) -> usize {
        self.n_e
    }

    pub fn n_o(&self) -> usize {
        self.n_o
    }

    pub fn arm_count(&self, group: Group, a: u8) -> usize {
        match group {
            Group::E => self.arm_counts_e[a as usize],
            Group::O => self.arm_counts_o[a as usize],
        }
    }

    /// Row indices of the O rows, in sample order. Position in this list is
    /// the "O-ordinal" used by [`FoldAssignment`].
    pub fn o_rows(&self) -> &[usize] {
        &self.o_index
    }

    pub fn e_rows(&self) -> impl Iterator<Item = &ObservationRow> {
        self.rows.iter().filter(|r| r.group == Group::E)
    }

    pub fn o_rows_iter(&self) -> impl Iterator<Item = &ObservationRow> {
        self.rows.iter().filter(|r| r.group == Group::O)
    }
}

/// Counts and warnings produced by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_e: usize,
    pub n_o: usize,
    /// `[a=0, a=1]`
    pub arm_counts_e: [usize; 2],
    pub arm_counts_o: [usize; 2],
    pub e_rows_with_y_fraction: f64,
    pub warnings: Vec<String>,
}

/// Cells below this size produce a "small cell" warning.
pub const SMALL_CELL: usize = 30;

/// Empirical overlap checks. Any empty (group, arm) cell is a hard failure.
pub fn validate(sample: &CombinedSample) -> Result<ValidationReport> {
    let mut warnings = Vec::new();
    for (g, name) in [(Group::E, "E"), (Group::O, "O")] {
        for a in 0..2u8 {
            let c = sample.arm_count(g, a);
            if c == 0 {
                return Err(Error::Validation(format!(
                    "no {name} rows with a = {a}; estimators are undefined"
                )));
            }
            if c < SMALL_CELL {
                warnings.push(format!("small cell: n_{name}^({a}) = {c} < {SMALL_CELL}"));
            }
        }
    }
    let e_with_y = sample.e_rows().filter(|r| r.y.is_some()).count();
    Ok(ValidationReport {
        n_e: sample.n_e(),
        n_o: sample.n_o(),
        arm_counts_e: [sample.arm_count(Group::E, 0), sample.arm_count(Group::E, 1)],
        arm_counts_o: [sample.arm_count(Group::O, 0), sample.arm_count(Group::O, 1)],
        e_rows_with_y_fraction: e_with_y as f64 / sample.n_e().max(1) as f64,
        warnings,
    })
}

/// Partition of the O rows into K folds. `labels[j]` is the fold (1..=K) of
/// the j-th O row in sample order; E rows carry no label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub labels: Vec<usize>,
}

impl FoldAssignment {
    /// O-ordinals belonging to fold `label`.
    pub fn members(&self, label: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l - 1] += 1;
        }
        s
    }
}

/// Seeded shuffle then round-robin. Shuffling is stratified by arm (treated
/// units are dealt first, continuing the rotation into the controls) so each
/// fold receives arm counts that differ by at most one, while total fold
/// sizes still differ by at most one.
pub fn split_folds(sample: &CombinedSample, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Argument(format!("K = {k}; need K >= 2")));
    }
    if k > sample.n_o() {
        return Err(Error::Argument(format!(
            "K = {k} exceeds the number of O rows ({})",
            sample.n_o()
        )));
    }
    let rows = sample.rows();
    let o = sample.o_rows();
    let mut rng = SplitMix64::new(seed);
    let mut labels = vec![0usize; o.len()];
    let mut next = 0usize;
    for a in [1u8, 0u8] {
        let mut arm: Vec<usize> = (0..o.len()).filter(|&j| rows[o[j]].a == a).collect();
        rng.shuffle(&mut arm);
        for j in arm {
            labels[j] = next % k + 1;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, seed, labels })
}

/// Float rendering used by [`save_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Twelve significant digits.
    Significant12,
    /// Shortest representation that parses back to the identical float.
    Exact,
}

fn fmt_float(v: f64, p: Precision) -> String {
    match p {
        Precision::Exact => format!("{v}"),
        Precision::Significant12 => {
            let rounded: f64 = format!("{v:.11e}").parse().expect("formatted float");
            format!("{rounded}")
        }
    }
}

fn header(dims: Dims) -> Vec<String> {
    let mut h = vec!["g".to_string(), "a".into(), "y".into()];
    for (p, d) in [("s1", dims.d1), ("s2", dims.d2), ("s3", dims.d3), ("x", dims.d_x)] {
        for j in 1..=d {
            h.push(format!("{p}_{j}"));
        }
    }
    h
}

/// Render the sample as CSV text.
pub fn to_csv_string(sample: &CombinedSample, precision: Precision) -> String {
    let mut out = header(sample.dims()).join(",");
    out.push('\n');
    for r in sample.rows() {
        let g = match r.group {
            Group::E => "E",
            Group::O => "O",
        };
        let _ = write!(out, "{g},{}", r.a);
        out.push(',');
        if let Some(y) = r.y {
            out.push_str(&fmt_float(y, precision));
        }
        for v in r.s1.iter().chain(&r.s2).chain(&r.s3).chain(&r.x) {
            out.push(',');
            out.push_str(&fmt_float(*v, precision));
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(sample: &CombinedSample, path: &Path, precision: Precision) -> Result<()> {
    std::fs::write(path, to_csv_string(sample, precision))?;
    Ok(())
}

/// Column positions of each block, recovered from the header.
struct Layout {
    g: usize,
    a: usize,
    y: usize,
    s1: Vec<usize>,
    s2: Vec<usize>,
    s3: Vec<usize>,
    x: Vec<usize>,
}

fn block(names: &[&str], prefix: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (col, n) in names.iter().enumerate() {
        if let Some(rest) = n.strip_prefix(prefix).and_then(|r| r.strip_prefix('_')) {
            let j: usize = rest
                .parse()
                .map_err(|_| Error::Schema(format!("bad column name `{n}`")))?;
            found.push((j, col));
        }
    }
    found.sort();
    for (pos, (j, _)) in found.iter().enumerate() {
        if *j != pos + 1 {
            return Err(Error::Schema(format!("{prefix} columns must be numbered 1..d")));
        }
    }
    Ok(found.into_iter().map(|(_, c)| c).collect())
}

fn layout(names: &[&str]) -> Result<Layout> {
    let find = |n: &str| {
        names
            .iter()
            .position(|c| *c == n)
            .ok_or_else(|| Error::Schema(format!("missing column `{n}`")))
    };
    let l = Layout {
        g: find("g")?,
        a: find("a")?,
        y: find("y")?,
        s1: block(names, "s1")?,
        s2: block(names, "s2")?,
        s3: block(names, "s3")?,
        x: block(names, "x")?,
    };
    if l.s1.is_empty() || l.s2.is_empty() || l.s3.is_empty() {
        return Err(Error::Schema("need s1_*, s2_* and s3_* columns".into()));
    }
    let used = 3 + l.s1.len() + l.s2.len() + l.s3.len() + l.x.len();
    if used != names.len() {
        return Err(Error::Schema("unexpected extra columns".into()));
    }
    Ok(l)
}

/// Parse CSV text into a sample (structural checks only).
pub fn parse_csv(text: &str) -> Result<CombinedSample> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let names: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let l = layout(&name_refs)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != names.len() {
            return Err(Error::Schema(format!(
                "line {line}: expected {} fields, found {}",
                names.len(),
                rec.len()
            )));
        }
        let num = |col: usize| -> Result<f64> {
            let s = rec[col].trim();
            s.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: cannot parse `{s}` as a number", names[col]),
            })
        };
        let group = match rec[l.g].trim() {
            "E" => Group::E,
            "O" => Group::O,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("g must be E or O, found `{other}`"),
                })
            }
        };
        let a = match rec[l.a].trim() {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("a must be 0 or 1, found `{other}`"),
                })
            }
        };
        let y = if rec[l.y].trim().is_empty() {
            None
        } else {
            Some(num(l.y)?)
        };
        match (group, y) {
            (Group::E, Some(_)) => return Err(Error::Schema(format!("line {line}: y present on an E row"))),
            (Group::O, None) => return Err(Error::Schema(format!("line {line}: y missing on an O row"))),
            _ => {}
        }
        let vec_of = |cols: &[usize]| cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>();
        rows.push(ObservationRow {
            group,
            a,
            x: vec_of(&l.x)?,
            s1: vec_of(&l.s1)?,
            s2: vec_of(&l.s2)?,
            s3: vec_of(&l.s3)?,
            y,
        });
    }
    CombinedSample::new(rows)
}

/// Read and validate a sample file.
pub fn load_csv(path: &Path) -> Result<CombinedSample> {
    let text = std::fs::read_to_string(path)?;
    let sample = parse_csv(&text)?;
    validate(&sample)?;
    Ok(sample)
}

/// Latent confounder values per row, kept apart from the estimator-facing
/// sample. Only oracles and the subsampling injector read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentLog {
    pub u: Vec<Vec<f64>>,
}

impl LatentLog {
    pub fn to_csv_string(&self) -> String {
        let d = self.u.first().map_or(0, Vec::len);
        let mut out = (1..=d).map(|j| format!("u_{j}")).collect::<Vec<_>>().join(",");
        out.push('\n');
        for u in &self.u {
            let cells: Vec<String> = u.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(g: Group, a: u8, y: Option<f64>) -> ObservationRow {
        ObservationRow {
            group: g,
            a,
            x: vec![0.5],
            s1: vec![1.0],
            s2: vec![2.0],
            s3: vec![3.0],
            y,
        }
    }

    fn tiny() -> CombinedSample {
        CombinedSample::new(vec![
            row(Group::E, 0, None),
            row(Group::E, 1, None),
            row(Group::O, 0, Some(0.0)),
            row(Group::O, 1, Some(1.0)),
        ])
        .unwrap()
    }

    #[test]
    fn minimal_file_parses() {
        let text = "g,a,y,s1_1,s2_1,s3_1,x_1\nE,0,,1,2,3,0.5\nE,1,,1,2,3,0.5\nO,0,0,1,2,3,0.5\nO,1,1,1,2,3,0.5\n";
        let s = parse_csv(text).unwrap();
        assert_eq!(s.n_e(), 2);
        assert_eq!(s.n_o(), 2);
        assert_eq!(s, tiny());
    }

    #[test]
    fn y_on_e_row_is_schema_error() {
        let text = "g,a,y,s1_1,s2_1,s3_1\nE,0,1.0,1,2,3\nO,1,1,1,2,3\n";
        assert!(matches!(parse_csv(text), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_y_on_o_row_is_schema_error() {
        let text = "g,a,y,s1_1,s2_1,s3_1\nO,0,,1,2,3\n";
        assert!(matches!(parse_csv(text), Err(Error::Schema(_))));
    }

    #[test]
    fn malformed_number_reports_line() {
        let text = "g,a,y,s1_1,s2_1,s3_1\nE,0,,1,2,3\nO,1,1,abc,2,3\n";
        match parse_csv(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_widths_rejected() {
        let mut r = row(Group::O, 1, Some(1.0));
        r.s2.push(4.0);
        assert!(matches!(
            CombinedSample::new(vec![row(Group::E, 0, None), r]),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn csv_text_round_trip() {
        let s = tiny();
        let text = to_csv_string(&s, Precision::Significant12);
        assert_eq!(parse_csv(&text).unwrap(), s);
        assert_eq!(
            to_csv_string(&parse_csv(&text).unwrap(), Precision::Significant12),
            text
        );
    }

    #[test]
    fn twelve_digit_formatting() {
        assert_eq!(
            fmt_float(0.1234567890123456, Precision::Significant12),
            "0.123456789012"
        );
        assert_eq!(fmt_float(-2.0, Precision::Significant12), "-2");
    }

    #[test]
    fn empty_cell_is_hard_failure() {
        let s = CombinedSample::new(vec![
            row(Group::E, 0, None),
            row(Group::O, 0, Some(0.0)),
            row(Group::O, 1, Some(1.0)),
        ])
        .unwrap();
        assert!(matches!(validate(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn small_cell_warning() {
        let mut rows = Vec::new();
        for i in 0..100 {
            rows.push(row(Group::E, (i % 2) as u8, None));
        }
        for _ in 0..12 {
            rows.push(row(Group::O, 0, Some(0.0)));
        }
        for _ in 0..50 {
            rows.push(row(Group::O, 1, Some(0.0)));
        }
        let rep = validate(&CombinedSample::new(rows).unwrap()).unwrap();
        assert_eq!(rep.warnings.len(), 1);
        assert!(rep.warnings[0].contains("small cell"));
    }

    fn o_only(n: usize) -> CombinedSample {
        let mut rows = vec![row(Group::E, 0, None)];
        for i in 0..n {
            rows.push(row(Group::O, (i % 3 == 0) as u8, Some(i as f64)));
        }
        CombinedSample::new(rows).unwrap()
    }

    #[test]
    fn folds_even_division() {
        let f = split_folds(&o_only(10), 5, 1).unwrap();
        assert_eq!(f.sizes(), vec![2; 5]);
    }

    #[test]
    fn folds_near_even_division() {
        let f = split_folds(&o_only(11), 5, 1).unwrap();
        let mut s = f.sizes();
        s.sort();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn folds_deterministic_and_bad_k() {
        let s = o_only(30);
        assert_eq!(split_folds(&s, 4, 9).unwrap(), split_folds(&s, 4, 9).unwrap());
        assert_ne!(split_folds(&s, 4, 9).unwrap(), split_folds(&s, 4, 10).unwrap());
        assert!(split_folds(&s, 1, 0).is_err());
        assert!(split_folds(&s, 31, 0).is_err());
    }

    #[test]
    fn folds_balance_arms() {
        let s = o_only(103);
        let f = split_folds(&s, 5, 2).unwrap();
        let o = s.o_rows();
        for a in 0..2u8 {
            let mut c = vec![0; 5];
            for (j, &l) in f.labels.iter().enumerate() {
                if s.rows()[o[j]].a == a {
                    c[l - 1] += 1;
                }
            }
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        }
    }
}

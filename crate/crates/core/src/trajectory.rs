//! Observed-data records with monotone censoring and truncation-by-death
//! structure, plus CSV ingestion and emission.
//!
//! A two-stage record has exactly one of five legal shapes:
//!
//! 1. censored at stage 1: `x1, a1, c1=1`
//! 2. died at stage 1: `x1, a1, c1=0, s1=0`
//! 3. censored at stage 2: `... s1=1, x2, a2, c2=1`
//! 4. died at stage 2: `... c2=0, s2=0`
//! 5. fully observed: `... s2=1, y`
//!
//! [`Trajectory`] values are validated on construction, so downstream code
//! never sees an illegal presence pattern.

use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Raw, possibly invalid record; the parsing/builder surface.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub x1: Vec<f64>,
    pub a1: u8,
    pub c1: u8,
    pub s1: Option<u8>,
    pub x2: Option<Vec<f64>>,
    pub a2: Option<u8>,
    pub c2: Option<u8>,
    pub s2: Option<u8>,
    pub y: Option<f64>,
}

/// A validated two-stage trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRecord", into = "TrajectoryRecord")]
pub struct Trajectory {
    x1: Vec<f64>,
    a1: u8,
    c1: u8,
    s1: Option<u8>,
    x2: Option<Vec<f64>>,
    a2: Option<u8>,
    c2: Option<u8>,
    s2: Option<u8>,
    y: Option<f64>,
}

/// Check the monotone invariants of a raw record.
pub fn validate(r: &TrajectoryRecord) -> Result<()> {
    if r.x1.is_empty() {
        return Err(Error::InvalidDataset("x1 must have dimension >= 1".into()));
    }
    if r.x1.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDataset("non-finite x1 value".into()));
    }
    for (name, v) in [("a1", Some(r.a1)), ("c1", Some(r.c1)), ("s1", r.s1), ("a2", r.a2), ("c2", r.c2), ("s2", r.s2)] {
        if let Some(v) = v {
            if v > 1 {
                return Err(Error::InvalidDataset(format!(
                    "binary field {name} must be 0 or 1, got {v}"
                )));
            }
        }
    }
    if let Some(x2) = &r.x2 {
        if x2.is_empty() || x2.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("x2 must be non-empty and finite".into()));
        }
    }
    if let Some(y) = r.y {
        if !y.is_finite() {
            return Err(Error::InvalidDataset("non-finite y".into()));
        }
    }

    // Presence rules, reported at the first offending field.
    if r.c1 == 1 {
        require_absent(r, &["s1", "x2", "a2", "c2", "s2", "y"])?;
        return Ok(());
    }
    let s1 = r.s1.ok_or_else(|| Error::monotone("s1"))?;
    if s1 == 0 {
        require_absent(r, &["x2", "a2", "c2", "s2", "y"])?;
        return Ok(());
    }
    if r.x2.is_none() {
        return Err(Error::monotone("x2"));
    }
    if r.a2.is_none() {
        return Err(Error::monotone("a2"));
    }
    let c2 = r.c2.ok_or_else(|| Error::monotone("c2"))?;
    if c2 == 1 {
        require_absent(r, &["s2", "y"])?;
        return Ok(());
    }
    let s2 = r.s2.ok_or_else(|| Error::monotone("s2"))?;
    if s2 == 0 {
        require_absent(r, &["y"])?;
        return Ok(());
    }
    if r.y.is_none() {
        return Err(Error::monotone("y"));
    }
    Ok(())
}

fn require_absent(r: &TrajectoryRecord, fields: &[&'static str]) -> Result<()> {
    for &f in fields {
        let present = match f {
            "s1" => r.s1.is_some(),
            "x2" => r.x2.is_some(),
            "a2" => r.a2.is_some(),
            "c2" => r.c2.is_some(),
            "s2" => r.s2.is_some(),
            "y" => r.y.is_some(),
            _ => unreachable!(),
        };
        if present {
            return Err(Error::monotone(f));
        }
    }
    Ok(())
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = Error;

    fn try_from(r: TrajectoryRecord) -> Result<Self> {
        validate(&r)?;
        Ok(Trajectory {
            x1: r.x1,
            a1: r.a1,
            c1: r.c1,
            s1: r.s1,
            x2: r.x2,
            a2: r.a2,
            c2: r.c2,
            s2: r.s2,
            y: r.y,
        })
    }
}

impl From<Trajectory> for TrajectoryRecord {
    fn from(t: Trajectory) -> Self {
        TrajectoryRecord {
            x1: t.x1,
            a1: t.a1,
            c1: t.c1,
            s1: t.s1,
            x2: t.x2,
            a2: t.a2,
            c2: t.c2,
            s2: t.s2,
            y: t.y,
        }
    }
}

impl Trajectory {
    pub fn new(record: TrajectoryRecord) -> Result<Self> {
        Self::try_from(record)
    }

    /// Shape 1: censored at stage 1.
    pub fn censored_stage1(x1: Vec<f64>, a1: u8) -> Result<Self> {
        Self::new(TrajectoryRecord {
            x1,
            a1,
            c1: 1,
            ..Default::default()
        })
    }

    /// Shape 2: died at stage 1.
    pub fn died_stage1(x1: Vec<f64>, a1: u8) -> Result<Self> {
        Self::new(TrajectoryRecord {
            x1,
            a1,
            c1: 0,
            s1: Some(0),
            ..Default::default()
        })
    }

    /// Shape 3: censored at stage 2.
    pub fn censored_stage2(x1: Vec<f64>, a1: u8, x2: Vec<f64>, a2: u8) -> Result<Self> {
        Self::new(TrajectoryRecord {
            x1,
            a1,
            c1: 0,
            s1: Some(1),
            x2: Some(x2),
            a2: Some(a2),
            c2: Some(1),
            ..Default::default()
        })
    }

    /// Shape 4: died at stage 2.
    pub fn died_stage2(x1: Vec<f64>, a1: u8, x2: Vec<f64>, a2: u8) -> Result<Self> {
        Self::new(TrajectoryRecord {
            x1,
            a1,
            c1: 0,
            s1: Some(1),
            x2: Some(x2),
            a2: Some(a2),
            c2: Some(0),
            s2: Some(0),
            ..Default::default()
        })
    }

    /// Shape 5: fully observed.
    pub fn complete(x1: Vec<f64>, a1: u8, x2: Vec<f64>, a2: u8, y: f64) -> Result<Self> {
        Self::new(TrajectoryRecord {
            x1,
            a1,
            c1: 0,
            s1: Some(1),
            x2: Some(x2),
            a2: Some(a2),
            c2: Some(0),
            s2: Some(1),
            y: Some(y),
        })
    }

    #[inline]
    pub fn x1(&self) -> &[f64] {
        &self.x1
    }
    #[inline]
    pub fn a1(&self) -> u8 {
        self.a1
    }
    #[inline]
    pub fn c1(&self) -> u8 {
        self.c1
    }
    #[inline]
    pub fn s1(&self) -> Option<u8> {
        self.s1
    }
    #[inline]
    pub fn x2(&self) -> Option<&[f64]> {
        self.x2.as_deref()
    }
    #[inline]
    pub fn a2(&self) -> Option<u8> {
        self.a2
    }
    #[inline]
    pub fn c2(&self) -> Option<u8> {
        self.c2
    }
    #[inline]
    pub fn s2(&self) -> Option<u8> {
        self.s2
    }
    #[inline]
    pub fn y(&self) -> Option<f64> {
        self.y
    }

    /// Uncensored and alive after stage 1, so stage-2 data exists.
    #[inline]
    pub fn reached_stage2(&self) -> bool {
        self.c1 == 0 && self.s1 == Some(1)
    }

    /// Reached stage 2, uncensored there and alive with observed outcome.
    #[inline]
    pub fn fully_observed(&self) -> bool {
        self.c2 == Some(0) && self.s2 == Some(1)
    }

    /// History vector (x1, a1, x2) used by stage-2 policies.
    pub fn h2(&self) -> Option<Vec<f64>> {
        self.x2().map(|x2| {
            let mut h = Vec::with_capacity(self.x1.len() + 1 + x2.len());
            h.extend_from_slice(&self.x1);
            h.push(self.a1 as f64);
            h.extend_from_slice(x2);
            h
        })
    }
}

/// An ordered, dimension-consistent collection of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    rows: Vec<Trajectory>,
    p1: usize,
    p2: usize,
}

impl Dataset {
    /// Build from rows, inferring covariate dimensions. `p2` falls back to
    /// `p2_hint` when no row reached stage 2.
    pub fn from_rows(rows: Vec<Trajectory>, p2_hint: Option<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidDataset("dataset has no rows".into()));
        }
        let p1 = rows[0].x1.len();
        let mut p2 = p2_hint.unwrap_or(0);
        for (i, r) in rows.iter().enumerate() {
            if r.x1.len() != p1 {
                return Err(Error::InvalidDataset(format!(
                    "row {} has p1 = {}, expected {}",
                    i + 1,
                    r.x1.len(),
                    p1
                )));
            }
            if let Some(x2) = r.x2() {
                if p2 == 0 {
                    p2 = x2.len();
                } else if x2.len() != p2 {
                    return Err(Error::InvalidDataset(format!(
                        "row {} has p2 = {}, expected {}",
                        i + 1,
                        x2.len(),
                        p2
                    )));
                }
            }
        }
        Ok(Dataset { rows, p1, p2 })
    }

    #[inline]
    pub fn rows(&self) -> &[Trajectory] {
        &self.rows
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.rows.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
    #[inline]
    pub fn p1(&self) -> usize {
        self.p1
    }
    #[inline]
    pub fn p2(&self) -> usize {
        self.p2
    }
}

/// Column-name mapping for CSV ingestion. Covariates are addressed by prefix
/// plus 1-based index (`x1_1 .. x1_p1`), everything else by exact name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub x1_prefix: String,
    pub x2_prefix: String,
    pub a1: String,
    pub c1: String,
    pub s1: String,
    pub a2: String,
    pub c2: String,
    pub s2: String,
    pub y: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            x1_prefix: "x1_".into(),
            x2_prefix: "x2_".into(),
            a1: "a1".into(),
            c1: "c1".into(),
            s1: "s1".into(),
            a2: "a2".into(),
            c2: "c2".into(),
            s2: "s2".into(),
            y: "y".into(),
        }
    }
}

fn prefixed_columns(headers: &[String], prefix: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (idx, h) in headers.iter().enumerate() {
        if let Some(rest) = h.strip_prefix(prefix) {
            if let Ok(k) = rest.parse::<usize>() {
                if k >= 1 {
                    found.push((k, idx));
                }
            }
        }
    }
    found.sort();
    for (want, &(k, _)) in (1..).zip(found.iter()) {
        if k != want {
            return Err(Error::InvalidDataset(format!(
                "covariate columns {prefix}1..{prefix}N must be contiguous; missing {prefix}{want}"
            )));
        }
    }
    Ok(found.into_iter().map(|(_, idx)| idx).collect())
}

fn col_index(headers: &[String], name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::InvalidDataset(format!("missing column `{name}` in header")))
}

fn parse_cell_f64(cell: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let t = cell.trim();
    if t.is_empty() {
        return Ok(None);
    }
    t.parse::<f64>().map(Some).map_err(|e| Error::ParseError {
        row,
        column: column.to_string(),
        message: e.to_string(),
    })
}

fn parse_cell_bin(cell: &str, row: usize, column: &str) -> Result<Option<u8>> {
    let t = cell.trim();
    if t.is_empty() {
        return Ok(None);
    }
    match t {
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        other => Err(Error::ParseError {
            row,
            column: column.to_string(),
            message: format!("binary column accepts only 0 or 1, got `{other}`"),
        }),
    }
}

/// Read a dataset from CSV. Row indices in errors are 1-based data rows.
pub fn read_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let x1_cols = prefixed_columns(&headers, &schema.x1_prefix)?;
    if x1_cols.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "no `{}k` covariate columns in header",
            schema.x1_prefix
        )));
    }
    let x2_cols = prefixed_columns(&headers, &schema.x2_prefix)?;
    let a1 = col_index(&headers, &schema.a1)?;
    let c1 = col_index(&headers, &schema.c1)?;
    let s1 = col_index(&headers, &schema.s1)?;
    let a2 = col_index(&headers, &schema.a2)?;
    let c2 = col_index(&headers, &schema.c2)?;
    let s2 = col_index(&headers, &schema.s2)?;
    let y = col_index(&headers, &schema.y)?;

    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let get = |idx: usize| rec.get(idx).unwrap_or("");

        let mut x1 = Vec::with_capacity(x1_cols.len());
        for &ci in &x1_cols {
            match parse_cell_f64(get(ci), row, &headers[ci])? {
                Some(v) => x1.push(v),
                None => {
                    return Err(Error::ParseError {
                        row,
                        column: headers[ci].clone(),
                        message: "baseline covariate cell may not be empty".into(),
                    })
                }
            }
        }
        let x2_vals: Vec<Option<f64>> = x2_cols
            .iter()
            .map(|&ci| parse_cell_f64(get(ci), row, &headers[ci]))
            .collect::<Result<_>>()?;
        let x2 = if x2_vals.iter().all(Option::is_some) && !x2_vals.is_empty() {
            Some(x2_vals.iter().map(|v| v.unwrap()).collect())
        } else if x2_vals.iter().any(Option::is_some) {
            return Err(Error::ParseError {
                row,
                column: format!("{}*", schema.x2_prefix),
                message: "intermediate covariates must be all present or all absent".into(),
            });
        } else {
            None
        };

        let record = TrajectoryRecord {
            x1,
            a1: parse_cell_bin(get(a1), row, &headers[a1])?.ok_or(Error::ParseError {
                row,
                column: headers[a1].clone(),
                message: "a1 may not be empty".into(),
            })?,
            c1: parse_cell_bin(get(c1), row, &headers[c1])?.ok_or(Error::ParseError {
                row,
                column: headers[c1].clone(),
                message: "c1 may not be empty".into(),
            })?,
            s1: parse_cell_bin(get(s1), row, &headers[s1])?,
            x2,
            a2: parse_cell_bin(get(a2), row, &headers[a2])?,
            c2: parse_cell_bin(get(c2), row, &headers[c2])?,
            s2: parse_cell_bin(get(s2), row, &headers[s2])?,
            y: parse_cell_f64(get(y), row, &headers[y])?,
        };
        let traj = Trajectory::new(record).map_err(|e| e.with_row(row))?;
        rows.push(traj);
    }
    let p2_hint = if x2_cols.is_empty() {
        None
    } else {
        Some(x2_cols.len())
    };
    Dataset::from_rows(rows, p2_hint)
}

/// Write a dataset with the default schema column layout. Absent fields are
/// emitted as empty cells; reals use the shortest round-trip decimal form.
pub fn write_csv(d: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let schema = CsvSchema::default();
    let mut header = Vec::new();
    for k in 1..=d.p1() {
        header.push(format!("{}{}", schema.x1_prefix, k));
    }
    header.push(schema.a1.clone());
    header.push(schema.c1.clone());
    header.push(schema.s1.clone());
    for k in 1..=d.p2() {
        header.push(format!("{}{}", schema.x2_prefix, k));
    }
    header.extend([
        schema.a2.clone(),
        schema.c2.clone(),
        schema.s2.clone(),
        schema.y.clone(),
    ]);
    writeln!(w, "{}", header.join(","))?;

    let fmt_bin = |v: Option<u8>| v.map(|b| b.to_string()).unwrap_or_default();
    for t in d.rows() {
        let mut cells: Vec<String> = t.x1().iter().map(|v| v.to_string()).collect();
        cells.push(t.a1().to_string());
        cells.push(t.c1().to_string());
        cells.push(fmt_bin(t.s1()));
        match t.x2() {
            Some(x2) => cells.extend(x2.iter().map(|v| v.to_string())),
            None => cells.extend(std::iter::repeat(String::new()).take(d.p2())),
        }
        cells.push(fmt_bin(t.a2()));
        cells.push(fmt_bin(t.c2()));
        cells.push(fmt_bin(t.s2()));
        cells.push(t.y().map(|v| v.to_string()).unwrap_or_default());
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn legal_masks() -> [[bool; 6]; 5] {
        // (s1, x2, a2, c2, s2, y)
        [
            [false, false, false, false, false, false],
            [true, false, false, false, false, false],
            [true, true, true, true, false, false],
            [true, true, true, true, true, false],
            [true, true, true, true, true, true],
        ]
    }

    fn record_for_mask(mask: [bool; 6]) -> TrajectoryRecord {
        // Values chosen so presence alone decides validity: gates are set to
        // whatever the next present field requires.
        TrajectoryRecord {
            x1: vec![0.1],
            a1: 1,
            c1: if mask[0] { 0 } else { 1 },
            s1: mask[0].then(|| if mask[1] { 1 } else { 0 }),
            x2: mask[1].then(|| vec![0.5]),
            a2: mask[2].then_some(1),
            c2: mask[3].then(|| if mask[4] { 0 } else { 1 }),
            s2: mask[4].then(|| if mask[5] { 1 } else { 0 }),
            y: mask[5].then_some(2.3),
        }
    }

    #[test]
    fn exactly_five_presence_masks_are_legal() {
        let legal = legal_masks();
        let mut accepted = Vec::new();
        for bits in 0..64u32 {
            let mask: [bool; 6] = std::array::from_fn(|i| bits >> i & 1 == 1);
            if validate(&record_for_mask(mask)).is_ok() {
                accepted.push(mask);
            }
        }
        assert_eq!(accepted.len(), 5);
        for m in legal {
            assert!(accepted.contains(&m), "legal mask {m:?} rejected");
        }
    }

    #[test]
    fn censored_shape_accepts_and_forbids_s1() {
        assert!(Trajectory::censored_stage1(vec![0.1], 1).is_ok());
        let bad = TrajectoryRecord {
            x1: vec![0.1],
            a1: 1,
            c1: 1,
            s1: Some(1),
            ..Default::default()
        };
        match validate(&bad) {
            Err(Error::MonotoneViolation { field: "s1", .. }) => {}
            other => panic!("expected s1 violation, got {other:?}"),
        }
    }

    #[test]
    fn fully_observed_shape_is_accepted() {
        let t = Trajectory::complete(vec![0.1], 0, vec![0.5], 1, 2.3).unwrap();
        assert!(t.fully_observed());
        assert_eq!(t.h2().unwrap(), vec![0.1, 0.0, 0.5]);
    }

    #[test]
    fn y_on_dead_row_is_rejected() {
        let bad = TrajectoryRecord {
            x1: vec![0.1],
            a1: 0,
            c1: 0,
            s1: Some(1),
            x2: Some(vec![0.5]),
            a2: Some(0),
            c2: Some(0),
            s2: Some(0),
            y: Some(1.0),
        };
        match validate(&bad) {
            Err(Error::MonotoneViolation { field: "y", .. }) => {}
            other => panic!("expected y violation, got {other:?}"),
        }
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let rows = vec![
            Trajectory::complete(vec![0.25], 1, vec![-1.5], 0, 3.75).unwrap(),
            Trajectory::censored_stage1(vec![-0.125], 0).unwrap(),
            Trajectory::died_stage2(vec![0.5], 0, vec![2.0], 1).unwrap(),
        ];
        let d = Dataset::from_rows(rows, None).unwrap();
        write_csv(&d, &path).unwrap();
        let d2 = read_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(d, d2);

        // y populated on a dead row.
        std::fs::write(
            &path,
            "x1_1,a1,c1,s1,x2_1,a2,c2,s2,y\n0.1,0,0,1,0.5,1,0,0,2.0\n",
        )
        .unwrap();
        match read_csv(&path, &CsvSchema::default()) {
            Err(Error::MonotoneViolation {
                field: "y",
                row: Some(1),
            }) => {}
            other => panic!("expected y violation at row 1, got {other:?}"),
        }

        // Non-numeric covariate.
        std::fs::write(&path, "x1_1,a1,c1,s1,x2_1,a2,c2,s2,y\nabc,0,1,,,,,,\n").unwrap();
        match read_csv(&path, &CsvSchema::default()) {
            Err(Error::ParseError { row: 1, column, .. }) => assert_eq!(column, "x1_1"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}

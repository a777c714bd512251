//! Recurrent-event data: ingestion, validation, gap-time ordering and risk sets.
//!
//! A dataset holds one row per recorded gap time and one covariate row per
//! subject. Rows are kept in canonical order (subject id, then event index),
//! which is also the order of record-level random effects under the AR(1)
//! structure.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::likelihood::CovStructure;

pub const COL_SUBJECT: &str = "subject_id";
pub const COL_EVENT: &str = "event_index";
pub const COL_TIME: &str = "gap_time";
pub const COL_STATUS: &str = "status";

/// One observed gap time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordRow {
    pub subject_id: i64,
    /// 1-based position of the gap within the subject's history.
    pub event_index: u32,
    pub gap_time: f64,
    /// `true` when the event was observed, `false` when censored.
    pub status: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentDataset {
    rows: Vec<RecordRow>,
    subject_ids: Vec<i64>,
    subject_of_row: Vec<usize>,
    subject_rows: Vec<Range<usize>>,
    incidence: DMatrix<f64>,
    latency: DMatrix<f64>,
    incidence_names: Vec<String>,
    latency_names: Vec<String>,
}

impl RecurrentDataset {
    /// Builds a dataset from rows and per-subject covariates. Row `k` of
    /// `incidence`/`latency` belongs to `subject_ids[k]`.
    pub fn new(
        mut rows: Vec<RecordRow>,
        subject_ids: Vec<i64>,
        incidence: DMatrix<f64>,
        latency: DMatrix<f64>,
        incidence_names: Vec<String>,
        latency_names: Vec<String>,
    ) -> Result<Self> {
        let m = subject_ids.len();
        if rows.is_empty() || m == 0 {
            return Err(Error::Integrity("dataset has no records".into()));
        }
        if incidence.nrows() != m || latency.nrows() != m {
            return Err(Error::Dimension(format!(
                "{} subjects but covariate matrices have {} and {} rows",
                m,
                incidence.nrows(),
                latency.nrows()
            )));
        }
        if incidence.ncols() != incidence_names.len() || latency.ncols() != latency_names.len() {
            return Err(Error::Dimension("covariate names do not match columns".into()));
        }
        if incidence.iter().chain(latency.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Integrity("covariates contain missing or non-finite values".into()));
        }
        for (k, r) in rows.iter().enumerate() {
            if !(r.gap_time.is_finite() && r.gap_time >= 0.0) {
                return Err(Error::Integrity(format!(
                    "record {k} (subject {}, event {}) has invalid gap time {}",
                    r.subject_id, r.event_index, r.gap_time
                )));
            }
            if r.event_index == 0 {
                return Err(Error::Integrity(format!(
                    "record {k} (subject {}) has event_index 0; indices start at 1",
                    r.subject_id
                )));
            }
        }

        // Covariate rows are re-sorted with the subjects.
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by_key(|&k| subject_ids[k]);
        let sorted_ids: Vec<i64> = order.iter().map(|&k| subject_ids[k]).collect();
        if sorted_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Integrity("duplicate subject id in covariate table".into()));
        }
        let incidence = DMatrix::from_fn(m, incidence.ncols(), |i, j| incidence[(order[i], j)]);
        let latency = DMatrix::from_fn(m, latency.ncols(), |i, j| latency[(order[i], j)]);
        let index_of: HashMap<i64, usize> =
            sorted_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        rows.sort_by_key(|r| (r.subject_id, r.event_index));
        for w in rows.windows(2) {
            if w[0].subject_id == w[1].subject_id && w[0].event_index == w[1].event_index {
                return Err(Error::Integrity(format!(
                    "duplicate record (subject {}, event {})",
                    w[0].subject_id, w[0].event_index
                )));
            }
        }
        let mut subject_of_row = Vec::with_capacity(rows.len());
        for r in &rows {
            let i = *index_of.get(&r.subject_id).ok_or_else(|| {
                Error::Integrity(format!("subject {} has no covariate row", r.subject_id))
            })?;
            subject_of_row.push(i);
        }
        let mut subject_rows = vec![0..0; m];
        let mut start = 0;
        while start < rows.len() {
            let i = subject_of_row[start];
            let mut end = start;
            while end < rows.len() && subject_of_row[end] == i {
                end += 1;
            }
            subject_rows[i] = start..end;
            start = end;
        }
        if let Some(i) = subject_rows.iter().position(|r| r.is_empty()) {
            return Err(Error::Integrity(format!("subject {} has no records", sorted_ids[i])));
        }

        Ok(Self {
            rows,
            subject_ids: sorted_ids,
            subject_of_row,
            subject_rows,
            incidence,
            latency,
            incidence_names,
            latency_names,
        })
    }

    pub fn rows(&self) -> &[RecordRow] {
        &self.rows
    }

    pub fn subject_ids(&self) -> &[i64] {
        &self.subject_ids
    }

    /// Subject index of each row, in canonical row order.
    pub fn subject_of_row(&self) -> &[usize] {
        &self.subject_of_row
    }

    /// Canonical row range of subject `i`.
    pub fn subject_rows(&self, i: usize) -> Range<usize> {
        self.subject_rows[i].clone()
    }

    pub fn records_per_subject(&self) -> Vec<usize> {
        self.subject_rows.iter().map(|r| r.len()).collect()
    }

    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    pub fn latency(&self) -> &DMatrix<f64> {
        &self.latency
    }

    pub fn incidence_names(&self) -> &[String] {
        &self.incidence_names
    }

    pub fn latency_names(&self) -> &[String] {
        &self.latency_names
    }

    /// Number of subjects.
    pub fn m(&self) -> usize {
        self.subject_ids.len()
    }

    /// Total number of records.
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.incidence.ncols()
    }

    pub fn p(&self) -> usize {
        self.latency.ncols()
    }

    pub fn n_events(&self) -> usize {
        self.rows.iter().filter(|r| r.status).count()
    }

    /// Keeps only the named columns of each covariate block (used for
    /// support-restricted refits).
    pub fn select_columns(&self, incidence_cols: &[usize], latency_cols: &[usize]) -> Result<Self> {
        let pick = |src: &DMatrix<f64>, names: &[String], cols: &[usize]| -> Result<(DMatrix<f64>, Vec<String>)> {
            if let Some(&c) = cols.iter().find(|&&c| c >= src.ncols()) {
                return Err(Error::Dimension(format!("column {c} out of range")));
            }
            let mat = DMatrix::from_fn(src.nrows(), cols.len(), |i, j| src[(i, cols[j])]);
            Ok((mat, cols.iter().map(|&c| names[c].clone()).collect()))
        };
        let (inc, inc_names) = pick(&self.incidence, &self.incidence_names, incidence_cols)?;
        let (lat, lat_names) = pick(&self.latency, &self.latency_names, latency_cols)?;
        Ok(Self {
            incidence: inc,
            latency: lat,
            incidence_names: inc_names,
            latency_names: lat_names,
            ..self.clone()
        })
    }

    /// Writes the dataset as CSV with one covariate column per distinct name.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let mut columns: Vec<(&str, &DMatrix<f64>, usize)> = Vec::new();
        for (j, name) in self.incidence_names.iter().enumerate() {
            columns.push((name, &self.incidence, j));
        }
        for (j, name) in self.latency_names.iter().enumerate() {
            if !self.incidence_names.contains(name) {
                columns.push((name, &self.latency, j));
            }
        }
        let mut header = vec![COL_SUBJECT, COL_EVENT, COL_TIME, COL_STATUS];
        header.extend(columns.iter().map(|c| c.0));
        w.write_record(&header)?;
        for (k, r) in self.rows.iter().enumerate() {
            let i = self.subject_of_row[k];
            let mut rec = vec![
                r.subject_id.to_string(),
                r.event_index.to_string(),
                r.gap_time.to_string(),
                (r.status as u8).to_string(),
            ];
            rec.extend(columns.iter().map(|(_, mat, j)| mat[(i, *j)].to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

/// Which CSV columns feed each submodel.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Schema {
    pub incidence_covariates: Vec<String>,
    pub latency_covariates: Vec<String>,
    pub standardize: bool,
}

impl Schema {
    /// Reads `incidence_covariates`, `latency_covariates` (comma-separated)
    /// and `standardize` from parsed key-value pairs. Other keys are ignored.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut schema = Schema::default();
        let mut seen_inc = false;
        let mut seen_lat = false;
        for (key, value) in pairs {
            match key.as_str() {
                "incidence_covariates" => {
                    schema.incidence_covariates = split_list(value);
                    seen_inc = true;
                }
                "latency_covariates" => {
                    schema.latency_covariates = split_list(value);
                    seen_lat = true;
                }
                "standardize" => schema.standardize = parse_bool("standardize", value)?,
                _ => {}
            }
        }
        if !seen_inc {
            return Err(Error::Schema("missing key `incidence_covariates`".into()));
        }
        if !seen_lat {
            return Err(Error::Schema("missing key `latency_covariates`".into()));
        }
        Ok(schema)
    }
}

impl Schema {
    /// Every column other than the four record columns, in file order, for
    /// both submodels.
    pub fn all_columns(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let reserved = [COL_SUBJECT, COL_EVENT, COL_TIME, COL_STATUS];
        let names: Vec<String> = reader
            .headers()?
            .iter()
            .filter(|h| !reserved.contains(h))
            .map(String::from)
            .collect();
        Ok(Schema {
            incidence_covariates: names.clone(),
            latency_covariates: names,
            standardize: false,
        })
    }
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

pub(crate) fn parse_bool(field: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        other => Err(Error::config(field, format!("expected a boolean, got `{other}`"))),
    }
}

/// Parses flat `key = value` text. Blank lines and `#` comments are skipped;
/// later keys override earlier ones when the caller folds the list.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected `key = value`"))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::config(format!("line {}", lineno + 1), "empty key"));
        }
        let value = v.trim().trim_matches('"').to_string();
        out.push((key, value));
    }
    Ok(out)
}

/// Loads a recurrent-event CSV. Covariates must be constant within a subject.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<RecurrentDataset> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let c_subject = col(COL_SUBJECT)?;
    let c_event = col(COL_EVENT)?;
    let c_time = col(COL_TIME)?;
    let c_status = col(COL_STATUS)?;
    let inc_cols = schema
        .incidence_covariates
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>>>()?;
    let lat_cols = schema
        .latency_covariates
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut covariates: BTreeMap<i64, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        // Data rows are numbered from 1, header excluded.
        let rowno = k + 1;
        let field = |c: usize| record.get(c).unwrap_or("");
        let parse_f64 = |c: usize| -> Result<f64> {
            field(c).parse::<f64>().map_err(|e| Error::Parse {
                row: rowno,
                column: headers[c].to_string(),
                message: format!("`{}`: {e}", field(c)),
            })
        };
        let subject_id: i64 = field(c_subject).parse().map_err(|e| Error::Parse {
            row: rowno,
            column: COL_SUBJECT.into(),
            message: format!("`{}`: {e}", field(c_subject)),
        })?;
        let event_index: u32 = field(c_event).parse().map_err(|e| Error::Parse {
            row: rowno,
            column: COL_EVENT.into(),
            message: format!("`{}`: {e}", field(c_event)),
        })?;
        let gap_time = parse_f64(c_time)?;
        if !(gap_time.is_finite() && gap_time >= 0.0) {
            return Err(Error::Parse {
                row: rowno,
                column: COL_TIME.into(),
                message: format!("gap time must be a nonnegative number, got {gap_time}"),
            });
        }
        let status = match field(c_status) {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    row: rowno,
                    column: COL_STATUS.into(),
                    message: format!("status must be 0 or 1, got `{other}`"),
                })
            }
        };
        let x = inc_cols.iter().map(|&c| parse_f64(c)).collect::<Result<Vec<_>>>()?;
        let z = lat_cols.iter().map(|&c| parse_f64(c)).collect::<Result<Vec<_>>>()?;
        match covariates.get(&subject_id) {
            Some((x0, z0, first)) => {
                if *x0 != x || *z0 != z {
                    return Err(Error::Integrity(format!(
                        "row {rowno}: covariates of subject {subject_id} differ from row {first}"
                    )));
                }
            }
            None => {
                covariates.insert(subject_id, (x, z, rowno));
            }
        }
        rows.push(RecordRow {
            subject_id,
            event_index,
            gap_time,
            status,
        });
    }
    if rows.is_empty() {
        return Err(Error::Integrity(format!("{} has no data rows", path.display())));
    }

    let m = covariates.len();
    let d = inc_cols.len();
    let p = lat_cols.len();
    let mut incidence = DMatrix::zeros(m, d);
    let mut latency = DMatrix::zeros(m, p);
    let mut ids = Vec::with_capacity(m);
    for (i, (id, (x, z, _))) in covariates.into_iter().enumerate() {
        ids.push(id);
        for j in 0..d {
            incidence[(i, j)] = x[j];
        }
        for j in 0..p {
            latency[(i, j)] = z[j];
        }
    }
    if schema.standardize {
        standardize_columns(&mut incidence);
        standardize_columns(&mut latency);
    }
    RecurrentDataset::new(
        rows,
        ids,
        incidence,
        latency,
        schema.incidence_covariates.clone(),
        schema.latency_covariates.clone(),
    )
}

/// Centers each column and scales it to unit population variance. Constant
/// columns are only centered.
pub fn standardize_columns(mat: &mut DMatrix<f64>) {
    let rows = mat.nrows() as f64;
    for mut col in mat.column_iter_mut() {
        let mean = col.sum() / rows;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
        let sd = var.sqrt();
        for v in col.iter_mut() {
            *v -= mean;
            if sd > 0.0 {
                *v /= sd;
            }
        }
    }
}

/// Records sorted by ascending gap time, with the design matrices laid out in
/// that order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedView {
    /// Sorted position -> canonical row index.
    pub perm: Vec<usize>,
    pub time: Vec<f64>,
    pub status: Vec<bool>,
    /// Sorted position -> subject index.
    pub subject: Vec<usize>,
    /// n x (d+1), leading intercept column.
    pub design_w: DMatrix<f64>,
    /// n x p.
    pub design_z: DMatrix<f64>,
    pub m: usize,
    /// Records per subject, in subject index order.
    pub subject_sizes: Vec<usize>,
}

impl OrderedView {
    pub fn n(&self) -> usize {
        self.perm.len()
    }

    /// Random-effect index of each sorted record: the subject under constant
    /// frailty, the canonical row under AR(1) frailty.
    pub fn u_index(&self, structure: CovStructure) -> Vec<usize> {
        match structure {
            CovStructure::Constant => self.subject.clone(),
            CovStructure::Ar1 => self.perm.clone(),
        }
    }

    pub fn u_dim(&self, structure: CovStructure) -> usize {
        match structure {
            CovStructure::Constant => self.m,
            CovStructure::Ar1 => self.n(),
        }
    }

    /// Dense incidence matrix mapping random effects to sorted records.
    pub fn design_r(&self, structure: CovStructure) -> DMatrix<f64> {
        let idx = self.u_index(structure);
        let mut r = DMatrix::zeros(self.n(), self.u_dim(structure));
        for (pos, &k) in idx.iter().enumerate() {
            r[(pos, k)] = 1.0;
        }
        r
    }
}

/// Sorts records by gap time; ties go by (subject id, event index).
pub fn order_records(data: &RecurrentDataset) -> OrderedView {
    let rows = data.rows();
    let mut perm: Vec<usize> = (0..rows.len()).collect();
    perm.sort_by(|&a, &b| {
        let (ra, rb) = (&rows[a], &rows[b]);
        ra.gap_time
            .total_cmp(&rb.gap_time)
            .then(ra.subject_id.cmp(&rb.subject_id))
            .then(ra.event_index.cmp(&rb.event_index))
    });
    let n = perm.len();
    let d = data.d();
    let p = data.p();
    let subject: Vec<usize> = perm.iter().map(|&k| data.subject_of_row()[k]).collect();
    let design_w = DMatrix::from_fn(n, d + 1, |r, j| {
        if j == 0 {
            1.0
        } else {
            data.incidence()[(subject[r], j - 1)]
        }
    });
    let design_z = DMatrix::from_fn(n, p, |r, j| data.latency()[(subject[r], j)]);
    OrderedView {
        time: perm.iter().map(|&k| rows[k].gap_time).collect(),
        status: perm.iter().map(|&k| rows[k].status).collect(),
        perm,
        subject,
        design_w,
        design_z,
        m: data.m(),
        subject_sizes: data.records_per_subject(),
    }
}

/// Nested risk sets `R(r) = { l : t_(l) >= t_(r) }` over sorted positions.
///
/// Because positions are sorted by time, each risk set is a suffix
/// `start[r]..n`, where `start[r]` is the first position tied with `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RiskSet {
    start: Vec<usize>,
    /// Last position (inclusive) of the tie group containing `r`.
    group_end: Vec<usize>,
}

impl RiskSet {
    pub fn members(&self, r: usize) -> Range<usize> {
        self.start[r]..self.start.len()
    }

    pub fn size(&self, r: usize) -> usize {
        self.start.len() - self.start[r]
    }

    pub fn start(&self, r: usize) -> usize {
        self.start[r]
    }

    pub fn group_end(&self, r: usize) -> usize {
        self.group_end[r]
    }

    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }
}

pub fn risk_sets(view: &OrderedView) -> RiskSet {
    let n = view.n();
    let mut start = vec![0; n];
    let mut group_end = vec![0; n];
    let mut r = 0;
    while r < n {
        let mut e = r;
        while e + 1 < n && view.time[e + 1] == view.time[r] {
            e += 1;
        }
        for k in r..=e {
            start[k] = r;
            group_end[k] = e;
        }
        r = e + 1;
    }
    RiskSet { start, group_end }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema(cols: &[&str], standardize: bool) -> Schema {
        Schema {
            incidence_covariates: cols.iter().map(|s| s.to_string()).collect(),
            latency_covariates: cols.iter().map(|s| s.to_string()).collect(),
            standardize,
        }
    }

    fn tiny(times: &[(i64, u32, f64)]) -> RecurrentDataset {
        let mut ids: Vec<i64> = times.iter().map(|t| t.0).collect();
        ids.sort();
        ids.dedup();
        let m = ids.len();
        let rows = times
            .iter()
            .map(|&(s, j, t)| RecordRow {
                subject_id: s,
                event_index: j,
                gap_time: t,
                status: true,
            })
            .collect();
        RecurrentDataset::new(
            rows,
            ids,
            DMatrix::zeros(m, 0),
            DMatrix::zeros(m, 0),
            vec![],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn loads_three_rows() {
        let f = write_tmp(
            "subject_id,event_index,gap_time,status,x1,x2\n1,1,2.5,1,0.1,1\n1,2,4.0,0,0.1,1\n2,1,3.0,1,-0.4,0\n",
        );
        let ds = load_dataset(f.path(), &schema(&["x1", "x2"], false)).unwrap();
        assert_eq!((ds.m(), ds.n(), ds.d(), ds.p()), (2, 3, 2, 2));
        assert_eq!(ds.incidence()[(1, 0)], -0.4);
    }

    #[test]
    fn bad_status_names_row() {
        let f = write_tmp("subject_id,event_index,gap_time,status\n1,1,2.5,1\n2,1,1.0,2\n");
        let err = load_dataset(f.path(), &schema(&[], false)).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "status");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let f = write_tmp("subject_id,event_index,gap_time,status\n1,1,2.5,1\n");
        let err = load_dataset(f.path(), &schema(&["age"], false)).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn non_numeric_cell_is_parse_error() {
        let f = write_tmp("subject_id,event_index,gap_time,status,x\n1,1,abc,1,0\n");
        let err = load_dataset(f.path(), &schema(&["x"], false)).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }));
    }

    #[test]
    fn duplicate_record_is_integrity_error() {
        let f = write_tmp("subject_id,event_index,gap_time,status\n1,1,2.5,1\n1,1,3.0,0\n");
        let err = load_dataset(f.path(), &schema(&[], false)).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn standardize_uses_population_sd() {
        let f = write_tmp(
            "subject_id,event_index,gap_time,status,x\n1,1,1,1,1\n2,1,1,1,2\n3,1,1,1,3\n",
        );
        let ds = load_dataset(f.path(), &schema(&["x"], true)).unwrap();
        let col: Vec<f64> = ds.incidence().column(0).iter().copied().collect();
        assert!((col[0] + 1.224_744_871).abs() < 1e-8);
        assert!(col[1].abs() < 1e-12);
        assert!((col[2] - 1.224_744_871).abs() < 1e-8);
    }

    #[test]
    fn orders_by_gap_time() {
        let ds = tiny(&[(1, 1, 5.0), (2, 1, 2.0), (3, 1, 9.0)]);
        let v = order_records(&ds);
        assert_eq!(v.perm, vec![1, 0, 2]);
    }

    #[test]
    fn ties_broken_by_subject() {
        // canonical rows are sorted by subject, so check through subject ids
        let ds = tiny(&[(2, 1, 3.0), (1, 1, 3.0)]);
        let v = order_records(&ds);
        let first = ds.rows()[v.perm[0]];
        assert_eq!(first.subject_id, 1);
    }

    #[test]
    fn single_record_identity() {
        let ds = tiny(&[(7, 1, 1.0)]);
        let v = order_records(&ds);
        assert_eq!(v.perm, vec![0]);
        let rs = risk_sets(&v);
        assert_eq!(rs.members(0), 0..1);
    }

    #[test]
    fn risk_set_sizes() {
        let ds = tiny(&[(1, 1, 2.0), (2, 1, 5.0), (3, 1, 9.0)]);
        let rs = risk_sets(&order_records(&ds));
        assert_eq!((rs.size(0), rs.size(1), rs.size(2)), (3, 2, 1));
    }

    #[test]
    fn tied_times_share_risk_set() {
        let ds = tiny(&[(1, 1, 2.0), (2, 1, 2.0)]);
        let rs = risk_sets(&order_records(&ds));
        assert_eq!(rs.members(0), 0..2);
        assert_eq!(rs.members(1), 0..2);
        assert_eq!(rs.group_end(0), 1);
    }

    #[test]
    fn design_r_has_one_entry_per_row() {
        let ds = tiny(&[(1, 1, 2.0), (1, 2, 1.0), (2, 1, 4.0)]);
        let v = order_records(&ds);
        for s in [CovStructure::Constant, CovStructure::Ar1] {
            let r = v.design_r(s);
            for row in r.row_iter() {
                assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
                assert_eq!(row.sum(), 1.0);
            }
        }
    }

    #[test]
    fn key_values_parse() {
        let kv = parse_key_values("# c\nincidence_covariates = a, b\n\nlatency_covariates=b\nstandardize = true\n").unwrap();
        let s = Schema::from_pairs(&kv).unwrap();
        assert_eq!(s.incidence_covariates, vec!["a", "b"]);
        assert_eq!(s.latency_covariates, vec!["b"]);
        assert!(s.standardize);
        assert!(parse_key_values("novalue\n").is_err());
    }
}

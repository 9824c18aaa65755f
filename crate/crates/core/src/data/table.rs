use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::schema::{ColumnKind, Schema};
use crate::error::{Error, Result};

/// `None` is a missing cell.
pub type Cell = Option<f64>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SourceTag {
    Cleveland,
    UciSite(String),
    Integrated,
}

impl SourceTag {
    /// Site label for rows loaded under this tag.
    pub fn site_name(&self) -> Option<&str> {
        match self {
            SourceTag::Cleveland => Some("cleveland"),
            SourceTag::UciSite(name) => Some(name),
            SourceTag::Integrated => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub cells: Vec<Cell>,
    /// Originating site, kept through concatenation for by-site partitioning.
    pub site: Option<String>,
}

impl Record {
    fn key(&self) -> Vec<Option<u64>> {
        self.cells.iter().map(|c| c.map(f64::to_bits)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordTable {
    pub schema: Schema,
    pub rows: Vec<Record>,
    pub source: SourceTag,
}

impl RecordTable {
    pub fn new(schema: Schema, rows: Vec<Record>, source: SourceTag) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.cells.len() != schema.len() {
                return Err(Error::Validation(format!(
                    "row {i} has {} cells, schema has {}",
                    r.cells.len(),
                    schema.len()
                )));
            }
            if r.cells.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("row {i} has a non-finite cell")));
            }
        }
        Ok(Self {
            schema,
            rows,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn target(&self, row: usize) -> Cell {
        self.rows[row].cells[self.schema.target_index()]
    }

    pub fn count_missing_rows(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.cells.iter().any(Option::is_none))
            .count()
    }

    /// Sub-table with the given rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            source: self.source.clone(),
        }
    }

    /// Binary class of each row. Errors if a target is missing or not in {0, 1}.
    pub fn binary_labels(&self) -> Result<Vec<u8>> {
        (0..self.len())
            .map(|i| match self.target(i) {
                Some(0.0) => Ok(0),
                Some(1.0) => Ok(1),
                other => Err(Error::Validation(format!(
                    "row {i}: target {other:?} is not binary (binarize first)"
                ))),
            })
            .collect()
    }
}

/// Reads a processed UCI-style file: comma-separated, no quoting, one record per line.
/// A first line equal to the schema's column names is treated as a header.
pub fn load_csv(path: &Path, schema: &Schema, source: SourceTag) -> Result<RecordTable> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, path, schema, source)
}

pub fn parse_csv(
    text: &str,
    path: &Path,
    schema: &Schema,
    source: SourceTag,
) -> Result<RecordTable> {
    let header = schema.names().join(",");
    let site = source.site_name().map(str::to_string);
    let mut rows = Vec::new();
    let mut first = true;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if std::mem::take(&mut first) && line == header {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != schema.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected {} fields, found {}", schema.len(), fields.len()),
            });
        }
        let mut cells = Vec::with_capacity(fields.len());
        for (field, col) in fields.iter().zip(schema.columns()) {
            let field = field.trim();
            if field == col.missing_marker {
                cells.push(None);
                continue;
            }
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => cells.push(Some(v)),
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        message: format!(
                            "column `{}`: cannot parse `{field}` as a number",
                            col.name
                        ),
                    })
                }
            }
        }
        rows.push(Record {
            cells,
            site: site.clone(),
        });
    }
    RecordTable::new(schema.clone(), rows, source)
}

/// Canonical CSV: header row, `?` for missing cells.
pub fn to_csv_string(table: &RecordTable) -> String {
    let mut out = table.schema.names().join(",");
    out.push('\n');
    for r in &table.rows {
        for (i, c) in r.cells.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            match c {
                Some(v) => write!(out, "{v}").unwrap(),
                None => out.push_str(&table.schema.columns()[i].missing_marker),
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(table: &RecordTable, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(table))?;
    Ok(())
}

/// Maps the target to {0, 1}: zero stays zero, any positive integer becomes one.
pub fn binarize_target(table: &RecordTable) -> Result<RecordTable> {
    let t = table.schema.target_index();
    let mut out = table.clone();
    for (i, r) in out.rows.iter_mut().enumerate() {
        match r.cells[t] {
            Some(v) if v < 0.0 || v.fract() != 0.0 => {
                return Err(Error::Validation(format!(
                    "row {i}: target value {v} is not a non-negative integer"
                )))
            }
            Some(v) => r.cells[t] = Some(if v >= 1.0 { 1.0 } else { 0.0 }),
            None => {
                return Err(Error::Validation(format!(
                    "row {i}: target value is missing"
                )));
            }
        }
    }
    Ok(out)
}

/// Per-column fill values learned from a reference (training) table.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputeStats {
    fills: Vec<f64>,
}

impl ImputeStats {
    /// Median for numeric columns, mode (smallest on ties) for everything else.
    pub fn fit(table: &RecordTable) -> Result<Self> {
        let mut fills = Vec::with_capacity(table.schema.len());
        for (c, col) in table.schema.columns().iter().enumerate() {
            let mut present: Vec<f64> = table.rows.iter().filter_map(|r| r.cells[c]).collect();
            if present.is_empty() {
                return Err(Error::Validation(format!(
                    "column `{}` is entirely missing in the reference table",
                    col.name
                )));
            }
            let fill = match col.kind {
                ColumnKind::Numeric => median(&mut present),
                _ => mode(&present),
            };
            fills.push(fill);
        }
        Ok(Self { fills })
    }

    pub fn apply(&self, table: &RecordTable) -> Result<RecordTable> {
        if self.fills.len() != table.schema.len() {
            return Err(Error::Shape(format!(
                "imputer fitted on {} columns, table has {}",
                self.fills.len(),
                table.schema.len()
            )));
        }
        let t = table.schema.target_index();
        let mut out = table.clone();
        for (i, r) in out.rows.iter_mut().enumerate() {
            for (c, cell) in r.cells.iter_mut().enumerate() {
                if cell.is_none() {
                    if c == t {
                        return Err(Error::Validation(format!(
                            "row {i}: target value is missing"
                        )));
                    }
                    *cell = Some(self.fills[c]);
                }
            }
        }
        Ok(out)
    }
}

/// Fills missing cells of `table` with statistics computed on `stats_from`.
pub fn impute_missing(table: &RecordTable, stats_from: &RecordTable) -> Result<RecordTable> {
    if table.schema != stats_from.schema {
        return Err(Error::SchemaMismatch(table.schema.diff(&stats_from.schema)));
    }
    ImputeStats::fit(stats_from)?.apply(table)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn mode(values: &[f64]) -> f64 {
    let mut counts: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for &v in values {
        counts.entry(ordered_bits(v)).or_insert((v, 0)).1 += 1;
    }
    // BTreeMap iterates in ascending value order, so `>` keeps the smallest on ties.
    let mut best = (f64::NAN, 0);
    for &(v, n) in counts.values() {
        if n > best.1 {
            best = (v, n);
        }
    }
    best.0
}

/// Bit pattern whose unsigned order matches the numeric order of finite floats.
fn ordered_bits(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Concatenates tables and drops exact duplicate rows (first occurrence wins).
pub fn integrate(tables: &[RecordTable]) -> Result<RecordTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Validation("integrate needs at least one table".into()))?;
    let mut divergent: Vec<String> = Vec::new();
    for t in &tables[1..] {
        for name in first.schema.diff(&t.schema) {
            if !divergent.contains(&name) {
                divergent.push(name);
            }
        }
    }
    if !divergent.is_empty() {
        return Err(Error::SchemaMismatch(divergent));
    }
    let mut seen = HashSet::new();
    let rows = tables
        .iter()
        .flat_map(|t| t.rows.iter())
        .filter(|r| seen.insert(r.key()))
        .cloned()
        .collect();
    RecordTable::new(first.schema.clone(), rows, SourceTag::Integrated)
}

/// Plain concatenation of site tables, keeping per-row site labels.
pub fn concat_sites(tables: &[RecordTable]) -> Result<RecordTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Validation("need at least one table".into()))?;
    for t in &tables[1..] {
        let d = first.schema.diff(&t.schema);
        if !d.is_empty() {
            return Err(Error::SchemaMismatch(d));
        }
    }
    let rows = tables.iter().flat_map(|t| t.rows.iter().cloned()).collect();
    let source = if tables.len() == 1 {
        first.source.clone()
    } else {
        SourceTag::UciSite("combined".into())
    };
    RecordTable::new(first.schema.clone(), rows, source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::ColumnSchema;

    fn tiny_schema() -> Schema {
        Schema::new(vec![
            ColumnSchema::new("x", ColumnKind::Numeric),
            ColumnSchema::new("c", ColumnKind::Categorical(vec![1.0, 2.0, 3.0])),
            ColumnSchema::new("y", ColumnKind::Target),
        ])
        .unwrap()
    }

    fn parse(text: &str) -> Result<RecordTable> {
        parse_csv(text, Path::new("mem"), &tiny_schema(), SourceTag::Cleveland)
    }

    #[test]
    fn parses_missing_markers() {
        let t = parse("1,2,0\n?,3,1\n\n4,?,2\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.rows[1].cells[0], None);
        assert_eq!(t.count_missing_rows(), 2);
    }

    #[test]
    fn empty_file_is_empty_table() {
        assert_eq!(parse("").unwrap().len(), 0);
    }

    #[test]
    fn bad_field_count_names_line() {
        match parse("1,2,0\n1,2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_number_names_column() {
        let err = parse("1,abc,0\n").unwrap_err().to_string();
        assert!(err.contains("`c`"), "{err}");
    }

    #[test]
    fn header_is_skipped_and_round_trips() {
        let t = parse("1.5,2,0\n?,3,1\n").unwrap();
        let text = to_csv_string(&t);
        assert!(text.starts_with("x,c,y\n"));
        assert_eq!(parse(&text).unwrap(), t);
    }

    #[test]
    fn binarize_examples() {
        let t = parse("0,1,0\n0,1,1\n0,1,2\n0,1,4\n0,1,0\n").unwrap();
        let b = binarize_target(&t).unwrap();
        let ys: Vec<_> = (0..b.len()).map(|i| b.target(i).unwrap()).collect();
        assert_eq!(ys, vec![0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(
            binarize_target(&parse("0,1,3\n").unwrap())
                .unwrap()
                .target(0),
            Some(1.0)
        );
        assert!(binarize_target(&parse("0,1,-1\n").unwrap()).is_err());
    }

    #[test]
    fn impute_median_and_mode() {
        let train = parse("1,3,0\n2,3,1\n9,1,0\n").unwrap();
        let test = parse("?,?,1\n").unwrap();
        let out = impute_missing(&test, &train).unwrap();
        assert_eq!(out.rows[0].cells, vec![Some(2.0), Some(3.0), Some(1.0)]);
        // nothing to fill
        assert_eq!(impute_missing(&train, &train).unwrap(), train);
        let even = parse("1,1,0\n4,2,1\n").unwrap();
        let out = impute_missing(&test, &even).unwrap();
        assert_eq!(out.rows[0].cells[0], Some(2.5));
        assert_eq!(out.rows[0].cells[1], Some(1.0));
    }

    #[test]
    fn impute_fails_on_all_missing_column() {
        let train = parse("?,3,0\n?,3,1\n").unwrap();
        assert!(impute_missing(&train, &train).is_err());
    }

    #[test]
    fn integrate_dedups_and_is_idempotent() {
        let a = parse("1,1,0\n2,2,1\n1,1,0\n").unwrap();
        let b = parse("2,2,1\n3,3,1\n").unwrap();
        let one = integrate(std::slice::from_ref(&a)).unwrap();
        assert_eq!(one.len(), 2);
        let both = integrate(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(both.len(), 3);
        assert_eq!(both.source, SourceTag::Integrated);
        assert_eq!(integrate(std::slice::from_ref(&both)).unwrap(), both);
    }

    #[test]
    fn integrate_reports_divergent_columns() {
        let a = parse("1,1,0\n").unwrap();
        let other = Schema::new(vec![
            ColumnSchema::new("x", ColumnKind::Numeric),
            ColumnSchema::new("d", ColumnKind::Numeric),
            ColumnSchema::new("y", ColumnKind::Target),
        ])
        .unwrap();
        let b = parse_csv("1,1,0\n", Path::new("mem"), &other, SourceTag::Cleveland).unwrap();
        match integrate(&[a, b]) {
            Err(Error::SchemaMismatch(cols)) => assert_eq!(cols, vec!["c".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}

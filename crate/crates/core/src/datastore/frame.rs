use std::collections::BTreeSet;
use std::fmt;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::DatastoreError;
use crate::decimal::Decimal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnKind::Numeric => "numeric",
            ColumnKind::Categorical => "categorical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaColumn {
    pub name: String,
    pub kind: ColumnKind,
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// A rectangular table parsed from CSV. Cells keep their original text;
/// numeric columns are additionally available as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableFrame {
    schema: Vec<SchemaColumn>,
    rows: Vec<Vec<String>>,
}

impl TableFrame {
    /// Parses comma-separated text with a header line. A column is numeric
    /// iff every non-empty cell parses as a finite number; a numeric column
    /// with an empty cell is rejected.
    pub fn parse_csv(raw: &[u8]) -> Result<Self, DatastoreError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(raw);
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| DatastoreError::Csv(e.to_string()))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if header.is_empty() || header.iter().all(String::is_empty) {
            return Err(DatastoreError::Csv("missing header".into()));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| DatastoreError::Csv(e.to_string()))?;
            rows.push(record.iter().map(str::to_string).collect::<Vec<_>>());
        }
        if rows.is_empty() {
            return Err(DatastoreError::Empty);
        }
        let mut schema = Vec::with_capacity(header.len());
        for (c, name) in header.into_iter().enumerate() {
            let mut any_value = false;
            let mut numeric = true;
            let mut first_blank = None;
            for (r, row) in rows.iter().enumerate() {
                let cell = row[c].trim();
                if cell.is_empty() {
                    first_blank.get_or_insert(r);
                } else {
                    any_value = true;
                    numeric &= parse_number(cell).is_some();
                }
            }
            let numeric = numeric && any_value;
            if let (true, Some(row)) = (numeric, first_blank) {
                return Err(DatastoreError::MissingNumeric { column: name, row });
            }
            let kind = if numeric {
                ColumnKind::Numeric
            } else {
                ColumnKind::Categorical
            };
            schema.push(SchemaColumn { name, kind });
        }
        Ok(Self { schema, rows })
    }

    pub fn schema(&self) -> &[SchemaColumn] {
        &self.schema
    }

    pub fn columns(&self) -> impl Iterator<Item = &str> {
        self.schema.iter().map(|c| c.name.as_str())
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn column_count(&self) -> usize {
        self.schema.len()
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn column_index(&self, name: &str) -> Result<usize, DatastoreError> {
        self.schema
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| DatastoreError::UnknownColumn(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Result<ColumnKind, DatastoreError> {
        Ok(self.schema[self.column_index(name)?].kind)
    }

    pub fn numeric_columns(&self) -> Vec<&str> {
        self.schema
            .iter()
            .filter(|c| c.kind == ColumnKind::Numeric)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>, DatastoreError> {
        let c = self.column_index(name)?;
        if self.schema[c].kind != ColumnKind::Numeric {
            return Err(DatastoreError::NotNumeric(name.to_string()));
        }
        Ok(self
            .rows
            .iter()
            .map(|r| parse_number(&r[c]).expect("numeric column cells parse"))
            .collect())
    }

    pub fn cell(&self, row: usize, column: &str) -> Result<&str, DatastoreError> {
        let c = self.column_index(column)?;
        self.rows
            .get(row)
            .map(|r| r[c].as_str())
            .ok_or(DatastoreError::RowOutOfRange {
                row,
                rows: self.rows.len(),
            })
    }

    fn with_rows(&self, rows: Vec<Vec<String>>) -> Self {
        Self {
            schema: self.schema.clone(),
            rows,
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        self.with_rows(self.rows[start..end].to_vec())
    }

    /// Distinct values of a column in lexicographic order.
    pub fn distinct_values(&self, attrib: &str) -> Result<Vec<String>, DatastoreError> {
        let c = self.column_index(attrib)?;
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r[c].as_str()).collect();
        Ok(set.into_iter().map(str::to_string).collect())
    }

    /// Rows whose `attrib` equals `value`, original order preserved.
    pub fn split_by_attribute(&self, attrib: &str, value: &str) -> Result<Self, DatastoreError> {
        let c = self.column_index(attrib)?;
        Ok(self.with_rows(self.rows.iter().filter(|r| r[c] == value).cloned().collect()))
    }

    /// Split on the `index`-th distinct value of `attrib`.
    pub fn split_by_index(&self, attrib: &str, index: usize) -> Result<Self, DatastoreError> {
        let values = self.distinct_values(attrib)?;
        let value = values.get(index).ok_or(DatastoreError::SplitIndexOutOfRange {
            index,
            distinct: values.len(),
        })?;
        self.split_by_attribute(attrib, value)
    }

    /// Time-ordered prefix of `ceil(fraction * n)` rows and the remaining
    /// suffix.
    pub fn train_validation_split(&self, fraction: f64) -> Result<(Self, Self), DatastoreError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(DatastoreError::InvalidFraction(fraction));
        }
        let n = self.rows.len();
        if n < 2 {
            return Err(DatastoreError::TooFewRows(n));
        }
        let cut = Decimal::from_f64_display(fraction)
            .expect("finite fraction")
            .mul(&Decimal::from_u64(n as u64))
            .ceil_u64()
            .map_or(n - 1, |c| (c as usize).clamp(1, n - 1));
        Ok((self.slice(0, cut), self.slice(cut, n)))
    }

    /// Stable sort on a time column holding numbers, ISO dates
    /// (`yyyy-mm-dd`) or US dates (`m/d/yyyy`).
    pub fn sort_by_time(&mut self, attrib: &str) -> Result<(), DatastoreError> {
        let c = self.column_index(attrib)?;
        let keys = self
            .rows
            .iter()
            .map(|row| {
                time_key(&row[c]).ok_or_else(|| DatastoreError::TimeFormat {
                    column: attrib.to_string(),
                    value: row[c].clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut keyed: Vec<_> = keys.into_iter().zip(self.rows.drain(..)).collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        self.rows = keyed.into_iter().map(|(_, r)| r).collect();
        Ok(())
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.columns()).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

fn time_key(cell: &str) -> Option<f64> {
    let cell = cell.trim();
    if let Some(v) = parse_number(cell) {
        return Some(v);
    }
    ["%Y-%m-%d", "%m/%d/%Y"]
        .iter()
        .find_map(|fmt| NaiveDate::parse_from_str(cell, fmt).ok())
        .map(|d| d.num_days_from_ce() as f64)
}

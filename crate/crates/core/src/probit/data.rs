use std::collections::BTreeMap;

use crate::ingest::{CrashRecord, SeverityClass};

use super::ProbitError;

/// Column-oriented covariates with an ordinal response.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    y: Vec<SeverityClass>,
}

impl Dataset {
    pub fn new(
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        y: Vec<SeverityClass>,
    ) -> Result<Self, ProbitError> {
        if names.len() != columns.len() {
            return Err(ProbitError::Data(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != y.len() {
                return Err(ProbitError::Data(format!(
                    "column {name} has {} values, response has {}",
                    col.len(),
                    y.len()
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(ProbitError::Data(format!("column {name} has non-finite values")));
            }
        }
        let mut sorted = names.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(ProbitError::Data(format!("duplicate column {}", w[0])));
        }
        Ok(Dataset { names, columns, y })
    }

    /// Build from crash records, one column per named indicator.
    pub fn from_records(records: &[CrashRecord], names: &[String]) -> Self {
        let columns = names
            .iter()
            .map(|n| records.iter().map(|r| f64::from(r.covariate(n))).collect())
            .collect();
        Dataset {
            names: names.to_vec(),
            columns,
            y: records.iter().map(CrashRecord::severity).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn response(&self) -> &[SeverityClass] {
        &self.y
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    /// Copy with `name` set to `value` for every observation (added if absent).
    pub fn with_constant_column(&self, name: &str, value: f64) -> Dataset {
        let mut out = self.clone();
        let col = vec![value; self.len()];
        match out.names.iter().position(|n| n == name) {
            Some(i) => out.columns[i] = col,
            None => {
                out.names.push(name.to_string());
                out.columns.push(col);
            }
        }
        out
    }

    /// Observations per severity class.
    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for y in &self.y {
            c[y.index()] += 1;
        }
        c
    }

    /// Row subset in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Stack datasets over the union of their columns; columns absent from
    /// a part are filled with 0.
    pub fn concat(parts: &[&Dataset]) -> Dataset {
        let mut names: Vec<String> = parts.iter().flat_map(|d| d.names.iter().cloned()).collect();
        names.sort();
        names.dedup();
        let mut columns: BTreeMap<&str, Vec<f64>> = names.iter().map(|n| (n.as_str(), Vec::new())).collect();
        let mut y = Vec::new();
        for d in parts {
            for (name, col) in columns.iter_mut() {
                match d.column(name) {
                    Some(src) => col.extend_from_slice(src),
                    None => col.extend(std::iter::repeat_n(0.0, d.len())),
                }
            }
            y.extend_from_slice(&d.y);
        }
        let columns = names.iter().map(|n| columns.remove(n.as_str()).unwrap()).collect();
        Dataset { names, columns, y }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(names: &[&str], cols: Vec<Vec<f64>>, y: &[u8]) -> Dataset {
        Dataset::new(
            names.iter().map(|s| s.to_string()).collect(),
            cols,
            y.iter().map(|&v| SeverityClass::new(v).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn validation() {
        assert!(Dataset::new(vec!["a".into()], vec![vec![1.0]], vec![]).is_err());
        assert!(Dataset::new(vec!["a".into(), "a".into()], vec![vec![], vec![]], vec![]).is_err());
    }

    #[test]
    fn concat_fills_missing_with_zero() {
        let a = ds(&["x"], vec![vec![1.0, 1.0]], &[0, 2]);
        let b = ds(&["z"], vec![vec![1.0]], &[1]);
        let c = Dataset::concat(&[&a, &b]);
        assert_eq!(c.names(), &["x".to_string(), "z".to_string()]);
        assert_eq!(c.column("x").unwrap(), &[1.0, 1.0, 0.0]);
        assert_eq!(c.column("z").unwrap(), &[0.0, 0.0, 1.0]);
        assert_eq!(c.class_counts(), [1, 1, 1]);
    }
}

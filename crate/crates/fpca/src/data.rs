//! Sparse longitudinal datasets and their CSV form.
//!
//! The on-disk format is a plain three-column CSV with the exact header
//! `subject_id,t,y`, one measurement per row, rows of one subject grouped in
//! order of first appearance. Observation times are rescaled to [0, 1] at
//! load time when they are not already inside the unit interval; the affine
//! map is recorded so reports can state it.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// One subject's measurements at irregular times.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    id: String,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl Subject {
    pub fn new(id: String, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Empty(format!("subject {id} has no measurements")));
        }
        if times.len() != values.len() {
            return Err(Error::Dimension(format!(
                "subject {id}: {} times vs {} values",
                times.len(),
                values.len()
            )));
        }
        if !times.iter().chain(values.iter()).all(|v| v.is_finite()) {
            return Err(Error::Domain(format!(
                "subject {id} has non-finite measurements"
            )));
        }
        Ok(Self { id, times, values })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// A collection of subjects with observation times in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    subjects: Vec<Subject>,
    /// Original (min, max) mapped onto [0, 1]; (0, 1) when untouched.
    time_range: (f64, f64),
}

impl SparseDataset {
    /// Wraps subjects whose times already live in [0, 1].
    pub fn from_subjects(subjects: Vec<Subject>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Empty("dataset has no subjects".into()));
        }
        for s in &subjects {
            if let Some(t) = s.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Error::Domain(format!(
                    "subject {}: time {t} outside [0, 1]",
                    s.id
                )));
            }
        }
        Ok(Self {
            subjects,
            time_range: (0.0, 1.0),
        })
    }

    /// Groups flat (id, t, y) rows by subject in order of first appearance
    /// and rescales times onto [0, 1] if any lie outside.
    pub fn from_observations(rows: Vec<(String, f64, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("dataset has no observations".into()));
        }
        for (id, t, y) in &rows {
            if !t.is_finite() || !y.is_finite() {
                return Err(Error::Domain(format!(
                    "subject {id} has non-finite measurements"
                )));
            }
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for (_, t, _) in &rows {
            min = min.min(*t);
            max = max.max(*t);
        }
        let in_unit = min >= 0.0 && max <= 1.0;
        let time_range = if in_unit { (0.0, 1.0) } else { (min, max) };
        if !in_unit && max == min {
            return Err(Error::Domain(format!(
                "all observations share the time {min}; cannot rescale"
            )));
        }

        let mut order: Vec<String> = Vec::new();
        let mut grouped: std::collections::HashMap<String, (Vec<f64>, Vec<f64>)> =
            std::collections::HashMap::new();
        for (id, t, y) in rows {
            let t = if in_unit { t } else { (t - min) / (max - min) };
            let entry = grouped.entry(id.clone()).or_insert_with(|| {
                order.push(id);
                (Vec::new(), Vec::new())
            });
            entry.0.push(t);
            entry.1.push(y);
        }
        let subjects = order
            .into_iter()
            .map(|id| {
                let (times, values) = grouped.remove(&id).expect("grouped by construction");
                Subject::new(id, times, values)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            subjects,
            time_range,
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    /// The original time interval that was mapped onto [0, 1].
    pub fn time_range(&self) -> (f64, f64) {
        self.time_range
    }

    /// All (t, y) pairs pooled across subjects, in dataset order.
    pub fn pooled(&self) -> Vec<(f64, f64)> {
        self.subjects
            .iter()
            .flat_map(|s| s.times.iter().copied().zip(s.values.iter().copied()))
            .collect()
    }

    /// Subtracts `mean(t)` from every measurement.
    pub fn centered_by(&self, mean: impl Fn(f64) -> f64) -> Self {
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                id: s.id.clone(),
                times: s.times.clone(),
                values: s
                    .times
                    .iter()
                    .zip(&s.values)
                    .map(|(&t, &y)| y - mean(t))
                    .collect(),
            })
            .collect();
        Self {
            subjects,
            time_range: self.time_range,
        }
    }
}

const HEADER: &str = "subject_id,t,y";

/// Reads a dataset from a `subject_id,t,y` CSV file.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SparseDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

/// Parses CSV text in the dataset format.
pub fn parse_csv(text: &str) -> Result<SparseDataset> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Empty("file is empty".into()));
    };
    if header.trim_start_matches('\u{feff}').trim() != HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{HEADER}`, found `{}`", header.trim()),
        });
    }
    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty subject id".into(),
            });
        }
        let t: f64 = fields[1].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid time `{}`", fields[1].trim()),
        })?;
        let y: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid value `{}`", fields[2].trim()),
        })?;
        if !t.is_finite() || !y.is_finite() {
            return Err(Error::Parse {
                line,
                message: "non-finite measurement".into(),
            });
        }
        rows.push((id.to_string(), t, y));
    }
    if rows.is_empty() {
        return Err(Error::Empty("file has a header but no data rows".into()));
    }
    SparseDataset::from_observations(rows)
}

/// Serializes a dataset; floats keep full round-trip precision.
pub fn to_csv(data: &SparseDataset) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for s in data.subjects() {
        for (t, y) in s.times().iter().zip(s.values()) {
            let _ = writeln!(out, "{},{t},{y}", s.id());
        }
    }
    out
}

/// Writes a dataset to a CSV file.
pub fn save_csv(data: &SparseDataset, path: impl AsRef<Path>) -> Result<()> {
    for s in data.subjects() {
        if s.id().contains(',') || s.id().contains('\n') {
            return Err(Error::Domain(format!(
                "subject id `{}` cannot be written to CSV",
                s.id()
            )));
        }
    }
    std::fs::write(path, to_csv(data))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_rows_by_first_appearance() {
        let rows = vec![
            ("b".to_string(), 0.1, 1.0),
            ("a".to_string(), 0.2, 2.0),
            ("b".to_string(), 0.3, 3.0),
        ];
        let data = SparseDataset::from_observations(rows).unwrap();
        assert_eq!(data.num_subjects(), 2);
        assert_eq!(data.subjects()[0].id(), "b");
        assert_eq!(data.subjects()[0].times(), &[0.1, 0.3]);
        assert_eq!(data.subjects()[1].id(), "a");
        assert_eq!(data.time_range(), (0.0, 1.0));
    }

    #[test]
    fn times_already_in_unit_interval_are_untouched() {
        let rows = vec![
            ("a".to_string(), 0.25, 1.0),
            ("a".to_string(), 0.75, 2.0),
        ];
        let data = SparseDataset::from_observations(rows).unwrap();
        assert_eq!(data.subjects()[0].times(), &[0.25, 0.75]);
        assert_eq!(data.time_range(), (0.0, 1.0));
    }

    #[test]
    fn out_of_range_times_are_rescaled_affinely() {
        let rows = vec![
            ("a".to_string(), 10.0, 1.0),
            ("a".to_string(), 20.0, 2.0),
            ("a".to_string(), 15.0, 3.0),
        ];
        let data = SparseDataset::from_observations(rows).unwrap();
        assert_eq!(data.subjects()[0].times(), &[0.0, 1.0, 0.5]);
        assert_eq!(data.time_range(), (10.0, 20.0));
    }

    #[test]
    fn parse_rejects_bad_header_and_rows() {
        assert!(matches!(
            parse_csv("id,t,y\na,0.1,1.0\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_csv("subject_id,t,y\na,0.1\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_csv("subject_id,t,y\na,0.1,1.0\na,zzz,2.0\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse_csv("subject_id,t,y\na,0.1,nan\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(parse_csv("subject_id,t,y\n"), Err(Error::Empty(_))));
        assert!(matches!(parse_csv(""), Err(Error::Empty(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            ("a".to_string(), 0.1, 1.0 / 3.0),
            ("a".to_string(), 0.7, -2.5e-13),
            ("b".to_string(), 1.0 / 7.0, 4.0e17),
        ];
        let data = SparseDataset::from_observations(rows).unwrap();
        let text = to_csv(&data);
        let reloaded = parse_csv(&text).unwrap();
        assert_eq!(data, reloaded);
        assert_eq!(text, to_csv(&reloaded));
    }

    #[test]
    fn centered_by_subtracts_mean_function() {
        let rows = vec![("a".to_string(), 0.5, 3.0)];
        let data = SparseDataset::from_observations(rows).unwrap();
        let centered = data.centered_by(|t| 2.0 * t);
        assert_eq!(centered.subjects()[0].values(), &[2.0]);
    }

    #[test]
    fn degenerate_time_range_is_rejected() {
        let rows = vec![
            ("a".to_string(), 5.0, 1.0),
            ("b".to_string(), 5.0, 2.0),
        ];
        assert!(matches!(
            SparseDataset::from_observations(rows),
            Err(Error::Domain(_))
        ));
    }
}

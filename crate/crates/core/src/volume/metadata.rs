use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Result, VolumeError};

const COLUMNS: [&str; 4] = ["subject_id", "age", "survival_days", "extent_of_resection"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Resection {
    /// Gross total resection.
    #[serde(rename = "GTR")]
    Gtr,
    /// Subtotal resection.
    #[serde(rename = "STR")]
    Str,
    #[serde(rename = "NA")]
    Na,
}

impl FromStr for Resection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GTR" => Ok(Self::Gtr),
            "STR" => Ok(Self::Str),
            "NA" => Ok(Self::Na),
            _ => Err(format!(
                "extent_of_resection `{s}` is not one of GTR, STR, NA"
            )),
        }
    }
}

impl fmt::Display for Resection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gtr => "GTR",
            Self::Str => "STR",
            Self::Na => "NA",
        })
    }
}

/// One row of the clinical metadata table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub age: f32,
    pub survival_days: Option<u32>,
    pub resection: Resection,
}

fn row_err(line: u64, reason: impl Into<String>) -> VolumeError {
    VolumeError::Row {
        line,
        reason: reason.into(),
    }
}

/// Strict reader for `subject_id,age,survival_days,extent_of_resection`.
pub fn read_metadata_csv(path: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| VolumeError::io(path, e))?;
    parse_metadata(file)
}

pub(crate) fn parse_metadata(input: impl std::io::Read) -> Result<Vec<SubjectRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| row_err(1, e.to_string()))?
        .clone();
    let mut column = [0usize; 4];
    for (slot, name) in column.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| row_err(1, format!("missing column `{name}`")))?;
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            row_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| row.get(column[i]).unwrap_or("");

        let subject_id = field(0).to_string();
        if subject_id.is_empty() {
            return Err(row_err(line, "empty subject_id"));
        }
        let age: f32 = field(1)
            .parse()
            .map_err(|_| row_err(line, format!("age `{}` is not a number", field(1))))?;
        if !(age.is_finite() && age > 0.0) {
            return Err(row_err(line, format!("age {age} must be positive")));
        }
        let survival_days = match field(2) {
            "" => None,
            raw => {
                let days: i64 = raw.parse().map_err(|_| {
                    row_err(line, format!("survival_days `{raw}` is not an integer"))
                })?;
                if days < 0 {
                    return Err(row_err(line, format!("negative survival_days {days}")));
                }
                Some(u32::try_from(days).map_err(|_| row_err(line, "survival_days out of range"))?)
            }
        };
        let resection = field(3).parse().map_err(|e: String| row_err(line, e))?;
        if !seen.insert(subject_id.clone()) {
            return Err(row_err(
                line,
                format!("duplicate subject_id `{subject_id}`"),
            ));
        }
        records.push(SubjectRecord {
            subject_id,
            age,
            survival_days,
            resection,
        });
    }
    Ok(records)
}

pub fn write_metadata_csv(records: &[SubjectRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| VolumeError::io(path, std::io::Error::other(e));
    let mut writer = csv::Writer::from_path(path).map_err(io)?;
    writer.write_record(COLUMNS).map_err(io)?;
    for r in records {
        let days = r.survival_days.map(|d| d.to_string()).unwrap_or_default();
        writer
            .write_record([
                r.subject_id.as_str(),
                &r.age.to_string(),
                &days,
                &r.resection.to_string(),
            ])
            .map_err(io)?;
    }
    writer.flush().map_err(|e| VolumeError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "subject_id,age,survival_days,extent_of_resection\n";

    fn parse(body: &str) -> Result<Vec<SubjectRecord>> {
        parse_metadata(format!("{HEADER}{body}").as_bytes())
    }

    #[test]
    fn parses_full_and_optional_rows() {
        let rows = parse("s1,63.2,400,GTR\ns2,70.0,,NA\ns4,51,12,str\n").unwrap();
        assert_eq!(
            rows[0],
            SubjectRecord {
                subject_id: "s1".into(),
                age: 63.2,
                survival_days: Some(400),
                resection: Resection::Gtr,
            }
        );
        assert_eq!(rows[1].survival_days, None);
        assert_eq!(rows[1].resection, Resection::Na);
        assert_eq!(rows[2].resection, Resection::Str);
    }

    #[test]
    fn bad_age_reports_line_number() {
        match parse("s1,63.2,400,GTR\ns2,70.0,,NA\ns3,abc,100,GTR\n") {
            Err(VolumeError::Row { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn strictness() {
        assert!(matches!(
            parse("s1,60,-5,GTR\n"),
            Err(VolumeError::Row { line: 2, .. })
        ));
        assert!(matches!(
            parse("s1,60,5,GTR\ns1,61,6,GTR\n"),
            Err(VolumeError::Row { line: 3, .. })
        ));
        assert!(matches!(
            parse("s1,60,5,partial\n"),
            Err(VolumeError::Row { .. })
        ));
        assert!(matches!(
            parse("s1,0,5,GTR\n"),
            Err(VolumeError::Row { .. })
        ));
        assert!(matches!(
            parse("s1,60,5.5,GTR\n"),
            Err(VolumeError::Row { .. })
        ));
        let missing = parse_metadata("subject_id,age,extent_of_resection\ns1,60,GTR\n".as_bytes());
        assert!(matches!(missing, Err(VolumeError::Row { line: 1, .. })));
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.csv");
        let rows = parse("a,40.5,10,GTR\nb,77,,STR\n").unwrap();
        write_metadata_csv(&rows, &path).unwrap();
        assert_eq!(read_metadata_csv(&path).unwrap(), rows);
    }
}

//! Interval label tables (CSV with a header row).

use serde::{Deserialize, Serialize};

use super::{DataError, IntervalLabels};

/// Maps the label fields onto CSV column names. Defaults follow the global
/// 12SL feature columns of the public interval feature tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub record_id: String,
    pub patient_id: Option<String>,
    pub pr: String,
    pub qrs: String,
    pub qt: String,
    pub hr: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            record_id: "ecg_id".into(),
            patient_id: None,
            pr: "PR_Int_Global".into(),
            qrs: "QRS_Dur_Global".into(),
            qt: "QT_Int_Global".into(),
            hr: "HR__Global".into(),
        }
    }
}

impl ColumnMap {
    /// Column names written by the synthetic corpus generator.
    pub fn synthetic() -> Self {
        Self {
            record_id: "record_id".into(),
            patient_id: Some("patient_id".into()),
            pr: "pr_ms".into(),
            qrs: "qrs_ms".into(),
            qt: "qt_ms".into(),
            hr: "hr_bpm".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRow {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub record_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub record_id: String,
    pub patient_id: Option<String>,
    pub labels: IntervalLabels,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelTable {
    pub rows: Vec<LabeledRow>,
    pub skipped: Vec<SkippedRow>,
}

pub fn parse_label_table(csv_bytes: &[u8], columns: &ColumnMap) -> Result<LabelTable, DataError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(csv_bytes);
    let headers = reader.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(DataError::EmptyTable);
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let id_col = find(&columns.record_id)?;
    let patient_col = columns.patient_id.as_deref().map(find).transpose()?;
    let fields = [
        ("PR", find(&columns.pr)?),
        ("QRS", find(&columns.qrs)?),
        ("QT", find(&columns.qt)?),
        ("HR", find(&columns.hr)?),
    ];

    let mut table = LabelTable::default();
    let mut any = false;
    for (i, rec) in reader.records().enumerate() {
        any = true;
        let row = i + 1;
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        let record_id = rec.get(id_col).filter(|s| !s.is_empty()).map(str::to_string);
        let skip = |reason: String, table: &mut LabelTable| {
            table.skipped.push(SkippedRow { row, record_id: record_id.clone(), reason });
        };
        let Some(id) = record_id.clone() else {
            skip("missing record id".into(), &mut table);
            continue;
        };
        let mut values = [0.0f64; 4];
        let mut reason = None;
        for (slot, (name, col)) in values.iter_mut().zip(fields) {
            match rec.get(col).map(str::trim) {
                None | Some("") => {
                    reason = Some(format!("missing {name}"));
                    break;
                }
                Some(s) => match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => *slot = v,
                    _ => {
                        reason = Some(format!("non-numeric {name}"));
                        break;
                    }
                },
            }
        }
        if let Some(r) = reason {
            skip(r, &mut table);
            continue;
        }
        match IntervalLabels::new(values[0], values[1], values[2], values[3]) {
            Ok(labels) => table.rows.push(LabeledRow {
                record_id: id,
                patient_id: patient_col.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()).map(str::to_string),
                labels,
            }),
            Err(e) => skip(e.to_string(), &mut table),
        }
    }
    if !any {
        return Err(DataError::EmptyTable);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols() -> ColumnMap {
        ColumnMap::synthetic()
    }

    #[test]
    fn parses_rows_and_presence() {
        let csv = "record_id,patient_id,pr_ms,qrs_ms,qt_ms,hr_bpm\n\
                   a,p1,160,96,400,73\n\
                   b,p2,0,90,380,110\n";
        let t = parse_label_table(csv.as_bytes(), &cols()).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows[0].labels.pr_present);
        assert_eq!(t.rows[0].labels.qt_ms, 400.0);
        assert_eq!(t.rows[0].patient_id.as_deref(), Some("p1"));
        assert!(!t.rows[1].labels.pr_present);
        assert!(t.skipped.is_empty());
    }

    #[test]
    fn skip_reasons() {
        let csv = "record_id,patient_id,pr_ms,qrs_ms,qt_ms,hr_bpm\n\
                   a,p1,160,96,NaN,73\n\
                   b,p1,,96,400,73\n\
                   c,p1,160,96,abc,73\n\
                   d,p1,160,96,90,73\n";
        let t = parse_label_table(csv.as_bytes(), &cols()).unwrap();
        assert!(t.rows.is_empty());
        let reasons: Vec<&str> = t.skipped.iter().map(|s| s.reason.as_str()).collect();
        assert_eq!(reasons[0], "non-numeric QT");
        assert_eq!(reasons[1], "missing PR");
        assert_eq!(reasons[2], "non-numeric QT");
        assert!(reasons[3].contains("QT must exceed QRS"));
        assert_eq!(t.skipped[1].row, 2);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            parse_label_table(b"record_id,pr_ms\n", &cols()),
            Err(DataError::MissingColumn(_))
        ));
        assert!(matches!(parse_label_table(b"", &cols()), Err(DataError::EmptyTable)));
        assert!(matches!(
            parse_label_table(b"record_id,patient_id,pr_ms,qrs_ms,qt_ms,hr_bpm\n", &cols()),
            Err(DataError::EmptyTable)
        ));
    }

    #[test]
    fn default_columns() {
        let csv = "ecg_id,PR_Int_Global,QRS_Dur_Global,QT_Int_Global,HR__Global\n1,150,88,390,70\n";
        let t = parse_label_table(csv.as_bytes(), &ColumnMap::default()).unwrap();
        assert_eq!(t.rows[0].record_id, "1");
        assert_eq!(t.rows[0].patient_id, None);
    }
}

//! On-disk ECG records: a CSV of samples (one column per lead, header row of
//! lead names) next to a JSON sidecar with the same stem holding metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{EcgMeta, EcgRecord, Lead, Provenance, TwelveLeadEcg};
use crate::{Error, Result};

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn read_meta(path: &Path) -> Result<EcgMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

pub fn write_meta(path: &Path, meta: &EcgMeta) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta).expect("metadata serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads lead columns from a CSV file. Unknown lead names are an error.
pub fn read_leads(path: &Path) -> Result<BTreeMap<Lead, Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let header: Vec<Lead> = reader
        .headers()
        .map_err(|e| Error::parse(path, e))?
        .iter()
        .map(|h| h.trim().parse::<Lead>())
        .collect::<std::result::Result<_, _>>()?;
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(5000); header.len()];
    for row in reader.records() {
        let row = row.map_err(|e| Error::parse(path, e))?;
        for (col, field) in columns.iter_mut().zip(row.iter()) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| Error::parse(path, format!("bad sample {field:?}: {e}")))?;
            col.push(v);
        }
    }
    Ok(header.into_iter().zip(columns).collect())
}

/// Reads `<stem>.csv` and `<stem>.json`.
pub fn read_record(csv_path: &Path) -> Result<EcgRecord> {
    let meta = read_meta(&sidecar_path(csv_path))?;
    let leads = read_leads(csv_path)?;
    let record = EcgRecord { meta, leads };
    record.validate()?;
    Ok(record)
}

/// Writes lead columns. `decimals = None` uses the shortest representation
/// that parses back to the identical `f64`.
pub fn write_leads(
    path: &Path,
    leads: &BTreeMap<Lead, Vec<f64>>,
    decimals: Option<usize>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let names: Vec<&str> = leads.keys().map(|l| l.name()).collect();
    let n = leads.values().next().map_or(0, Vec::len);
    let cols: Vec<&Vec<f64>> = leads.values().collect();
    let mut line = String::with_capacity(16 * cols.len());
    let mut write = |s: &str| out.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    write(&names.join(","))?;
    write("\n")?;
    for t in 0..n {
        line.clear();
        for (j, col) in cols.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            match decimals {
                Some(d) => line.push_str(&format!("{:.*}", d, col[t])),
                None => line.push_str(&col[t].to_string()),
            }
        }
        line.push('\n');
        write(&line)?;
    }
    drop(write);
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_record(csv_path: &Path, record: &EcgRecord, decimals: Option<usize>) -> Result<()> {
    write_leads(csv_path, &record.leads, decimals)?;
    write_meta(&sidecar_path(csv_path), &record.meta)
}

pub fn write_twelve_lead(
    csv_path: &Path,
    ecg: &TwelveLeadEcg,
    decimals: Option<usize>,
) -> Result<()> {
    write_leads(csv_path, &ecg.leads, decimals)?;
    write_meta(&sidecar_path(csv_path), &ecg.meta)
}

/// Reads a 12-lead file written by [`write_twelve_lead`]. Leads that are
/// never recorded directly are marked derived.
pub fn read_twelve_lead(csv_path: &Path) -> Result<TwelveLeadEcg> {
    let meta = read_meta(&sidecar_path(csv_path))?;
    let leads = read_leads(csv_path)?;
    let provenance = leads
        .keys()
        .map(|&l| (l, if l.is_measured() { Provenance::Measured } else { Provenance::Derived }))
        .collect();
    Ok(TwelveLeadEcg {
        meta,
        leads,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn sample_record() -> EcgRecord {
        let leads = Lead::MEASURED
            .iter()
            .enumerate()
            .map(|(j, &l)| (l, (0..50).map(|t| (t as f64 * 0.1 + j as f64).sin() / 3.0).collect()))
            .collect();
        EcgRecord {
            meta: EcgMeta {
                record_id: "ecg-000017".into(),
                patient_id: "pt-42".into(),
                acquired_at: Utc.with_ymd_and_hms(2022, 11, 30, 23, 59, 1).unwrap(),
                sampling_rate: 500.0,
            },
            leads,
        }
    }

    #[test]
    fn record_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ecg-000017.csv");
        let rec = sample_record();
        write_record(&path, &rec, None).unwrap();
        let back = read_record(&path).unwrap();
        assert_eq!(back, rec);

        let meta_bytes = fs::read(sidecar_path(&path)).unwrap();
        write_meta(&sidecar_path(&path), &back.meta).unwrap();
        assert_eq!(fs::read(sidecar_path(&path)).unwrap(), meta_bytes);
        assert!(String::from_utf8(meta_bytes)
            .unwrap()
            .contains("\"acquired_at\": \"2022-11-30T23:59:01Z\""));
    }

    #[test]
    fn unknown_lead_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        fs::write(&path, "I,II,V7\n1,2,3\n").unwrap();
        assert!(read_leads(&path).is_err());
    }

    #[test]
    fn missing_measured_lead_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        let mut rec = sample_record();
        rec.leads.remove(&Lead::V4);
        write_record(&path, &rec, Some(4)).unwrap();
        let err = read_record(&path).unwrap_err();
        assert!(err.to_string().contains("V4"), "{err}");
    }

    #[test]
    fn twelve_lead_round_trip_marks_derived_leads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let twelve = crate::signal::derive_limb_leads(&sample_record()).unwrap();
        write_twelve_lead(&path, &twelve, None).unwrap();
        assert_eq!(read_twelve_lead(&path).unwrap(), twelve);
    }
}

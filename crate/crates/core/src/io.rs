//! On-disk formats.
//!
//! **Counts** (JSON object or two-column `key,value` CSV):
//!
//! * `N_total_sent` and all 25 `Detected-<cell>` keys (`Detected-ZZss` ...
//!   `Detected-XXww`) are required.
//! * `Sent-<cell>` is optional; missing cells are derived from the class
//!   probabilities.
//! * The phase-matched XXvv tally is given either exactly, as
//!   `Matched-Sent-XXvv`, `Matched-Detected-XXvv` and `Matched-Errors-XXvv`,
//!   or as `Xvv error rate`, a fraction. The rate form takes `4/M` of the
//!   category as matched. `XXuu` keys are optional and follow the same rules.
//!
//! **Parameters** are the flat JSON described on [`ProtocolParams`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::bounds::CapacityRow;
use crate::decoy::{matched_fraction, DecoyCounts, MatchedTally};
use crate::error::{Error, Result};
use crate::keyrate::CurvePoint;
use crate::model::{Category, ProtocolParams};

pub const N_TOTAL_KEY: &str = "N_total_sent";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Json,
        }
    }
}

fn name(path: &Path) -> String {
    path.display().to_string()
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        source_name: name(path),
        reason: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serialising plain data cannot fail");
    s.push('\n');
    write_string(path, &s)
}

pub fn read_params(path: &Path) -> Result<ProtocolParams> {
    read_json(path)
}

fn detected_key(c: Category) -> String {
    format!("Detected-{c}")
}

fn sent_key(c: Category) -> String {
    format!("Sent-{c}")
}

/// Flattens counts to the key/value form used by both file formats.
pub fn counts_to_map(counts: &DecoyCounts) -> Vec<(String, f64)> {
    let mut out = vec![(N_TOTAL_KEY.to_string(), counts.n_tot)];
    for c in Category::all() {
        out.push((detected_key(c), counts.detected(c)));
    }
    for c in Category::all() {
        out.push((sent_key(c), counts.sent(c)));
    }
    for (cell, t) in [("XXvv", counts.matched_vv), ("XXuu", counts.matched_uu)] {
        if let Some(t) = t {
            out.push((format!("Matched-Sent-{cell}"), t.sent));
            out.push((format!("Matched-Detected-{cell}"), t.detected));
            out.push((format!("Matched-Errors-{cell}"), t.errors));
        }
    }
    for (label, t) in [("Xvv error rate", counts.matched_vv), ("Xuu error rate", counts.matched_uu)] {
        if let Some(t) = t {
            out.push((label.to_string(), t.error_rate()));
        }
    }
    out
}

fn matched_from_map(
    map: &BTreeMap<String, f64>,
    cell: &str,
    rate_key: &str,
    counts: &DecoyCounts,
    params: &ProtocolParams,
    source: &str,
) -> Result<Option<MatchedTally>> {
    let keys = ["Sent", "Detected", "Errors"].map(|k| format!("Matched-{k}-{cell}"));
    let found: Vec<Option<f64>> = keys.iter().map(|k| map.get(k).copied()).collect();
    if found.iter().all(Option::is_some) {
        return Ok(Some(MatchedTally {
            sent: found[0].unwrap(),
            detected: found[1].unwrap(),
            errors: found[2].unwrap(),
        }));
    }
    if let Some(missing) = keys.iter().zip(&found).find(|(_, v)| v.is_none()).filter(|_| found.iter().any(Option::is_some)) {
        return Err(Error::MissingKey {
            source_name: source.into(),
            key: missing.0.clone(),
        });
    }
    let Some(&rate) = map.get(rate_key) else {
        return Ok(None);
    };
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Schema {
            source_name: source.into(),
            reason: format!("`{rate_key}` = {rate} is not a fraction"),
        });
    }
    let c = Category::parse(cell).expect("fixed cell label");
    Ok(Some(MatchedTally::from_error_rate(
        counts.sent(c),
        counts.detected(c),
        rate,
        matched_fraction(params.phase_slices),
    )))
}

pub fn counts_from_map(map: &BTreeMap<String, f64>, params: &ProtocolParams, source: &str) -> Result<DecoyCounts> {
    let need = |key: &str| {
        map.get(key).copied().ok_or_else(|| Error::MissingKey {
            source_name: source.into(),
            key: key.into(),
        })
    };
    let n_tot = need(N_TOTAL_KEY)?;
    let mut detected = [0.0; Category::COUNT];
    for c in Category::all() {
        detected[c.index()] = need(&detected_key(c))?;
    }
    let mut counts = DecoyCounts::from_detected(n_tot, detected, params);
    for c in Category::all() {
        if let Some(&s) = map.get(&sent_key(c)) {
            counts.sent[c.index()] = s;
        }
    }
    counts.matched_vv = matched_from_map(map, "XXvv", "Xvv error rate", &counts, params, source)?;
    if counts.matched_vv.is_none() {
        return Err(Error::MissingKey {
            source_name: source.into(),
            key: "Xvv error rate".into(),
        });
    }
    counts.matched_uu = matched_from_map(map, "XXuu", "Xuu error rate", &counts, params, source)?;
    counts.validate().map_err(|e| Error::Schema {
        source_name: source.into(),
        reason: e.to_string(),
    })?;
    Ok(counts)
}

fn parse_map_json(text: &str, source: &str) -> Result<BTreeMap<String, f64>> {
    let schema = |reason: String| Error::Schema {
        source_name: source.into(),
        reason,
    };
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| schema("expected a JSON object".into()))?;
    obj.iter()
        .map(|(k, v)| {
            v.as_f64()
                .map(|x| (k.clone(), x))
                .ok_or_else(|| schema(format!("`{k}` is not a number")))
        })
        .collect()
}

fn parse_map_csv(text: &str, source: &str) -> Result<BTreeMap<String, f64>> {
    let schema = |reason: String| Error::Schema {
        source_name: source.into(),
        reason,
    };
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut map = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| schema(e.to_string()))?;
        if rec.len() != 2 {
            return Err(schema(format!("expected key,value rows, got {} fields", rec.len())));
        }
        let value = rec[1]
            .trim()
            .parse::<f64>()
            .map_err(|_| schema(format!("`{}` is not a number", &rec[1])))?;
        map.insert(rec[0].trim().to_string(), value);
    }
    Ok(map)
}

pub fn read_counts(path: &Path, params: &ProtocolParams) -> Result<DecoyCounts> {
    let text = read_to_string(path)?;
    let src = name(path);
    let map = match Format::from_path(path) {
        Format::Json => parse_map_json(&text, &src)?,
        Format::Csv => parse_map_csv(&text, &src)?,
    };
    counts_from_map(&map, params, &src)
}

pub fn counts_to_json(counts: &DecoyCounts) -> String {
    let obj: serde_json::Map<String, serde_json::Value> = counts_to_map(counts)
        .into_iter()
        .map(|(k, v)| (k, serde_json::Value::from(v)))
        .collect();
    let mut s = serde_json::to_string_pretty(&obj).expect("plain map");
    s.push('\n');
    s
}

pub fn counts_to_csv(counts: &DecoyCounts) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["key", "value"]).expect("in-memory write");
    for (k, v) in counts_to_map(counts) {
        w.write_record([k, format!("{v:?}")]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv output is utf-8")
}

pub fn write_counts(path: &Path, counts: &DecoyCounts) -> Result<()> {
    let body = match Format::from_path(path) {
        Format::Json => counts_to_json(counts),
        Format::Csv => counts_to_csv(counts),
    };
    write_string(path, &body)
}

/// Serialises plain records as CSV with a header row.
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv output is utf-8")
}

fn rows_from_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_to_string(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Schema {
            source_name: name(path),
            reason: e.to_string(),
        })
}

pub fn write_curve_csv(path: &Path, rows: &[CurvePoint]) -> Result<()> {
    write_string(path, &rows_to_csv(rows))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    rows_from_csv(path)
}

pub fn write_bounds_csv(path: &Path, rows: &[CapacityRow]) -> Result<()> {
    write_string(path, &rows_to_csv(rows))
}

pub fn read_bounds_csv(path: &Path) -> Result<Vec<CapacityRow>> {
    rows_from_csv(path)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceRow {
    pub t_s: f64,
    pub delta_phi_rad: f64,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_string(path, &rows_to_csv(rows))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    rows_from_csv(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_map() -> BTreeMap<String, f64> {
        let text = include_str!("../../../fixtures/field_counts.json");
        parse_map_json(text, "fixture").unwrap()
    }

    #[test]
    fn fixture_parses() {
        let p = ProtocolParams::field_trial();
        let c = counts_from_map(&field_map(), &p, "fixture").unwrap();
        assert_eq!(c.n_tot, 1.36581e13);
        assert_eq!(c.detected(Category::parse("XXvv").unwrap()), 3_873_980.0);
        let vv = c.matched_vv.unwrap();
        assert!((vv.error_rate() - 0.0583).abs() < 1e-12);
        assert!((vv.sent - c.sent(Category::parse("XXvv").unwrap()) / 4.0).abs() < 1e-3);
    }

    #[test]
    fn missing_cell_is_named() {
        let mut m = field_map();
        m.remove("Detected-XXvv");
        let err = counts_from_map(&m, &ProtocolParams::field_trial(), "f").unwrap_err();
        assert!(matches!(err, Error::MissingKey { ref key, .. } if key == "Detected-XXvv"));
        let mut m = field_map();
        m.remove("Xvv error rate");
        let err = counts_from_map(&m, &ProtocolParams::field_trial(), "f").unwrap_err();
        assert!(matches!(err, Error::MissingKey { ref key, .. } if key == "Xvv error rate"));
    }

    #[test]
    fn partial_exact_tally_is_an_error() {
        let mut m = field_map();
        m.insert("Matched-Sent-XXvv".into(), 10.0);
        let err = counts_from_map(&m, &ProtocolParams::field_trial(), "f").unwrap_err();
        assert!(matches!(err, Error::MissingKey { ref key, .. } if key == "Matched-Detected-XXvv"));
    }

    #[test]
    fn json_and_csv_round_trip() {
        let p = ProtocolParams::field_trial();
        let c = counts_from_map(&field_map(), &p, "fixture").unwrap();
        let j = parse_map_json(&counts_to_json(&c), "j").unwrap();
        assert_eq!(counts_from_map(&j, &p, "j").unwrap(), c);
        let s = parse_map_csv(&counts_to_csv(&c), "c").unwrap();
        assert_eq!(counts_from_map(&s, &p, "c").unwrap(), c);
    }

    #[test]
    fn non_numeric_value_is_schema_error() {
        let e = parse_map_json(r#"{"N_total_sent": "lots"}"#, "x").unwrap_err();
        assert!(e.is_schema());
        let e = parse_map_csv("key,value\nN_total_sent,abc\n", "x").unwrap_err();
        assert!(e.is_schema());
    }
}

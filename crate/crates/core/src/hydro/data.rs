use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{aridity_index, HydroError, Samples, PHI_WARN_THRESHOLD};

pub const REQUIRED_COLUMNS: [&str; 5] = ["gauge_id", "p_mm_yr", "pet_mm_yr", "qb_mm_yr", "qd_mm_yr"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatchmentRecord {
    pub gauge_id: String,
    /// Mean-annual precipitation, mm/yr.
    pub p: f64,
    /// Mean-annual potential evapotranspiration, mm/yr.
    pub pet: f64,
    /// Mean-annual baseflow, mm/yr.
    pub qb: f64,
    /// Mean-annual direct runoff, mm/yr.
    pub qd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedRecord {
    pub phi: f64,
    pub q: f64,
    pub qb_over_p: f64,
    pub qd_over_p: f64,
    pub q_over_p: f64,
}

impl DerivedRecord {
    pub fn from_record(r: &CatchmentRecord) -> Result<Self, HydroError> {
        let phi = aridity_index(r.p, r.pet)?;
        let qb_over_p = r.qb / r.p;
        let qd_over_p = r.qd / r.p;
        Ok(Self {
            phi,
            q: r.qb + r.qd,
            qb_over_p,
            qd_over_p,
            q_over_p: qb_over_p + qd_over_p,
        })
    }
}

/// Which column a model is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    QbOverP,
    QdOverP,
    Qb,
    Qd,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::QbOverP => "qb_over_p",
            Target::QdOverP => "qd_over_p",
            Target::Qb => "qb",
            Target::Qd => "qd",
        }
    }
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Target {
    type Err = HydroError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Target::QbOverP, Target::QdOverP, Target::Qb, Target::Qd]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| HydroError::InvalidArg(format!("unknown target `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatchmentDataset {
    pub records: Vec<CatchmentRecord>,
    pub derived: Vec<DerivedRecord>,
    pub provenance: String,
    /// Non-fatal findings from loading, one line each.
    pub warnings: Vec<String>,
}

impl CatchmentDataset {
    pub fn new(records: Vec<CatchmentRecord>, provenance: impl Into<String>) -> Result<Self, HydroError> {
        if records.is_empty() {
            return Err(HydroError::Empty);
        }
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.gauge_id.as_str()) {
                return Err(HydroError::DuplicateGaugeId { id: r.gauge_id.clone(), line: i as u64 + 2 });
            }
        }
        let rows: Vec<String> = records
            .iter()
            .filter_map(|r| record_violation(r).map(|m| format!("{}: {m}", r.gauge_id)))
            .collect();
        if !rows.is_empty() {
            return Err(HydroError::InvariantViolation(rows));
        }
        let derived = records.iter().map(DerivedRecord::from_record).collect::<Result<_, _>>()?;
        Ok(Self { records, derived, provenance: provenance.into(), warnings: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn phis(&self) -> Vec<f64> {
        self.derived.iter().map(|d| d.phi).collect()
    }

    pub fn target(&self, t: Target) -> Vec<f64> {
        self.records
            .iter()
            .zip(&self.derived)
            .map(|(r, d)| match t {
                Target::QbOverP => d.qb_over_p,
                Target::QdOverP => d.qd_over_p,
                Target::Qb => r.qb,
                Target::Qd => r.qd,
            })
            .collect()
    }

    /// Looks up a numeric column by name: the raw and derived fields.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        if let Ok(t) = name.parse::<Target>() {
            return Some(self.target(t));
        }
        let pick: fn(&CatchmentRecord, &DerivedRecord) -> f64 = match name {
            "p" | "p_mm_yr" => |r, _| r.p,
            "pet" | "pet_mm_yr" => |r, _| r.pet,
            "qb_mm_yr" => |r, _| r.qb,
            "qd_mm_yr" => |r, _| r.qd,
            "phi" => |_, d| d.phi,
            "q" => |_, d| d.q,
            "q_over_p" => |_, d| d.q_over_p,
            _ => return None,
        };
        Some(self.records.iter().zip(&self.derived).map(|(r, d)| pick(r, d)).collect())
    }

    pub fn samples(&self, t: Target) -> Samples {
        Samples { x: self.phis(), y: self.target(t), truth: None }
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            derived: indices.iter().map(|&i| self.derived[i]).collect(),
            provenance: self.provenance.clone(),
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Drop rows whose runoff exceeds precipitation instead of only warning.
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { strict: true }
    }
}

fn record_violation(r: &CatchmentRecord) -> Option<String> {
    let mut bad = Vec::new();
    if !(r.p > 0.0) || !r.p.is_finite() {
        bad.push(format!("p = {} (must be > 0)", r.p));
    }
    for (name, v) in [("pet", r.pet), ("qb", r.qb), ("qd", r.qd)] {
        if !(v >= 0.0) || !v.is_finite() {
            bad.push(format!("{name} = {v} (must be >= 0)"));
        }
    }
    (!bad.is_empty()).then(|| bad.join(", "))
}

pub fn load_catchments(path: &Path, opts: LoadOptions) -> Result<CatchmentDataset, HydroError> {
    let file = std::fs::File::open(path).map_err(|e| HydroError::Io(format!("{}: {e}", path.display())))?;
    let mut ds = read_catchments(file, opts)?;
    ds.provenance = path.display().to_string();
    Ok(ds)
}

/// Parses catchment rows from in-memory text.
pub fn parse_catchments(text: &str, opts: LoadOptions) -> Result<CatchmentDataset, HydroError> {
    read_catchments(text.as_bytes(), opts)
}

fn csv_error(e: csv::Error) -> HydroError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::Io(_) => HydroError::Io(e.to_string()),
        _ => HydroError::Parse { line, msg: e.to_string() },
    }
}

fn read_catchments<R: Read>(input: R, opts: LoadOptions) -> Result<CatchmentDataset, HydroError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| HydroError::MissingColumn(name.to_string()))?;
    }
    let mut warnings = Vec::new();
    let extra: Vec<&str> = headers.iter().filter(|h| !REQUIRED_COLUMNS.contains(h)).collect();
    if !extra.is_empty() {
        warnings.push(format!("ignoring unknown columns: {}", extra.join(", ")));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut violations = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let num = |k: usize| -> Result<f64, HydroError> {
            let s = &row[cols[k]];
            s.parse::<f64>().map_err(|_| HydroError::Parse {
                line,
                msg: format!("column {}: `{s}` is not a number", REQUIRED_COLUMNS[k]),
            })
        };
        let rec = CatchmentRecord {
            gauge_id: row[cols[0]].to_string(),
            p: num(1)?,
            pet: num(2)?,
            qb: num(3)?,
            qd: num(4)?,
        };
        if rec.gauge_id.is_empty() {
            return Err(HydroError::Parse { line, msg: "empty gauge_id".into() });
        }
        if !seen.insert(rec.gauge_id.clone()) {
            return Err(HydroError::DuplicateGaugeId { id: rec.gauge_id, line });
        }
        if let Some(m) = record_violation(&rec) {
            violations.push(format!("line {line} ({}): {m}", rec.gauge_id));
            continue;
        }
        if rec.qb + rec.qd > rec.p {
            let action = if opts.strict { "excluded" } else { "kept" };
            warnings.push(format!(
                "line {line} ({}): qb + qd = {} exceeds p = {}; {action}",
                rec.gauge_id,
                rec.qb + rec.qd,
                rec.p
            ));
            if opts.strict {
                continue;
            }
        }
        let phi = rec.pet / rec.p;
        if phi > PHI_WARN_THRESHOLD {
            warnings.push(format!("line {line} ({}): aridity index {phi} is unusually large", rec.gauge_id));
        }
        records.push(rec);
    }
    if !violations.is_empty() {
        return Err(HydroError::InvariantViolation(violations));
    }
    let mut ds = CatchmentDataset::new(records, "<memory>")?;
    for w in &warnings {
        log::warn!("{w}");
    }
    ds.warnings = warnings;
    Ok(ds)
}

/// Writes the dataset's required columns plus `phi,prediction`.
pub fn write_predictions(path: &Path, ds: &CatchmentDataset, predictions: &[f64]) -> Result<(), HydroError> {
    if predictions.len() != ds.len() {
        return Err(HydroError::InvalidArg(format!(
            "{} predictions for {} records",
            predictions.len(),
            ds.len()
        )));
    }
    let io = |e: csv::Error| HydroError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    header.extend(["phi", "prediction"]);
    w.write_record(&header).map_err(io)?;
    for ((r, d), pred) in ds.records.iter().zip(&ds.derived).zip(predictions) {
        w.write_record([
            r.gauge_id.clone(),
            r.p.to_string(),
            r.pet.to_string(),
            r.qb.to_string(),
            r.qd.to_string(),
            d.phi.to_string(),
            pred.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| HydroError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "gauge_id,p_mm_yr,pet_mm_yr,qb_mm_yr,qd_mm_yr\n";

    #[test]
    fn three_rows() {
        let text = format!("{HEADER}a,1000,800,120,200\nb,800,1200,40,60\nc,1500,900,300,400\n");
        let ds = parse_catchments(&text, LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 3);
        for (r, d) in ds.records.iter().zip(&ds.derived) {
            assert_eq!(d.phi, r.pet / r.p);
        }
        assert_eq!(ds.derived[1].phi, 1.5);
        assert!(ds.warnings.is_empty());
    }

    #[test]
    fn crlf_and_extra_columns() {
        let text = "gauge_id,area,p_mm_yr,pet_mm_yr,qb_mm_yr,qd_mm_yr\r\nx,5,1000,500,100,100\r\n";
        let ds = parse_catchments(text, LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.derived[0].phi, 0.5);
        assert_eq!(ds.warnings.len(), 1);
        assert!(ds.warnings[0].contains("area"));
    }

    #[test]
    fn zero_precipitation_names_row() {
        let text = format!("{HEADER}a,1000,800,120,200\nbad_one,0,800,10,10\n");
        match parse_catchments(&text, LoadOptions::default()) {
            Err(HydroError::InvariantViolation(rows)) => {
                assert_eq!(rows.len(), 1);
                assert!(rows[0].contains("bad_one") && rows[0].contains("line 3"), "{rows:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn water_balance_violation() {
        let text = format!("{HEADER}a,1000,800,120,200\nb,500,800,400,200\n");
        let strict = parse_catchments(&text, LoadOptions { strict: true }).unwrap();
        assert_eq!(strict.len(), 1);
        assert_eq!(strict.warnings.len(), 1);
        let lax = parse_catchments(&text, LoadOptions { strict: false }).unwrap();
        assert_eq!(lax.len(), 2);
        assert_eq!(lax.warnings.len(), 1);
    }

    #[test]
    fn parse_errors() {
        let text = format!("{HEADER}a,1000,800,120,200\nb,1000,abc,1,1\n");
        assert!(matches!(
            parse_catchments(&text, LoadOptions::default()),
            Err(HydroError::Parse { line: 3, .. })
        ));
        let text = format!("{HEADER}a,1000,800,120\n");
        assert!(matches!(
            parse_catchments(&text, LoadOptions::default()),
            Err(HydroError::Parse { line: 2, .. })
        ));
        assert_eq!(
            parse_catchments("gauge_id,p_mm_yr\n", LoadOptions::default()),
            Err(HydroError::MissingColumn("pet_mm_yr".into()))
        );
        assert_eq!(parse_catchments(HEADER, LoadOptions::default()), Err(HydroError::Empty));
    }

    #[test]
    fn duplicate_ids() {
        let text = format!("{HEADER}a,1000,800,120,200\na,900,800,120,200\n");
        assert_eq!(
            parse_catchments(&text, LoadOptions::default()),
            Err(HydroError::DuplicateGaugeId { id: "a".into(), line: 3 })
        );
    }

    #[test]
    fn large_phi_warns() {
        let text = format!("{HEADER}a,100,1500,1,1\n");
        let ds = parse_catchments(&text, LoadOptions::default()).unwrap();
        assert_eq!(ds.warnings.len(), 1);
    }

    #[test]
    fn predictions_file() {
        let text = format!("{HEADER}a,1000,800,120,200\nb,800,1200,40,60\n");
        let ds = parse_catchments(&text, LoadOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        write_predictions(&path, &ds, &[0.1, 0.2]).unwrap();
        let out = std::fs::read_to_string(&path).unwrap();
        assert!(out.starts_with("gauge_id,p_mm_yr,pet_mm_yr,qb_mm_yr,qd_mm_yr,phi,prediction\n"));
        // the output is itself loadable
        let back = load_catchments(&path, LoadOptions::default()).unwrap();
        assert_eq!(back.records, ds.records);
        assert!(write_predictions(&path, &ds, &[0.1]).is_err());
    }

    proptest! {
        #[test]
        fn water_balance_identity(p in 1.0..5000.0f64, pet in 0.0..5000.0f64, qb in 0.0..2000.0f64, qd in 0.0..2000.0f64) {
            let r = CatchmentRecord { gauge_id: "g".into(), p, pet, qb, qd };
            let d = DerivedRecord::from_record(&r).unwrap();
            prop_assert!((d.q_over_p - d.qb_over_p - d.qd_over_p).abs() <= 1e-12);
            prop_assert_eq!(d.phi, pet / p);
        }
    }
}

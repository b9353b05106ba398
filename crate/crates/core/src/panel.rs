//! Firm-year panel: schema, CSV ingestion, and cleaning rules.
//!
//! The panel is a long-form table of firm-years with optional numeric
//! variables. Cleaning mirrors standard practice for production-function
//! samples:
//!
//! * rows with non-positive output, capital, labor, or materials are
//!   dropped at ingestion (with per-reason counts);
//! * a US-style materials-cost variable can be constructed from accounting
//!   items as `cogs + xsga − wage_bill − depreciation`, set to missing when
//!   non-positive;
//! * the *productivity sample* keeps firms with at least two non-missing
//!   observations of a key variable covering at least half of the firm's
//!   active years;
//! * short internal gaps (≤ 3 years) in a variable are filled by linear
//!   interpolation in the year dimension; a firm with any longer internal
//!   gap has that variable set to missing in all its years; leading and
//!   trailing missing values are never extrapolated.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log intermediate-input revenue share, `ln(materials_cost / (P·Y))`.
pub type LogShare = f64;

/// One firm-year observation. All value fields are optional; `None` means
/// missing. Levels, not logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmYear {
    pub firm_id: String,
    pub year: i32,
    pub sector: String,
    pub country: String,
    /// Deflated gross output `Y`.
    pub output: Option<f64>,
    /// Deflated capital stock `K`.
    pub capital: Option<f64>,
    /// Labor input `L` (headcount or hours).
    pub labor: Option<f64>,
    /// Deflated materials `M`.
    pub materials: Option<f64>,
    /// Nominal wage bill `w·L`.
    pub wage_bill: Option<f64>,
    /// Nominal materials expenditure `ρ·M`.
    pub materials_cost: Option<f64>,
    /// Output price level `P`; treated as 1 when missing.
    pub price: Option<f64>,
    /// Cost of goods sold (accounting item for US-style materials).
    pub cogs: Option<f64>,
    /// Selling, general and administrative expense (accounting item).
    pub xsga: Option<f64>,
    /// Depreciation (accounting item).
    pub depreciation: Option<f64>,
}

impl FirmYear {
    /// A record with identifiers set and every value missing.
    pub fn empty(firm_id: impl Into<String>, year: i32) -> Self {
        FirmYear {
            firm_id: firm_id.into(),
            year,
            sector: String::new(),
            country: String::new(),
            output: None,
            capital: None,
            labor: None,
            materials: None,
            wage_bill: None,
            materials_cost: None,
            price: None,
            cogs: None,
            xsga: None,
            depreciation: None,
        }
    }

    /// Output price, defaulting to 1 when the deflator column is absent.
    pub fn price_or_unit(&self) -> f64 {
        self.price.unwrap_or(1.0)
    }
}

/// Panel variables addressable by name in cleaning operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Var {
    Output,
    Capital,
    Labor,
    Materials,
    WageBill,
    MaterialsCost,
    Price,
}

impl Var {
    /// Read the variable from a record.
    pub fn get(self, r: &FirmYear) -> Option<f64> {
        match self {
            Var::Output => r.output,
            Var::Capital => r.capital,
            Var::Labor => r.labor,
            Var::Materials => r.materials,
            Var::WageBill => r.wage_bill,
            Var::MaterialsCost => r.materials_cost,
            Var::Price => r.price,
        }
    }

    /// Write the variable on a record.
    pub fn set(self, r: &mut FirmYear, v: Option<f64>) {
        match self {
            Var::Output => r.output = v,
            Var::Capital => r.capital = v,
            Var::Labor => r.labor = v,
            Var::Materials => r.materials = v,
            Var::WageBill => r.wage_bill = v,
            Var::MaterialsCost => r.materials_cost = v,
            Var::Price => r.price = v,
        }
    }
}

/// A firm-year panel, sorted by `(firm_id, year)` with unique keys.
#[derive(Debug, Clone, PartialEq)]
pub struct FirmPanel {
    records: Vec<FirmYear>,
}

impl FirmPanel {
    /// Build a panel from records. Sorts by `(firm_id, year)` and rejects
    /// duplicate firm-year keys.
    pub fn new(mut records: Vec<FirmYear>) -> Result<Self> {
        records.sort_by(|a, b| a.firm_id.cmp(&b.firm_id).then(a.year.cmp(&b.year)));
        for w in records.windows(2) {
            if w[0].firm_id == w[1].firm_id && w[0].year == w[1].year {
                return Err(Error::validation(format!(
                    "duplicate firm-year key ({}, {})",
                    w[0].firm_id, w[0].year
                )));
            }
        }
        Ok(FirmPanel { records })
    }

    /// Records, sorted by `(firm_id, year)`.
    pub fn records(&self) -> &[FirmYear] {
        &self.records
    }

    /// Number of records.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Whether the panel has no records.
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Contiguous index ranges of the per-firm blocks, in firm order.
    pub fn firm_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0usize;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].firm_id != self.records[start].firm_id {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Number of distinct firms.
    pub fn n_firms(&self) -> usize {
        self.firm_ranges().len()
    }

    /// Truncate every sector code to its first `level` characters.
    /// `level = 0` leaves codes untouched.
    pub fn truncate_sectors(&mut self, level: usize) {
        if level == 0 {
            return;
        }
        for r in &mut self.records {
            if r.sector.len() > level {
                r.sector.truncate(level);
            }
        }
    }

    /// Apply an in-place edit to every record, preserving sort order.
    /// The closure must not change identifiers.
    pub(crate) fn map_values(&mut self, mut f: impl FnMut(&mut FirmYear)) {
        for r in &mut self.records {
            f(r);
        }
    }
}

/// Column-name mapping for [`ingest_csv`].
///
/// Identifier columns are required. Value columns are `Some(name)` (the
/// column must exist in the header) or `None` (not ingested; the variable
/// is missing everywhere).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub firm_id: String,
    pub year: String,
    pub sector: String,
    pub country: String,
    pub output: Option<String>,
    pub capital: Option<String>,
    pub labor: Option<String>,
    pub materials: Option<String>,
    pub wage_bill: Option<String>,
    pub materials_cost: Option<String>,
    pub price: Option<String>,
    pub cogs: Option<String>,
    pub xsga: Option<String>,
    pub depreciation: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            firm_id: "firm_id".to_string(),
            year: "year".to_string(),
            sector: "sector".to_string(),
            country: "country".to_string(),
            output: Some("output".to_string()),
            capital: Some("capital".to_string()),
            labor: Some("labor".to_string()),
            materials: Some("materials".to_string()),
            wage_bill: Some("wage_bill".to_string()),
            materials_cost: Some("materials_cost".to_string()),
            price: Some("price".to_string()),
            cogs: None,
            xsga: None,
            depreciation: None,
        }
    }
}

/// Ingestion accounting: how many rows came in, how many survived, and
/// per-reason drop counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub rows_in: u64,
    pub rows_kept: u64,
    /// Reason → count for dropped rows.
    pub dropped: BTreeMap<String, u64>,
}

impl DropReport {
    fn drop(&mut self, reason: &str) {
        *self.dropped.entry(reason.to_string()).or_insert(0) += 1;
    }
}

fn parse_cell(raw: &str) -> std::result::Result<Option<f64>, ()> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Ok(None), // inf/-inf treated as missing
        Err(_) => Err(()),
    }
}

/// Read a long-form firm-year CSV (header required) into a panel.
///
/// Missing numeric cells may be empty, `NA`, or `NaN`. Rows with
/// non-numeric content in a mapped numeric column are dropped and counted.
/// Rows with non-positive output, capital, labor, or materials are dropped
/// with per-variable counts; non-positive wage bill, materials cost, or
/// price is set to missing (counted). Duplicate `(firm_id, year)` keys are
/// a validation error.
pub fn ingest_csv<R: Read>(reader: R, map: &ColumnMap) -> Result<(FirmPanel, DropReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr
        .headers()
        .map_err(|e| Error::validation(format!("cannot read CSV header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::validation(format!("missing required column '{name}'")))
    };
    let opt_col = |name: &Option<String>| -> Result<Option<usize>> {
        match name {
            None => Ok(None),
            Some(n) => col(n).map(Some),
        }
    };

    let idx_firm = col(&map.firm_id)?;
    let idx_year = col(&map.year)?;
    let idx_sector = col(&map.sector)?;
    let idx_country = col(&map.country)?;
    let value_cols: [(Var, Option<usize>); 7] = [
        (Var::Output, opt_col(&map.output)?),
        (Var::Capital, opt_col(&map.capital)?),
        (Var::Labor, opt_col(&map.labor)?),
        (Var::Materials, opt_col(&map.materials)?),
        (Var::WageBill, opt_col(&map.wage_bill)?),
        (Var::MaterialsCost, opt_col(&map.materials_cost)?),
        (Var::Price, opt_col(&map.price)?),
    ];
    let idx_cogs = opt_col(&map.cogs)?;
    let idx_xsga = opt_col(&map.xsga)?;
    let idx_depr = opt_col(&map.depreciation)?;

    let mut report = DropReport::default();
    let mut records = Vec::new();

    'rows: for row in rdr.records() {
        let row = row?;
        report.rows_in += 1;

        let year = match row.get(idx_year).unwrap_or("").trim().parse::<i32>() {
            Ok(y) => y,
            Err(_) => {
                report.drop("non_integer_year");
                continue;
            }
        };
        let mut rec = FirmYear::empty(row.get(idx_firm).unwrap_or("").to_string(), year);
        if rec.firm_id.is_empty() {
            report.drop("empty_firm_id");
            continue;
        }
        rec.sector = row.get(idx_sector).unwrap_or("").to_string();
        rec.country = row.get(idx_country).unwrap_or("").to_string();

        for (var, idx) in value_cols {
            let Some(idx) = idx else { continue };
            let raw = row.get(idx).unwrap_or("");
            let parsed = match parse_cell(raw) {
                Ok(v) => v,
                Err(()) => {
                    report.drop("non_numeric_value");
                    continue 'rows;
                }
            };
            let cleaned = match (var, parsed) {
                // Core quantities must be strictly positive: drop the row.
                (Var::Output, Some(v)) if v <= 0.0 => {
                    report.drop("nonpositive_output");
                    continue 'rows;
                }
                (Var::Capital, Some(v)) if v <= 0.0 => {
                    report.drop("nonpositive_capital");
                    continue 'rows;
                }
                (Var::Labor, Some(v)) if v <= 0.0 => {
                    report.drop("nonpositive_labor");
                    continue 'rows;
                }
                (Var::Materials, Some(v)) if v <= 0.0 => {
                    report.drop("nonpositive_materials");
                    continue 'rows;
                }
                // Monetary side variables: non-positive becomes missing.
                (Var::WageBill | Var::MaterialsCost | Var::Price, Some(v)) if v <= 0.0 => {
                    report.drop("nonpositive_value_to_missing");
                    None
                }
                (_, v) => v,
            };
            var.set(&mut rec, cleaned);
        }

        for (field, idx) in [
            (&mut rec.cogs, idx_cogs),
            (&mut rec.xsga, idx_xsga),
            (&mut rec.depreciation, idx_depr),
        ] {
            if let Some(idx) = idx {
                match parse_cell(row.get(idx).unwrap_or("")) {
                    Ok(v) => *field = v,
                    Err(()) => {
                        report.drop("non_numeric_value");
                        continue 'rows;
                    }
                }
            }
        }

        records.push(rec);
        report.rows_kept += 1;
    }

    let panel = FirmPanel::new(records)?;
    Ok((panel, report))
}

/// Write a panel as CSV with the default column names. Missing values are
/// emitted as empty cells; floats use shortest round-trip formatting.
pub fn write_csv<W: Write>(panel: &FirmPanel, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "firm_id",
        "year",
        "sector",
        "country",
        "output",
        "capital",
        "labor",
        "materials",
        "wage_bill",
        "materials_cost",
        "price",
    ])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in panel.records() {
        wtr.write_record([
            r.firm_id.clone(),
            r.year.to_string(),
            r.sector.clone(),
            r.country.clone(),
            fmt(r.output),
            fmt(r.capital),
            fmt(r.labor),
            fmt(r.materials),
            fmt(r.wage_bill),
            fmt(r.materials_cost),
            fmt(r.price),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Result of [`construct_us_materials`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaterialsConstruction {
    /// Records where the constructed value was positive and stored.
    pub constructed: usize,
    /// Records where the construction was non-positive → set missing.
    pub nonpositive: usize,
    /// Records lacking one of the accounting inputs (left untouched).
    pub missing_inputs: usize,
}

/// Build a US-style materials cost, `cogs + xsga − wage_bill − depreciation`,
/// overwriting `materials_cost`. Non-positive constructions are recorded as
/// missing; records lacking any input keep their existing value.
pub fn construct_us_materials(panel: &mut FirmPanel) -> MaterialsConstruction {
    let mut out = MaterialsConstruction::default();
    panel.map_values(|r| match (r.cogs, r.xsga, r.wage_bill, r.depreciation) {
        (Some(c), Some(x), Some(w), Some(d)) => {
            let v = c + x - w - d;
            if v > 0.0 {
                r.materials_cost = Some(v);
                out.constructed += 1;
            } else {
                r.materials_cost = None;
                out.nonpositive += 1;
            }
        }
        _ => out.missing_inputs += 1,
    });
    out
}

/// Keep firms with at least `2` non-missing observations of `key` covering
/// at least half of the firm's active years (rows present in the panel).
/// Returns the filtered panel and the number of firms dropped.
pub fn productivity_sample(panel: &FirmPanel, key: Var) -> (FirmPanel, usize) {
    let mut kept = Vec::new();
    let mut dropped_firms = 0usize;
    for range in panel.firm_ranges() {
        let rows = &panel.records()[range];
        let active = rows.len();
        let present = rows.iter().filter(|r| key.get(r).is_some()).count();
        if present >= 2 && 2 * present >= active {
            kept.extend_from_slice(rows);
        } else {
            dropped_firms += 1;
        }
    }
    (
        FirmPanel { records: kept }, // preserves order and uniqueness
        dropped_firms,
    )
}

/// Result of [`interpolate_gaps`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpolationReport {
    /// Interior missing cells filled by linear interpolation.
    pub filled: usize,
    /// Firms whose variable was fully nullified due to a gap longer than
    /// the limit.
    pub nullified_firms: usize,
}

/// Fill short internal gaps of `var` by linear interpolation in the year
/// dimension.
///
/// A gap is the run of years strictly between two non-missing observations
/// of the variable; its length is measured in years (`y1 − y0 − 1`), so
/// missing *rows* count toward the gap. Gaps of length ≤ `max_gap` are
/// filled at the rows that exist; any longer internal gap causes the
/// variable to be set missing for *all* of the firm's years. Leading and
/// trailing missing values are never extrapolated.
pub fn interpolate_gaps(panel: &mut FirmPanel, var: Var, max_gap: usize) -> InterpolationReport {
    let mut report = InterpolationReport::default();
    let ranges = panel.firm_ranges();
    for range in ranges {
        let rows = &mut panel.records[range];
        // Indices (within the firm) of non-missing observations, in year order.
        let obs: Vec<usize> = (0..rows.len())
            .filter(|&i| var.get(&rows[i]).is_some())
            .collect();
        if obs.len() < 2 {
            continue; // no internal gap possible
        }
        let too_long = obs.windows(2).any(|w| {
            let y0 = rows[w[0]].year;
            let y1 = rows[w[1]].year;
            (y1 - y0 - 1) as usize > max_gap
        });
        if too_long {
            for r in rows.iter_mut() {
                var.set(r, None);
            }
            report.nullified_firms += 1;
            continue;
        }
        for w in obs.windows(2) {
            let (i0, i1) = (w[0], w[1]);
            let (y0, y1) = (rows[i0].year, rows[i1].year);
            if y1 - y0 <= 1 {
                continue; // adjacent, nothing to fill
            }
            let v0 = var.get(&rows[i0]).expect("obs index is non-missing");
            let v1 = var.get(&rows[i1]).expect("obs index is non-missing");
            for i in (i0 + 1)..i1 {
                let y = rows[i].year;
                let t = f64::from(y - y0) / f64::from(y1 - y0);
                var.set(&mut rows[i], Some(v0 + (v1 - v0) * t));
                report.filled += 1;
            }
        }
    }
    report
}

/// Arrays prepared for estimation: logs of the core quantities plus the
/// log materials share, restricted to records where all are available, with
/// within-firm one-year lag links.
#[derive(Debug, Clone)]
pub struct EstimationSample {
    /// Index of each sample record in the source panel's `records()`.
    pub record_index: Vec<usize>,
    /// Dense firm ordinal per record (0-based, in firm order).
    pub firm: Vec<u32>,
    pub year: Vec<i32>,
    /// Log capital.
    pub k: Vec<f64>,
    /// Log labor.
    pub l: Vec<f64>,
    /// Log materials.
    pub m: Vec<f64>,
    /// Log gross output.
    pub y: Vec<f64>,
    /// Log materials revenue share `ln(materials_cost / (P·Y))`.
    pub s: Vec<LogShare>,
    /// For each record, the sample index of the same firm's previous-year
    /// record, when that record exists in the sample.
    pub lag: Vec<Option<usize>>,
    pub n_firms: usize,
}

impl EstimationSample {
    /// Number of usable records.
    pub fn len(&self) -> usize {
        self.record_index.len()
    }

    /// Whether the sample is empty.
    pub fn is_empty(&self) -> bool {
        self.record_index.is_empty()
    }

    /// Number of records that have a one-year lag in the sample.
    pub fn n_lag_pairs(&self) -> usize {
        self.lag.iter().filter(|l| l.is_some()).count()
    }
}

/// Extract the estimation arrays from a panel.
///
/// A record enters when output, capital, labor, materials, and materials
/// cost are all present (ingestion already guarantees positivity). The
/// price defaults to 1 when missing. Errors when no record qualifies.
pub fn estimation_sample(panel: &FirmPanel) -> Result<EstimationSample> {
    let mut sample = EstimationSample {
        record_index: Vec::new(),
        firm: Vec::new(),
        year: Vec::new(),
        k: Vec::new(),
        l: Vec::new(),
        m: Vec::new(),
        y: Vec::new(),
        s: Vec::new(),
        lag: Vec::new(),
        n_firms: 0,
    };
    for (firm_ord, range) in panel.firm_ranges().into_iter().enumerate() {
        let mut prev: Option<(i32, usize)> = None; // (year, sample index)
        let mut any = false;
        for idx in range {
            let r = &panel.records()[idx];
            let (Some(yv), Some(kv), Some(lv), Some(mv), Some(mc)) =
                (r.output, r.capital, r.labor, r.materials, r.materials_cost)
            else {
                continue;
            };
            let p = r.price_or_unit();
            if yv <= 0.0 || kv <= 0.0 || lv <= 0.0 || mv <= 0.0 || mc <= 0.0 || p <= 0.0 {
                continue;
            }
            any = true;
            let si = sample.record_index.len();
            sample.record_index.push(idx);
            sample.firm.push(firm_ord as u32);
            sample.year.push(r.year);
            sample.k.push(kv.ln());
            sample.l.push(lv.ln());
            sample.m.push(mv.ln());
            sample.y.push(yv.ln());
            sample.s.push((mc / (p * yv)).ln());
            sample.lag.push(match prev {
                Some((py, pi)) if py == r.year - 1 => Some(pi),
                _ => None,
            });
            prev = Some((r.year, si));
        }
        if any {
            sample.n_firms += 1;
        }
    }
    if sample.is_empty() {
        return Err(Error::validation(
            "no records with complete output, capital, labor, materials, and materials cost",
        ));
    }
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(firm: &str, year: i32, vals: [Option<f64>; 4]) -> FirmYear {
        let mut r = FirmYear::empty(firm, year);
        r.sector = "100".into();
        r.country = "AA".into();
        r.output = vals[0];
        r.capital = vals[1];
        r.labor = vals[2];
        r.materials = vals[3];
        r.materials_cost = vals[3].map(|m| 0.8 * m);
        r
    }

    #[test]
    fn panel_sorts_and_rejects_duplicates() {
        let p = FirmPanel::new(vec![
            rec("b", 2001, [Some(1.0); 4]),
            rec("a", 2002, [Some(1.0); 4]),
            rec("a", 2001, [Some(1.0); 4]),
        ])
        .unwrap();
        let keys: Vec<_> = p
            .records()
            .iter()
            .map(|r| (r.firm_id.clone(), r.year))
            .collect();
        assert_eq!(
            keys,
            vec![
                ("a".to_string(), 2001),
                ("a".to_string(), 2002),
                ("b".to_string(), 2001)
            ]
        );

        let dup = FirmPanel::new(vec![
            rec("a", 2001, [Some(1.0); 4]),
            rec("a", 2001, [Some(2.0); 4]),
        ]);
        assert!(matches!(dup, Err(Error::Validation(_))));
    }

    #[test]
    fn ingest_applies_drop_rules() {
        let csv_text = "\
firm_id,year,sector,country,output,capital,labor,materials,wage_bill,materials_cost,price
f1,2001,311,US,10.0,5.0,2.0,4.0,1.0,3.0,1.0
f1,2002,311,US,-1.0,5.0,2.0,4.0,1.0,3.0,1.0
f2,2001,311,US,10.0,5.0,2.0,4.0,-1.0,3.0,1.0
f3,2001,311,US,10.0,5.0,2.0,4.0,oops,3.0,1.0
f4,abcd,311,US,10.0,5.0,2.0,4.0,1.0,3.0,1.0
f5,2001,311,US,NA,5.0,2.0,4.0,1.0,3.0,
";
        let (panel, report) = ingest_csv(csv_text.as_bytes(), &ColumnMap::default()).unwrap();
        assert_eq!(report.rows_in, 6);
        assert_eq!(report.rows_kept, 3); // f1/2001, f2/2001 (wage→missing), f5/2001
        assert_eq!(report.dropped.get("nonpositive_output"), Some(&1));
        assert_eq!(report.dropped.get("non_numeric_value"), Some(&1));
        assert_eq!(report.dropped.get("non_integer_year"), Some(&1));
        assert_eq!(report.dropped.get("nonpositive_value_to_missing"), Some(&1));
        let f2 = panel.records().iter().find(|r| r.firm_id == "f2").unwrap();
        assert_eq!(f2.wage_bill, None);
        let f5 = panel.records().iter().find(|r| r.firm_id == "f5").unwrap();
        assert_eq!(f5.output, None);
        assert_eq!(f5.price, None);
    }

    #[test]
    fn ingest_missing_required_column_is_error() {
        let csv_text = "firm,year,sector,country\nf1,2001,311,US\n";
        let err = ingest_csv(csv_text.as_bytes(), &ColumnMap::default()).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("firm_id"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_preserves_panel() {
        let mut records = Vec::new();
        for f in 0..40 {
            for y in 2000..2008 {
                let mut r = rec(&format!("f{f:03}"), y, [Some(1.5 + f as f64); 4]);
                if (f + y) % 7 == 0 {
                    r.output = None;
                }
                r.wage_bill = Some(0.123456789 + f as f64 * 1e-3);
                r.price = Some(1.0);
                records.push(r);
            }
        }
        let panel = FirmPanel::new(records).unwrap();
        let mut buf = Vec::new();
        write_csv(&panel, &mut buf).unwrap();
        let map = ColumnMap {
            cogs: None,
            xsga: None,
            depreciation: None,
            ..ColumnMap::default()
        };
        let (back, report) = ingest_csv(buf.as_slice(), &map).unwrap();
        assert_eq!(report.rows_kept as usize, panel.len());
        assert_eq!(back, panel);
    }

    #[test]
    fn us_materials_construction() {
        let mut r1 = rec("a", 2001, [Some(1.0); 4]);
        r1.cogs = Some(10.0);
        r1.xsga = Some(5.0);
        r1.wage_bill = Some(4.0);
        r1.depreciation = Some(2.0);
        let mut r2 = rec("a", 2002, [Some(1.0); 4]);
        r2.cogs = Some(1.0);
        r2.xsga = Some(1.0);
        r2.wage_bill = Some(4.0);
        r2.depreciation = Some(2.0);
        let r3 = rec("a", 2003, [Some(1.0); 4]); // missing accounting inputs
        let mut panel = FirmPanel::new(vec![r1, r2, r3]).unwrap();
        let out = construct_us_materials(&mut panel);
        assert_eq!(out.constructed, 1);
        assert_eq!(out.nonpositive, 1);
        assert_eq!(out.missing_inputs, 1);
        assert_eq!(panel.records()[0].materials_cost, Some(9.0));
        assert_eq!(panel.records()[1].materials_cost, None);
        assert_eq!(panel.records()[2].materials_cost, Some(0.8));
    }

    #[test]
    fn productivity_sample_matches_brute_force() {
        // Firms with varying missingness; brute-force the rule in the test.
        let mut records = Vec::new();
        for (f, missing_years) in [
            ("f1", vec![]),                       // keep: all present
            ("f2", vec![2001, 2002, 2003]),       // 2/5 present < 50% → drop
            ("f3", vec![2001, 2002]),             // 3/5 ≥ 50% → keep
            ("f4", vec![2001, 2002, 2004, 2005]), // 1 present → drop
        ] {
            for y in 2001..=2005 {
                let mut r = rec(f, y, [Some(2.0); 4]);
                if missing_years.contains(&y) {
                    r.output = None;
                }
                records.push(r);
            }
        }
        let panel = FirmPanel::new(records).unwrap();
        let (filtered, dropped) = productivity_sample(&panel, Var::Output);
        let firms: std::collections::BTreeSet<_> = filtered
            .records()
            .iter()
            .map(|r| r.firm_id.clone())
            .collect();
        assert_eq!(dropped, 2);
        assert_eq!(
            firms.into_iter().collect::<Vec<_>>(),
            vec!["f1".to_string(), "f3".to_string()]
        );
        // Idempotent: filtering again changes nothing.
        let (again, dropped2) = productivity_sample(&filtered, Var::Output);
        assert_eq!(again, filtered);
        assert_eq!(dropped2, 0);
    }

    #[test]
    fn interpolation_fills_short_gaps_linearly() {
        let mut records = vec![
            rec("a", 2001, [Some(1.0); 4]),
            rec("a", 2002, [None; 4]),
            rec("a", 2003, [Some(3.0); 4]),
        ];
        records[1].capital = Some(9.0); // only output missing in 2002
        let mut panel = FirmPanel::new(records).unwrap();
        let report = interpolate_gaps(&mut panel, Var::Output, 3);
        assert_eq!(report.filled, 1);
        assert_eq!(report.nullified_firms, 0);
        assert_eq!(panel.records()[1].output, Some(2.0));
    }

    #[test]
    fn interpolation_counts_missing_rows_in_gap_length() {
        // Years 2001 and 2006 observed; rows 2002..2005 absent entirely →
        // internal gap of 4 years > 3 → nullify the firm's variable.
        let records = vec![
            rec("a", 2001, [Some(1.0); 4]),
            rec("a", 2006, [Some(6.0); 4]),
        ];
        let mut panel = FirmPanel::new(records).unwrap();
        let report = interpolate_gaps(&mut panel, Var::Output, 3);
        assert_eq!(report.nullified_firms, 1);
        assert!(panel.records().iter().all(|r| r.output.is_none()));
    }

    #[test]
    fn interpolation_never_extrapolates_edges() {
        let records = vec![
            rec("a", 2001, [None; 4]),
            rec("a", 2002, [Some(2.0); 4]),
            rec("a", 2003, [Some(3.0); 4]),
            rec("a", 2004, [None; 4]),
        ];
        let mut panel = FirmPanel::new(records).unwrap();
        let report = interpolate_gaps(&mut panel, Var::Output, 3);
        assert_eq!(report.filled, 0);
        assert_eq!(panel.records()[0].output, None);
        assert_eq!(panel.records()[3].output, None);
    }

    #[test]
    fn interpolation_oracle_on_partial_year_gap() {
        // Gap with an existing row inside it: 2001 (=1.0), 2004 (=7.0);
        // row 2002 exists, row 2003 absent. Gap length = 2 ≤ 3 → fill 2002
        // at the year-weighted value 1 + (7−1)·(1/3) = 3.
        let records = vec![
            rec("a", 2001, [Some(1.0); 4]),
            rec("a", 2002, [None; 4]),
            rec("a", 2004, [Some(7.0); 4]),
        ];
        let mut panel = FirmPanel::new(records).unwrap();
        let report = interpolate_gaps(&mut panel, Var::Output, 3);
        assert_eq!(report.filled, 1);
        assert_eq!(panel.records()[1].output, Some(3.0));
    }

    #[test]
    fn estimation_sample_links_lags_within_firm() {
        let records = vec![
            rec("a", 2001, [Some(1.0); 4]),
            rec("a", 2002, [Some(1.0); 4]),
            rec("a", 2004, [Some(1.0); 4]), // year gap → no lag
            rec("b", 2002, [Some(1.0); 4]),
        ];
        let panel = FirmPanel::new(records).unwrap();
        let sample = estimation_sample(&panel).unwrap();
        assert_eq!(sample.len(), 4);
        assert_eq!(sample.lag, vec![None, Some(0), None, None]);
        assert_eq!(sample.n_lag_pairs(), 1);
        assert_eq!(sample.n_firms, 2);
    }

    #[test]
    fn estimation_sample_empty_is_error() {
        let mut r = rec("a", 2001, [Some(1.0); 4]);
        r.materials_cost = None;
        let panel = FirmPanel::new(vec![r]).unwrap();
        assert!(matches!(
            estimation_sample(&panel),
            Err(Error::Validation(_))
        ));
    }
}

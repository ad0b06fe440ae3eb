//! Results documents and their CSV / Markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corruptions::{corrupted_copy, Kind, SEVERITIES};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    all_logits, avg_corruption_accuracy, confidences, ece, temperature_rescale, CorruptionErrorTable, ECE_BINS,
};
use crate::model::ModelGraph;
use crate::tensor::argmax;

pub const SCHEMA_VERSION: u32 = 1;

/// mCE caveat carried by every report.
pub const BASELINE_NOTE: &str =
    "mCE values are normalized by this artifact's own standard-trained model and are not comparable to published numbers";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub note: String,
}

impl Meta {
    pub fn new(command: &str) -> Self {
        Self {
            tool: "corrobust".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            note: BASELINE_NOTE.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    pub kind: Kind,
    pub severity: u8,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub clean_accuracy: f64,
    pub corruption_accuracy: f64,
    /// ECE over all corrupted samples.
    pub ece: f64,
    /// Same, after rescaling by the temperature fitted on clean data.
    pub ece_rescaled: f64,
    pub temperature: f64,
    #[serde(default)]
    pub mce: Option<f64>,
    #[serde(default)]
    pub relative_mce: Option<f64>,
    pub breakdown: Vec<CellAccuracy>,
}

impl MethodResult {
    pub fn error_table(&self) -> Result<CorruptionErrorTable> {
        let mut errors: BTreeMap<Kind, [f64; 5]> = BTreeMap::new();
        for c in &self.breakdown {
            errors.entry(c.kind).or_insert([f64::NAN; 5])[c.severity as usize - 1] = 1.0 - c.accuracy;
        }
        for (k, row) in &errors {
            if row.iter().any(|v| v.is_nan()) {
                return Err(Error::MissingCell(format!(
                    "{k} is missing severities in {}",
                    self.method
                )));
            }
        }
        CorruptionErrorTable::new(1.0 - self.clean_accuracy, errors)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tables {
    pub methods: Vec<MethodResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub x: String,
    pub y: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub schema_version: u32,
    pub meta: Meta,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub tables: Tables,
    #[serde(default)]
    pub curves: Vec<Curve>,
}

impl Results {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            meta: Meta::new(command),
            config,
            tables: Tables::default(),
            curves: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Results = serde_json::from_str(text).map_err(|e| Error::Data(format!("results document: {e}")))?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("results document: {msg}")));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for m in &self.tables.methods {
            for (field, v) in [
                ("clean_accuracy", m.clean_accuracy),
                ("corruption_accuracy", m.corruption_accuracy),
                ("ece", m.ece),
                ("ece_rescaled", m.ece_rescaled),
            ] {
                if !unit(v) {
                    return bad(format!("{}: {field} = {v} is outside [0, 1]", m.method));
                }
            }
            if !(m.temperature > 0.0) {
                return bad(format!("{}: temperature must be positive", m.method));
            }
            let mut seen = std::collections::BTreeSet::new();
            for c in &m.breakdown {
                if !SEVERITIES.contains(&c.severity) {
                    return bad(format!("{}: severity {} outside 1..5", m.method, c.severity));
                }
                if !unit(c.accuracy) {
                    return bad(format!("{}: accuracy {} outside [0, 1]", m.method, c.accuracy));
                }
                if !seen.insert((c.kind, c.severity)) {
                    return bad(format!("{}: duplicate cell {} s{}", m.method, c.kind, c.severity));
                }
            }
        }
        Ok(())
    }
}

/// Clean accuracy, corruption accuracy per cell and ECE before / after
/// temperature rescaling. The temperature is fitted on the clean set only.
pub fn evaluate_method(
    method: &str,
    model: &ModelGraph,
    data: &Dataset,
    kinds: &[Kind],
    seed: u64,
) -> Result<MethodResult> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("no corruptions selected".into()));
    }
    let clean_logits = all_logits(model, &data.images)?;
    let clean_accuracy = hits(&clean_logits, &data.labels) as f64 / data.len() as f64;
    let fit = temperature_rescale(&clean_logits, &data.labels)?;
    let t = fit.t_star;

    let mut breakdown = Vec::new();
    let (mut conf1, mut ok1, mut conf_t, mut ok_t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &kind in kinds {
        for &severity in &SEVERITIES {
            let cd = corrupted_copy(data, kind, severity, seed)?;
            let logits = all_logits(model, &cd.images)?;
            breakdown.push(CellAccuracy {
                kind,
                severity,
                accuracy: hits(&logits, &cd.labels) as f64 / cd.len() as f64,
            });
            let (c, o) = confidences(&logits, &cd.labels, 1.0);
            conf1.extend(c);
            ok1.extend(o);
            let (c, o) = confidences(&logits, &cd.labels, t);
            conf_t.extend(c);
            ok_t.extend(o);
        }
    }
    let mut r = MethodResult {
        method: method.into(),
        seed: Some(seed),
        clean_accuracy,
        corruption_accuracy: 0.0,
        ece: ece(&conf1, &ok1, ECE_BINS)?.ece,
        ece_rescaled: ece(&conf_t, &ok_t, ECE_BINS)?.ece,
        temperature: t,
        mce: None,
        relative_mce: None,
        breakdown,
    };
    r.corruption_accuracy = avg_corruption_accuracy(&r.error_table()?);
    Ok(r)
}

fn hits(logits: &crate::tensor::Tensor<f32>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.sample(*i)) == y)
        .count()
}

/// Fills `mce` / `relative_mce` of every method against the named baseline;
/// cells the metric leaves undefined stay empty.
pub fn attach_mce(results: &mut Results, baseline: &str) -> Result<()> {
    let base = results
        .tables
        .methods
        .iter()
        .find(|m| m.method == baseline)
        .ok_or_else(|| Error::UnknownName(format!("no method named {baseline} in results")))?
        .error_table()?;
    for m in &mut results.tables.methods {
        let t = m.error_table()?;
        m.mce = crate::metrics::mce(&t, &base).ok();
        m.relative_mce = crate::metrics::relative_mce(&t, &base).ok();
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            _ => Err(Error::InvalidArgument(format!("unknown report format {s:?} (csv, md)"))),
        }
    }
}

pub const CSV_HEADER: &str =
    "section,method,kind,severity,clean_accuracy,corruption_accuracy,ece,ece_rescaled,mce,relative_mce,accuracy";

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

fn opt4(v: Option<f64>) -> String {
    v.map(f4).unwrap_or_default()
}

/// One summary row per method followed by one row per (method, kind,
/// severity). Numbers carry 4 decimals.
pub fn to_csv(results: &Results) -> Result<String> {
    results.validate()?;
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for m in &results.tables.methods {
        writeln!(
            s,
            "summary,{},,,{},{},{},{},{},{},",
            m.method,
            f4(m.clean_accuracy),
            f4(m.corruption_accuracy),
            f4(m.ece),
            f4(m.ece_rescaled),
            opt4(m.mce),
            opt4(m.relative_mce)
        )
        .expect("string write");
    }
    for m in &results.tables.methods {
        for c in &m.breakdown {
            writeln!(
                s,
                "breakdown,{},{},{},,,,,,,{}",
                m.method,
                c.kind,
                c.severity,
                f4(c.accuracy)
            )
            .expect("string write");
        }
    }
    Ok(s)
}

pub fn to_markdown(results: &Results) -> Result<String> {
    results.validate()?;
    let mut s = String::new();
    s.push_str("| method | clean acc | corruption acc | ECE | ECE (rescaled) | mCE | rel. mCE |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for m in &results.tables.methods {
        writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            m.method,
            f4(m.clean_accuracy),
            f4(m.corruption_accuracy),
            f4(m.ece),
            f4(m.ece_rescaled),
            opt4(m.mce),
            opt4(m.relative_mce)
        )
        .expect("string write");
    }
    for m in &results.tables.methods {
        if m.breakdown.is_empty() {
            continue;
        }
        let mut rows: BTreeMap<Kind, [Option<f64>; 5]> = BTreeMap::new();
        for c in &m.breakdown {
            rows.entry(c.kind).or_default()[c.severity as usize - 1] = Some(c.accuracy);
        }
        writeln!(s, "\n**{}** accuracy per corruption and severity\n", m.method).expect("string write");
        s.push_str("| corruption | s1 | s2 | s3 | s4 | s5 | mean |\n|---|---|---|---|---|---|---|\n");
        let mut per_sev = [(0.0, 0usize); 5];
        for (k, row) in &rows {
            let present: Vec<f64> = row.iter().flatten().copied().collect();
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            let cells: Vec<String> = row.iter().map(|v| opt4(*v)).collect();
            writeln!(s, "| {k} | {} | {} |", cells.join(" | "), f4(mean)).expect("string write");
            for (i, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    per_sev[i].0 += v;
                    per_sev[i].1 += 1;
                }
            }
        }
        let sev: Vec<String> = per_sev
            .iter()
            .map(|(t, n)| if *n > 0 { f4(t / *n as f64) } else { String::new() })
            .collect();
        writeln!(s, "| mean | {} | {} |", sev.join(" | "), f4(m.corruption_accuracy)).expect("string write");
    }
    for c in &results.curves {
        writeln!(s, "\n**{}**\n\n| {} | {} |\n|---|---|", c.name, c.x, c.y).expect("string write");
        for (x, y) in &c.points {
            writeln!(s, "| {} | {} |", f4(*x), f4(*y)).expect("string write");
        }
    }
    writeln!(s, "\n_{}_", results.meta.note).expect("string write");
    Ok(s)
}

pub fn render(results: &Results, format: Format) -> Result<String> {
    match format {
        Format::Csv => to_csv(results),
        Format::Markdown => to_markdown(results),
    }
}

/// `x,y` rows of one curve.
pub fn curve_csv(curve: &Curve) -> String {
    let mut s = format!("{},{}\n", curve.x, curve.y);
    for (x, y) in &curve.points {
        writeln!(s, "{x},{y}").expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruptions::ALL_KINDS;

    fn fake(method: &str, acc: f64) -> MethodResult {
        let breakdown = ALL_KINDS
            .iter()
            .flat_map(|&kind| {
                SEVERITIES.iter().map(move |&severity| CellAccuracy {
                    kind,
                    severity,
                    accuracy: acc - 0.01 * severity as f64,
                })
            })
            .collect();
        let mut m = MethodResult {
            method: method.into(),
            seed: Some(0),
            clean_accuracy: acc,
            corruption_accuracy: 0.0,
            ece: 0.1,
            ece_rescaled: 0.05,
            temperature: 1.5,
            mce: None,
            relative_mce: None,
            breakdown,
        };
        m.corruption_accuracy = avg_corruption_accuracy(&m.error_table().unwrap());
        m
    }

    #[test]
    fn empty_results_give_header_only() {
        let r = Results::new("eval", serde_json::Value::Null);
        assert_eq!(to_csv(&r).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn row_counts() {
        let mut r = Results::new("eval", serde_json::Value::Null);
        r.tables.methods = vec![fake("standard", 0.9), fake("rlat", 0.95)];
        attach_mce(&mut r, "standard").unwrap();
        assert_eq!(r.tables.methods[0].mce, Some(1.0));
        let csv = to_csv(&r).unwrap();
        let lines: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(lines.iter().filter(|l| l.starts_with("summary,")).count(), 2);
        assert_eq!(lines.iter().filter(|l| l.starts_with("breakdown,")).count(), 90);
        assert!(to_markdown(&r).unwrap().contains("gaussian_noise"));
    }

    #[test]
    fn schema_violations_are_rejected() {
        let mut r = Results::new("eval", serde_json::Value::Null);
        r.tables.methods = vec![fake("a", 0.9)];
        r.tables.methods[0].breakdown[0].severity = 7;
        assert!(to_csv(&r).is_err());
        let mut r = Results::new("eval", serde_json::Value::Null);
        r.schema_version = 99;
        assert!(Results::from_json(&r.to_json().unwrap()).is_err());
    }
}

//! Tabular datasets: comma-separated text with a unit-declaring header.
//!
//! ```text
//! # kind: charging
//! # light_on: 400,2400
//! time:s,freq:MHz,err:kHz
//! 0,5.329,1
//! ```
//!
//! Lines starting with `#` carry `key: value` metadata. Header fields are
//! `name[:unit]`; values are converted to SI on load (angular frequency for
//! Rabi rates). Files are always written back in SI units.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::beam::{RabiPositionScan, ScanPoint};
use crate::charging::{FreqPoint, FrequencySeries};
use crate::error::{Error, Result};
use crate::heating::{HeatingPoint, HeatingSeries};
use crate::thermometry::SidebandObservation;
use crate::units::{hz_to_angular, make_trap_context_in, SpeciesTable, TrapContext};

/// Distance between the loading hole and the output grating along the scan axis.
pub const DEFAULT_GRATING_OFFSET_UM: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Heating,
    Charging,
    SidebandScan,
    PositionScan,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Heating => "heating",
            DatasetKind::Charging => "charging",
            DatasetKind::SidebandScan => "sideband-scan",
            DatasetKind::PositionScan => "position-scan",
        }
    }

    fn schema(self) -> &'static [ColumnSpec] {
        match self {
            DatasetKind::Heating => HEATING,
            DatasetKind::Charging => CHARGING,
            DatasetKind::SidebandScan => SIDEBAND,
            DatasetKind::PositionScan => POSITION,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "heating" => Ok(DatasetKind::Heating),
            "charging" => Ok(DatasetKind::Charging),
            "sideband-scan" | "sideband" => Ok(DatasetKind::SidebandScan),
            "position-scan" | "position" => Ok(DatasetKind::PositionScan),
            other => Err(Error::invalid(format!("unknown dataset kind {other:?}"))),
        }
    }
}

struct ColumnSpec {
    name: &'static str,
    aliases: &'static [&'static str],
    /// Accepted unit labels and their factor to SI. The first entry is the
    /// unit written out.
    units: &'static [(&'static str, f64)],
    required: bool,
    check: Check,
}

#[derive(Clone, Copy)]
enum Check {
    Any,
    NonNegative,
    Positive,
    Probability,
    Count,
}

const TIME: &[(&str, f64)] = &[("s", 1.0), ("ms", 1e-3), ("us", 1e-6), ("µs", 1e-6), ("min", 60.0)];
const FREQ: &[(&str, f64)] = &[("Hz", 1.0), ("kHz", 1e3), ("MHz", 1e6)];
const RABI: &[(&str, f64)] = &[("rad/s", 1.0), ("Hz", TAU), ("kHz", TAU * 1e3), ("MHz", TAU * 1e6)];
const LENGTH: &[(&str, f64)] = &[("m", 1.0), ("um", 1e-6), ("µm", 1e-6), ("nm", 1e-9), ("mm", 1e-3)];
const PLAIN: &[(&str, f64)] = &[("", 1.0), ("quanta", 1.0)];

const HEATING: &[ColumnSpec] = &[
    ColumnSpec {
        name: "time",
        aliases: &["wait"],
        units: TIME,
        required: true,
        check: Check::NonNegative,
    },
    ColumnSpec {
        name: "nbar",
        aliases: &[],
        units: PLAIN,
        required: true,
        check: Check::NonNegative,
    },
    ColumnSpec {
        name: "nbar_err",
        aliases: &["err"],
        units: PLAIN,
        required: false,
        check: Check::Positive,
    },
];
const CHARGING: &[ColumnSpec] = &[
    ColumnSpec {
        name: "time",
        aliases: &[],
        units: TIME,
        required: true,
        check: Check::Any,
    },
    ColumnSpec {
        name: "freq",
        aliases: &[],
        units: FREQ,
        required: true,
        check: Check::Positive,
    },
    ColumnSpec {
        name: "err",
        aliases: &["freq_err"],
        units: FREQ,
        required: false,
        check: Check::Positive,
    },
];
const SIDEBAND: &[ColumnSpec] = &[
    ColumnSpec {
        name: "wait",
        aliases: &["time"],
        units: TIME,
        required: true,
        check: Check::NonNegative,
    },
    ColumnSpec {
        name: "p_red",
        aliases: &[],
        units: &[("", 1.0)],
        required: true,
        check: Check::Probability,
    },
    ColumnSpec {
        name: "p_blue",
        aliases: &[],
        units: &[("", 1.0)],
        required: true,
        check: Check::Probability,
    },
    ColumnSpec {
        name: "probe",
        aliases: &["probe_time"],
        units: TIME,
        required: false,
        check: Check::NonNegative,
    },
    ColumnSpec {
        name: "shots",
        aliases: &[],
        units: &[("", 1.0)],
        required: false,
        check: Check::Count,
    },
];
const POSITION: &[ColumnSpec] = &[
    ColumnSpec {
        name: "pos",
        aliases: &["position"],
        units: LENGTH,
        required: true,
        check: Check::Any,
    },
    ColumnSpec {
        name: "rabi",
        aliases: &[],
        units: RABI,
        required: true,
        check: Check::NonNegative,
    },
    ColumnSpec {
        name: "err",
        aliases: &["rabi_err"],
        units: RABI,
        required: false,
        check: Check::Positive,
    },
];

/// Validated table in SI units. `columns` lists the schema columns present,
/// in file order; missing optional cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
    pub metadata: BTreeMap<String, String>,
    /// 1-based file line of each row, when loaded from text.
    line_numbers: Vec<usize>,
    source: PathBuf,
}

impl Dataset {
    pub fn new(
        kind: DatasetKind,
        columns: Vec<String>,
        rows: Vec<Vec<Option<f64>>>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let text = Self {
            kind,
            columns,
            line_numbers: Vec::new(),
            rows,
            metadata,
            source: PathBuf::from("<memory>"),
        }
        .to_csv_string();
        parse_dataset(&text, kind, Path::new("<memory>"))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    fn line_of(&self, row: usize) -> usize {
        self.line_numbers.get(row).copied().unwrap_or(0)
    }

    fn meta_error(&self, key: &str, message: String) -> Error {
        Error::Parse {
            path: self.source.clone(),
            line: 0,
            column: 0,
            message: format!("metadata {key:?}: {message}"),
        }
    }

    fn meta_f64(&self, key: &str) -> Result<Option<f64>> {
        self.metadata
            .get(key)
            .map(|v| v.trim().parse::<f64>().map_err(|e| self.meta_error(key, e.to_string())))
            .transpose()
    }

    /// Trap context from `species`, `axial_freq_hz`, `radial_freq_hz` and
    /// `distance_um` metadata, if `species` is present.
    pub fn trap_context(&self) -> Result<Option<TrapContext>> {
        self.trap_context_in(&SpeciesTable::default())
    }

    pub fn trap_context_in(&self, table: &SpeciesTable) -> Result<Option<TrapContext>> {
        let Some(species) = self.metadata.get("species") else {
            return Ok(None);
        };
        let axial = self
            .meta_f64("axial_freq_hz")?
            .ok_or_else(|| self.meta_error("axial_freq_hz", "required when species is given".into()))?;
        let radial = self.meta_f64("radial_freq_hz")?.unwrap_or(axial);
        let distance = self.meta_f64("distance_um")?.unwrap_or(50.0) / 1e6;
        make_trap_context_in(
            table,
            species.trim(),
            hz_to_angular(axial),
            hz_to_angular(radial),
            distance,
        )
        .map(Some)
    }

    fn expect_kind(&self, kind: DatasetKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!(
                "dataset is {} but {} was expected",
                self.kind.as_str(),
                kind.as_str()
            )));
        }
        Ok(())
    }

    fn col(&self, name: &str) -> Vec<Option<f64>> {
        self.column(name).unwrap_or_else(|| vec![None; self.rows.len()])
    }

    pub fn to_heating_series(&self) -> Result<HeatingSeries> {
        self.expect_kind(DatasetKind::Heating)?;
        let t = self.col("time");
        let n = self.col("nbar");
        let e = self.col("nbar_err");
        let pts = (0..self.len())
            .map(|i| HeatingPoint {
                wait_time: t[i].unwrap(),
                nbar: n[i].unwrap(),
                nbar_err: e[i],
            })
            .collect();
        HeatingSeries::new(pts, self.trap_context()?)
    }

    pub fn to_frequency_series(&self) -> Result<FrequencySeries> {
        self.expect_kind(DatasetKind::Charging)?;
        let t = self.col("time");
        let f = self.col("freq");
        let e = self.col("err");
        let pts = (0..self.len())
            .map(|i| FreqPoint {
                time: t[i].unwrap(),
                freq: f[i].unwrap(),
                freq_err: e[i],
            })
            .collect();
        FrequencySeries::new(pts, self.light_on_intervals()?)
    }

    /// `light_on` metadata: `start,end` pairs separated by `;`, seconds.
    pub fn light_on_intervals(&self) -> Result<Vec<(f64, f64)>> {
        let Some(raw) = self.metadata.get("light_on") else {
            return Ok(Vec::new());
        };
        raw.split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|pair| {
                let mut it = pair.split(',').map(|v| v.trim().parse::<f64>());
                match (it.next(), it.next(), it.next()) {
                    (Some(Ok(a)), Some(Ok(b)), None) if b > a => Ok((a, b)),
                    _ => Err(self.meta_error(
                        "light_on",
                        format!("expected `start,end` with end > start, got {pair:?}"),
                    )),
                }
            })
            .collect()
    }

    /// `(wait time, observation)` pairs. The probe time comes from the
    /// `probe` column or `probe_time_s` metadata, shots from the `shots`
    /// column or metadata.
    pub fn to_sideband_observations(&self) -> Result<Vec<(f64, SidebandObservation)>> {
        self.expect_kind(DatasetKind::SidebandScan)?;
        let probe_meta = self.meta_f64("probe_time_s")?;
        let shots_meta = self.meta_f64("shots")?;
        let w = self.col("wait");
        let r = self.col("p_red");
        let b = self.col("p_blue");
        let pr = self.col("probe");
        let sh = self.col("shots");
        (0..self.len())
            .map(|i| {
                let probe = pr[i].or(probe_meta).ok_or_else(|| Error::Parse {
                    path: self.source.clone(),
                    line: self.line_of(i),
                    column: 0,
                    message: "no probe time (column `probe` or metadata `probe_time_s`)".into(),
                })?;
                let shots = sh[i].or(shots_meta).map(|s| s as u32);
                Ok((
                    w[i].unwrap(),
                    SidebandObservation::new(probe, r[i].unwrap(), b[i].unwrap(), shots)?,
                ))
            })
            .collect()
    }

    /// Scan with positions measured from the output grating.
    pub fn to_position_scan(&self) -> Result<RabiPositionScan> {
        self.expect_kind(DatasetKind::PositionScan)?;
        let x = self.col("pos");
        let r = self.col("rabi");
        let e = self.col("err");
        let pts = (0..self.len())
            .map(|i| ScanPoint {
                position: x[i].unwrap(),
                rabi: r[i].unwrap(),
                rabi_err: e[i],
            })
            .collect();
        RabiPositionScan::new(pts)
    }

    pub fn from_heating_series(series: &HeatingSeries) -> Self {
        let has_err = series.points().iter().any(|p| p.nbar_err.is_some());
        let mut columns = vec!["time".to_string(), "nbar".to_string()];
        if has_err {
            columns.push("nbar_err".into());
        }
        let rows = series
            .points()
            .iter()
            .map(|p| {
                let mut r = vec![Some(p.wait_time), Some(p.nbar)];
                if has_err {
                    r.push(p.nbar_err);
                }
                r
            })
            .collect();
        let mut metadata = BTreeMap::new();
        if let Some(ctx) = &series.context {
            metadata.insert("species".into(), ctx.species.name.clone());
            metadata.insert(
                "axial_freq_hz".into(),
                fmt_num(crate::units::angular_to_hz(ctx.axial_freq)),
            );
            metadata.insert(
                "radial_freq_hz".into(),
                fmt_num(crate::units::angular_to_hz(ctx.radial_freq)),
            );
            metadata.insert("distance_um".into(), fmt_num(ctx.ion_surface_distance * 1e6));
        }
        Self::unchecked(DatasetKind::Heating, columns, rows, metadata)
    }

    pub fn from_frequency_series(series: &FrequencySeries) -> Self {
        let has_err = series.points().iter().any(|p| p.freq_err.is_some());
        let mut columns = vec!["time".to_string(), "freq".to_string()];
        if has_err {
            columns.push("err".into());
        }
        let rows = series
            .points()
            .iter()
            .map(|p| {
                let mut r = vec![Some(p.time), Some(p.freq)];
                if has_err {
                    r.push(p.freq_err);
                }
                r
            })
            .collect();
        let mut metadata = BTreeMap::new();
        if !series.light_on_intervals().is_empty() {
            let s: Vec<String> = series
                .light_on_intervals()
                .iter()
                .map(|(a, b)| format!("{},{}", fmt_num(*a), fmt_num(*b)))
                .collect();
            metadata.insert("light_on".into(), s.join("; "));
        }
        Self::unchecked(DatasetKind::Charging, columns, rows, metadata)
    }

    pub fn from_sideband_observations(obs: &[(f64, SidebandObservation)]) -> Self {
        let columns = ["wait", "p_red", "p_blue", "probe", "shots"].map(String::from).to_vec();
        let rows = obs
            .iter()
            .map(|(w, o)| {
                vec![
                    Some(*w),
                    Some(o.p_red),
                    Some(o.p_blue),
                    Some(o.probe_time),
                    o.shots.map(f64::from),
                ]
            })
            .collect();
        Self::unchecked(DatasetKind::SidebandScan, columns, rows, BTreeMap::new())
    }

    pub fn from_position_scan(scan: &RabiPositionScan) -> Self {
        let has_err = scan.points().iter().any(|p| p.rabi_err.is_some());
        let mut columns = vec!["pos".to_string(), "rabi".to_string()];
        if has_err {
            columns.push("err".into());
        }
        let rows = scan
            .points()
            .iter()
            .map(|p| {
                let mut r = vec![Some(p.position), Some(p.rabi)];
                if has_err {
                    r.push(p.rabi_err);
                }
                r
            })
            .collect();
        let metadata = BTreeMap::from([("origin".to_string(), "grating".to_string())]);
        Self::unchecked(DatasetKind::PositionScan, columns, rows, metadata)
    }

    fn unchecked(
        kind: DatasetKind,
        columns: Vec<String>,
        rows: Vec<Vec<Option<f64>>>,
        metadata: BTreeMap<String, String>,
    ) -> Self {
        Self {
            kind,
            columns,
            line_numbers: Vec::new(),
            rows,
            metadata,
            source: PathBuf::from("<memory>"),
        }
    }

    /// Text form in SI units. `kind` is always the first metadata line.
    pub fn to_csv_string(&self) -> String {
        let schema = self.kind.schema();
        let mut out = String::new();
        let _ = writeln!(out, "# kind: {}", self.kind.as_str());
        for (k, v) in &self.metadata {
            if k != "kind" {
                let _ = writeln!(out, "# {k}: {v}");
            }
        }
        let header: Vec<String> = self
            .columns
            .iter()
            .map(|c| {
                let unit = schema.iter().find(|s| s.name == c).map_or("", |s| s.units[0].0);
                if unit.is_empty() {
                    c.clone()
                } else {
                    format!("{c}:{unit}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", header.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.map_or(String::new(), fmt_num)).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

/// Shortest text that parses back to the same `f64`.
/// File value to SI. Decimal sub-units divide by an exact integer so that
/// e.g. 71 um loads as the double nearest 71e-6.
fn to_si(v: f64, factor: f64) -> f64 {
    if factor < 1.0 {
        v / (1.0 / factor).round()
    } else {
        v * factor
    }
}

fn from_si(v: f64, factor: f64) -> f64 {
    if factor < 1.0 {
        v * (1.0 / factor).round()
    } else {
        v / factor
    }
}

pub fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text, kind, path)
}

/// Parses dataset text. A `kind` metadata line, when present, must match.
pub fn parse_dataset(text: &str, kind: DatasetKind, path: &Path) -> Result<Dataset> {
    let perr = |line: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };

    let mut metadata = BTreeMap::new();
    let mut header: Option<(usize, Vec<(usize, f64)>)> = None;
    let mut columns = Vec::new();
    let mut rows = Vec::new();
    let mut line_numbers = Vec::new();
    let mut last_key: Option<(f64, usize)> = None;
    let schema = kind.schema();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once(':') {
                let k = k.trim().to_string();
                let v = v.trim().to_string();
                if k == "kind" {
                    let declared: DatasetKind =
                        v.parse().map_err(|_| perr(line_no, 1, format!("unknown kind {v:?}")))?;
                    if declared != kind {
                        return Err(perr(
                            line_no,
                            1,
                            format!(
                                "file declares kind {} but {} was requested",
                                declared.as_str(),
                                kind.as_str()
                            ),
                        ));
                    }
                }
                metadata.insert(k, v);
            }
            continue;
        }
        let fields = split_fields(line, line_no, &perr)?;
        match &header {
            None => {
                let mut map = Vec::new();
                for (ci, field) in fields.iter().enumerate() {
                    let (name, unit) = match field.split_once(':') {
                        Some((n, u)) => (n.trim(), u.trim()),
                        None => (field.trim(), ""),
                    };
                    let Some((si, spec)) = schema
                        .iter()
                        .enumerate()
                        .find(|(_, s)| s.name == name || s.aliases.contains(&name))
                    else {
                        return Err(perr(
                            line_no,
                            ci + 1,
                            format!("unknown column {name:?} for {} data", kind.as_str()),
                        ));
                    };
                    if columns.contains(&spec.name.to_string()) {
                        return Err(perr(line_no, ci + 1, format!("duplicate column {:?}", spec.name)));
                    }
                    let Some(&(_, factor)) = spec.units.iter().find(|(u, _)| *u == unit) else {
                        let allowed: Vec<&str> = spec.units.iter().map(|u| u.0).filter(|u| !u.is_empty()).collect();
                        return Err(perr(
                            line_no,
                            ci + 1,
                            format!(
                                "cannot parse unit {unit:?} for column {:?}; expected one of {:?}",
                                spec.name, allowed
                            ),
                        ));
                    };
                    columns.push(spec.name.to_string());
                    map.push((si, factor));
                }
                if let Some(missing) = schema
                    .iter()
                    .find(|s| s.required && !columns.iter().any(|c| c == s.name))
                {
                    return Err(perr(line_no, 0, format!("missing required column {:?}", missing.name)));
                }
                header = Some((line_no, map));
            }
            Some((_, map)) => {
                if fields.len() != map.len() {
                    return Err(perr(
                        line_no,
                        fields.len().min(map.len()) + 1,
                        format!("expected {} fields, found {}", map.len(), fields.len()),
                    ));
                }
                let mut row = Vec::with_capacity(map.len());
                for (ci, (field, &(si, factor))) in fields.iter().zip(map).enumerate() {
                    let spec = &schema[si];
                    let cell = field.trim();
                    if cell.is_empty() {
                        if spec.required {
                            return Err(perr(
                                line_no,
                                ci + 1,
                                format!("empty value in required column {:?}", spec.name),
                            ));
                        }
                        row.push(None);
                        continue;
                    }
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| perr(line_no, ci + 1, format!("cannot parse {cell:?} as a number")))?;
                    if !v.is_finite() {
                        return Err(perr(line_no, ci + 1, format!("non-finite value {cell:?}")));
                    }
                    let ok = match spec.check {
                        Check::Any => true,
                        Check::NonNegative => v >= 0.0,
                        Check::Positive => v > 0.0,
                        Check::Probability => (0.0..=1.0).contains(&v),
                        Check::Count => v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64,
                    };
                    if !ok {
                        let what = match spec.check {
                            Check::NonNegative => "must be >= 0",
                            Check::Positive => "must be > 0",
                            Check::Probability => "must lie in [0, 1]",
                            Check::Count => "must be a positive integer",
                            Check::Any => unreachable!(),
                        };
                        return Err(perr(line_no, ci + 1, format!("{:?} = {v} {what}", spec.name)));
                    }
                    row.push(Some(to_si(v, factor)));
                }
                // first column of every schema is the ordering key
                let key_col = columns.iter().position(|c| c == schema[0].name).unwrap();
                let key = row[key_col].unwrap();
                if let Some((prev, _)) = last_key {
                    if !(key > prev) {
                        let cell = |v: f64| fmt_num(from_si(v, map[key_col].1));
                        return Err(perr(
                            line_no,
                            key_col + 1,
                            format!(
                                "{} column must be strictly increasing: row {} ({}) does not follow {}",
                                schema[0].name,
                                rows.len() + 1,
                                cell(key),
                                cell(prev)
                            ),
                        ));
                    }
                }
                last_key = Some((key, line_no));
                rows.push(row);
                line_numbers.push(line_no);
            }
        }
    }
    if header.is_none() {
        return Err(perr(text.lines().count().max(1), 0, "missing header row".into()));
    }

    let mut ds = Dataset {
        kind,
        columns,
        rows,
        metadata,
        line_numbers,
        source: path.to_path_buf(),
    };
    ds.metadata.remove("kind");
    if kind == DatasetKind::Charging {
        // light-on intervals share the time column's unit
        let (_, map) = header.as_ref().unwrap();
        let ti = ds.columns.iter().position(|c| c == "time").unwrap();
        let factor = map[ti].1;
        if factor != 1.0 {
            let ivs = ds.light_on_intervals()?;
            let s: Vec<String> = ivs
                .iter()
                .map(|(a, b)| format!("{},{}", fmt_num(to_si(*a, factor)), fmt_num(to_si(*b, factor))))
                .collect();
            ds.metadata.insert("light_on".into(), s.join("; "));
        }
        ds.light_on_intervals()?;
    }
    if kind == DatasetKind::PositionScan {
        normalize_origin(&mut ds)?;
    }
    Ok(ds)
}

fn split_fields(line: &str, line_no: usize, perr: &impl Fn(usize, usize, String) -> Error) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(line.as_bytes());
    match rdr.records().next() {
        Some(Ok(rec)) => Ok(rec.iter().map(|s| s.to_string()).collect()),
        Some(Err(e)) => Err(perr(line_no, 1, e.to_string())),
        None => Ok(Vec::new()),
    }
}

/// Rewrites positions to distances from the output grating.
fn normalize_origin(ds: &mut Dataset) -> Result<()> {
    let origin = ds.metadata.get("origin").map(|s| s.trim().to_string()).ok_or_else(|| {
        ds.meta_error(
            "origin",
            "position scans must declare `origin: loading_hole` or `origin: grating`".into(),
        )
    })?;
    match origin.as_str() {
        "grating" => Ok(()),
        "loading_hole" => {
            let offset = ds.meta_f64("grating_offset_um")?.unwrap_or(DEFAULT_GRATING_OFFSET_UM) / 1e6;
            let pi = ds.columns.iter().position(|c| c == "pos").unwrap();
            for row in &mut ds.rows {
                row[pi] = row[pi].map(|x| offset - x);
            }
            ds.rows.reverse();
            ds.line_numbers.reverse();
            ds.metadata.insert("origin".into(), "grating".into());
            ds.metadata.remove("grating_offset_um");
            Ok(())
        }
        other => Err(ds.meta_error("origin", format!("expected loading_hole or grating, got {other:?}"))),
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(io)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, ds.to_csv_string().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, kind: DatasetKind) -> Result<Dataset> {
        parse_dataset(text, kind, Path::new("t.csv"))
    }

    #[test]
    fn heating_file_loads() {
        let ds = parse(
            "time:ms,nbar,nbar_err\n0,0.1,0.02\n0.5,0.5,0.05\n1.0,0.9,0.08\n",
            DatasetKind::Heating,
        )
        .unwrap();
        assert_eq!(ds.len(), 3);
        let s = ds.to_heating_series().unwrap();
        assert_eq!(s.points()[1].wait_time, 0.5e-3);
        assert_eq!(s.points()[2].nbar_err, Some(0.08));
    }

    #[test]
    fn shuffled_time_names_row() {
        let err = parse(
            "# kind: heating\ntime:s,nbar\n0,0.1\n2,0.5\n1,0.3\n",
            DatasetKind::Heating,
        )
        .unwrap_err();
        match err {
            Error::Parse {
                line, column, message, ..
            } => {
                assert_eq!((line, column), (5, 1));
                assert!(message.contains("row 3"), "{message}");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn mhz_frequencies_scaled() {
        let ds = parse(
            "# light_on: 400,2400\ntime:s,freq:MHz,err:kHz\n0,5.329,1\n15,5.33,1\n",
            DatasetKind::Charging,
        )
        .unwrap();
        let s = ds.to_frequency_series().unwrap();
        assert_eq!(s.points()[0].freq, 5.329e6);
        assert_eq!(s.points()[1].freq_err, Some(1e3));
        assert_eq!(s.light_on_intervals(), &[(400.0, 2400.0)]);
    }

    #[test]
    fn light_on_follows_time_unit() {
        let ds = parse(
            "# light_on: 6.5,40\ntime:min,freq:Hz\n0,5e6\n1,5e6\n",
            DatasetKind::Charging,
        )
        .unwrap();
        assert_eq!(ds.light_on_intervals().unwrap(), vec![(390.0, 2400.0)]);
    }

    #[test]
    fn diagnostics() {
        let cases = [
            (
                "nbar\n0.1\n",
                DatasetKind::Heating,
                1,
                0,
                "missing required column \"time\"",
            ),
            ("time:h,nbar\n0,0.1\n", DatasetKind::Heating, 1, 1, "cannot parse unit"),
            (
                "time:s,nbar\n0,abc\n",
                DatasetKind::Heating,
                2,
                2,
                "cannot parse \"abc\"",
            ),
            ("time:s,nbar,foo\n", DatasetKind::Heating, 1, 3, "unknown column"),
            (
                "time:s,nbar\n0,0.1,3\n",
                DatasetKind::Heating,
                2,
                3,
                "expected 2 fields",
            ),
            (
                "wait:s,p_red,p_blue\n0,1.2,0.5\n",
                DatasetKind::SidebandScan,
                2,
                2,
                "[0, 1]",
            ),
            (
                "# kind: charging\ntime:s,nbar\n",
                DatasetKind::Heating,
                1,
                1,
                "declares kind",
            ),
        ];
        for (text, kind, l, c, needle) in cases {
            match parse(text, kind) {
                Err(Error::Parse {
                    line, column, message, ..
                }) => {
                    assert_eq!((line, column), (l, c), "{text:?}: {message}");
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("{text:?} -> {other:?}"),
            }
        }
    }

    #[test]
    fn position_origin_required_and_converted() {
        assert!(parse("pos:um,rabi:kHz\n1,2\n", DatasetKind::PositionScan).is_err());
        let ds = parse(
            "# origin: loading_hole\npos:um,rabi:kHz\n68,50\n69,100\n70,60\n",
            DatasetKind::PositionScan,
        )
        .unwrap();
        let scan = ds.to_position_scan().unwrap();
        let xs: Vec<f64> = scan.points().iter().map(|p| p.position).collect();
        assert!((xs[0] - 10e-6).abs() < 1e-18 && (xs[2] - 12e-6).abs() < 1e-18, "{xs:?}");
        assert!((scan.points()[1].rabi - TAU * 100e3).abs() < 1e-9);
        assert_eq!(ds.metadata["origin"], "grating");
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let pts = (0..50)
            .map(|i| FreqPoint {
                time: i as f64 * 15.0,
                freq: 5.329e6 + (i as f64).sin() * 1_234.567_890_123,
                freq_err: Some(1e3 / 3.0),
            })
            .collect();
        let s = FrequencySeries::new(pts, vec![(400.0, 2400.0)]).unwrap();
        write_dataset(&path, &Dataset::from_frequency_series(&s)).unwrap();
        let back = load_dataset(&path, DatasetKind::Charging)
            .unwrap()
            .to_frequency_series()
            .unwrap();
        assert_eq!(back, s);
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn sideband_round_trip_and_probe_metadata() {
        let obs = vec![
            (0.0, SidebandObservation::new(1e-5, 0.075, 0.75, Some(400)).unwrap()),
            (1e-3, SidebandObservation::new(1e-5, 0.3, 0.6, Some(400)).unwrap()),
        ];
        let text = Dataset::from_sideband_observations(&obs).to_csv_string();
        let back = parse(&text, DatasetKind::SidebandScan)
            .unwrap()
            .to_sideband_observations()
            .unwrap();
        assert_eq!(back, obs);
        let ds = parse(
            "# probe_time_s: 4e-6\nwait:s,p_red,p_blue\n0,0.1,0.5\n",
            DatasetKind::SidebandScan,
        )
        .unwrap();
        let o = ds.to_sideband_observations().unwrap();
        assert_eq!((o[0].1.probe_time, o[0].1.shots), (4e-6, None));
        let ds = parse("wait:s,p_red,p_blue\n0,0.1,0.5\n", DatasetKind::SidebandScan).unwrap();
        assert!(ds.to_sideband_observations().is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = load_dataset(Path::new("/nonexistent/x.csv"), DatasetKind::Heating).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn number_format_round_trips() {
        for v in [
            0.0,
            1.0,
            -2.5,
            1.602176634e-19,
            5.329e6,
            1e300,
            0.1 + 0.2,
            123456789012345678.0,
        ] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
        }
    }
}

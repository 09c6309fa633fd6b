//! Logged rows, the CSV format, run comparisons, summaries and plot scripts.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

/// Version of the CSV column layout below. Bumped on any change to
/// [`CSV_HEADER`].
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: &str =
    "t,v_dc,i_dc_g,i_dc_m,p_g,q_g,p_m,q_m,v_g_mag,v_g_ang,v_m_mag,v_m_ang,e_g_d,e_g_q,e_m_d,e_m_q";

pub const COLUMNS: [&str; 16] = [
    "t", "v_dc", "i_dc_g", "i_dc_m", "p_g", "q_g", "p_m", "q_m", "v_g_mag", "v_g_ang", "v_m_mag",
    "v_m_ang", "e_g_d", "e_g_q", "e_m_d", "e_m_q",
];

/// One logged instant. Powers are at the PCC, positive into the AC
/// network; DC currents are positive when they discharge the capacitor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OutputRow {
    pub t: f64,
    pub v_dc: f64,
    pub i_dc_g: f64,
    pub i_dc_m: f64,
    pub p_g: f64,
    pub q_g: f64,
    pub p_m: f64,
    pub q_m: f64,
    pub v_g_mag: f64,
    pub v_g_ang: f64,
    pub v_m_mag: f64,
    pub v_m_ang: f64,
    pub e_g_d: f64,
    pub e_g_q: f64,
    pub e_m_d: f64,
    pub e_m_q: f64,
}

impl OutputRow {
    pub fn values(&self) -> [f64; 16] {
        [
            self.t, self.v_dc, self.i_dc_g, self.i_dc_m, self.p_g, self.q_g, self.p_m, self.q_m,
            self.v_g_mag, self.v_g_ang, self.v_m_mag, self.v_m_ang, self.e_g_d, self.e_g_q,
            self.e_m_d, self.e_m_q,
        ]
    }

    pub fn from_values(v: [f64; 16]) -> Self {
        Self {
            t: v[0],
            v_dc: v[1],
            i_dc_g: v[2],
            i_dc_m: v[3],
            p_g: v[4],
            q_g: v[5],
            p_m: v[6],
            q_m: v[7],
            v_g_mag: v[8],
            v_g_ang: v[9],
            v_m_mag: v[10],
            v_m_ang: v[11],
            e_g_d: v[12],
            e_g_q: v[13],
            e_m_d: v[14],
            e_m_q: v[15],
        }
    }

    pub fn to_csv_line(&self) -> String {
        let mut s = String::with_capacity(256);
        for (i, v) in self.values().iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", nine_digits(*v));
        }
        s
    }
}

/// Round to 9 significant digits; prints via `Display` stay short.
pub fn nine_digits(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Streams rows to any writer, header first.
pub struct CsvWriter<W: Write> {
    out: W,
    rows: usize,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{CSV_HEADER}")?;
        Ok(Self { out, rows: 0 })
    }

    pub fn write_row(&mut self, row: &OutputRow) -> io::Result<()> {
        self.rows += 1;
        writeln!(self.out, "{}", row.to_csv_line())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("cannot read CSV: {0}")]
    Io(#[from] io::Error),
    #[error("CSV is empty")]
    Empty,
    #[error("unexpected CSV header `{0}`")]
    BadHeader(String),
    #[error("line {line}: {message}")]
    BadRow { line: usize, message: String },
}

/// Read a CSV written by [`CsvWriter`].
pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<OutputRow>, CsvError> {
    let mut lines = input.lines();
    let header = lines.next().ok_or(CsvError::Empty)??;
    if header.trim_end() != CSV_HEADER {
        return Err(CsvError::BadHeader(header));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut v = [0.0; 16];
        let mut n = 0;
        for field in line.split(',') {
            if n == 16 {
                n += 1;
                break;
            }
            v[n] = field.trim().parse().map_err(|_| CsvError::BadRow {
                line: i + 2,
                message: format!("cannot parse `{field}`"),
            })?;
            n += 1;
        }
        if n != 16 {
            return Err(CsvError::BadRow {
                line: i + 2,
                message: format!("expected 16 fields, found {n}"),
            });
        }
        rows.push(OutputRow::from_values(v));
    }
    Ok(rows)
}

/// Deviation of one column between two runs on the same time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDeviation {
    pub column: &'static str,
    pub max_abs: f64,
    /// Time of the largest deviation.
    pub t_max: f64,
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: usize,
    pub columns: Vec<ColumnDeviation>,
}

impl CompareReport {
    pub fn column(&self, name: &str) -> &ColumnDeviation {
        self.columns
            .iter()
            .find(|c| c.column == name)
            .unwrap_or_else(|| panic!("no column {name}"))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:>14} {:>12} {:>14}\n", "column", "max |dev|", "at t [s]", "rms");
        for c in &self.columns {
            let _ = writeln!(s, "{:<10} {:>14.6e} {:>12.4} {:>14.6e}", c.column, c.max_abs, c.t_max, c.rms);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompareError {
    #[error("runs have different lengths ({0} vs {1} rows)")]
    Length(usize, usize),
    #[error("time grids differ at row {row}: {a} s vs {b} s")]
    Grid { row: usize, a: f64, b: f64 },
}

/// Per-column max and RMS of `b - a`, excluding the time column.
pub fn compare(a: &[OutputRow], b: &[OutputRow]) -> Result<CompareReport, CompareError> {
    if a.len() != b.len() {
        return Err(CompareError::Length(a.len(), b.len()));
    }
    for (row, (ra, rb)) in a.iter().zip(b).enumerate() {
        if (ra.t - rb.t).abs() > 1e-9 * ra.t.abs().max(1.0) {
            return Err(CompareError::Grid { row, a: ra.t, b: rb.t });
        }
    }
    let mut columns = Vec::with_capacity(15);
    for (k, name) in COLUMNS.iter().enumerate().skip(1) {
        let mut max_abs = 0.0f64;
        let mut t_max = a.first().map(|r| r.t).unwrap_or(0.0);
        let mut sq = 0.0;
        for (ra, rb) in a.iter().zip(b) {
            let mut d = rb.values()[k] - ra.values()[k];
            if name.ends_with("_ang") {
                d = crate::phasor::wrap_angle(d);
            }
            sq += d * d;
            if d.abs() > max_abs {
                max_abs = d.abs();
                t_max = ra.t;
            }
        }
        let rms = if a.is_empty() { 0.0 } else { (sq / a.len() as f64).sqrt() };
        columns.push(ColumnDeviation {
            column: name,
            max_abs,
            t_max,
            rms,
        });
    }
    Ok(CompareReport {
        rows: a.len(),
        columns,
    })
}

/// Time after `t_event` at which `v_dc` last entered the band
/// `|v_dc - target| <= band` and stayed there until `t_end` (exclusive).
/// `None` if it is outside the band at the end of the window.
pub fn settling_time(rows: &[OutputRow], t_event: f64, t_end: f64, target: f64, band: f64) -> Option<f64> {
    let window: Vec<&OutputRow> = rows.iter().filter(|r| r.t >= t_event && r.t < t_end).collect();
    let last = window.last()?;
    if (last.v_dc - target).abs() > band {
        return None;
    }
    let mut settled_at = window[0].t;
    for pair in window.windows(2) {
        if (pair[0].v_dc - target).abs() > band {
            settled_at = pair[1].t;
        }
    }
    Some(settled_at - t_event)
}

/// Final values and v_dc settling times after each event.
pub fn summary_text(rows: &[OutputRow], event_times: &[f64], v_dc_ref: f64, band: f64) -> String {
    let mut s = String::new();
    let Some(last) = rows.last() else {
        return "no rows logged\n".into();
    };
    let _ = writeln!(s, "final state at t = {} s", last.t);
    for (name, v) in COLUMNS.iter().zip(last.values()).skip(1) {
        let _ = writeln!(s, "  {name:<8} = {v:.6}");
    }
    let mut times: Vec<f64> = event_times.to_vec();
    times.dedup();
    for (i, &t) in times.iter().enumerate() {
        let t_end = times.get(i + 1).copied().unwrap_or(f64::INFINITY);
        match settling_time(rows, t, t_end, v_dc_ref, band) {
            Some(ts) => {
                let _ = writeln!(s, "v_dc settles within ±{band} V of {v_dc_ref} V {ts:.3} s after the event at {t} s");
            }
            None => {
                let _ = writeln!(s, "v_dc does not settle within ±{band} V of {v_dc_ref} V after the event at {t} s");
            }
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotLayout {
    /// v_dc, i_dc_m, i_dc_g.
    DcCurrents,
    /// v_dc, p_g, p_m.
    Powers,
}

impl PlotLayout {
    /// Powers when the microgrid power changes sign during the run,
    /// DC currents otherwise.
    pub fn detect(rows: &[OutputRow]) -> Self {
        let threshold = rows.iter().map(|r| r.p_m.abs()).fold(0.0, f64::max) * 0.01;
        let pos = rows.iter().any(|r| r.p_m > threshold && threshold > 0.0);
        let neg = rows.iter().any(|r| r.p_m < -threshold && threshold > 0.0);
        if pos && neg {
            PlotLayout::Powers
        } else {
            PlotLayout::DcCurrents
        }
    }
}

/// A self-contained matplotlib script drawing three stacked panels.
pub fn plot_script(csv_path: &str, layout: PlotLayout, image_path: &str) -> String {
    let panels: [(&str, &str, f64, &str); 3] = match layout {
        PlotLayout::DcCurrents => [
            ("v_dc", "V_dc [V]", 1.0, "DC-link voltage"),
            ("i_dc_m", "I_dc-m [A]", 1.0, "DC current into the MSC"),
            ("i_dc_g", "I_dc-g [A]", 1.0, "DC current into the GSC"),
        ],
        PlotLayout::Powers => [
            ("v_dc", "V_dc [V]", 1.0, "DC-link voltage"),
            ("p_g", "P_g [kW]", 1e-3, "Grid side converter power"),
            ("p_m", "P_m [kW]", 1e-3, "Microgrid side converter power"),
        ],
    };
    let mut s = String::new();
    s.push_str("#!/usr/bin/env python3\n");
    let _ = writeln!(s, "# Generated by btbsim. CSV schema version {CSV_SCHEMA_VERSION}.");
    s.push_str("import csv\nimport matplotlib\nmatplotlib.use(\"Agg\")\nimport matplotlib.pyplot as plt\n\n");
    let _ = writeln!(s, "CSV_PATH = {csv_path:?}");
    let _ = writeln!(s, "IMAGE_PATH = {image_path:?}");
    let _ = writeln!(s, "EXPECTED_HEADER = {CSV_HEADER:?}.split(\",\")\n");
    s.push_str(
        "with open(CSV_PATH, newline=\"\") as f:\n    reader = csv.reader(f)\n    header = next(reader)\n    if header != EXPECTED_HEADER:\n        raise SystemExit(\"unexpected CSV header\")\n    cols = {name: [] for name in header}\n    for row in reader:\n        for name, value in zip(header, row):\n            cols[name].append(float(value))\n\n",
    );
    s.push_str("fig, axes = plt.subplots(3, 1, sharex=True, figsize=(8, 8))\n");
    for (i, (col, label, scale, title)) in panels.iter().enumerate() {
        let _ = writeln!(s, "axes[{i}].plot(cols[\"t\"], [v * {scale:?} for v in cols[{col:?}]])");
        let _ = writeln!(s, "axes[{i}].set_ylabel({label:?})");
        let _ = writeln!(s, "axes[{i}].set_title({title:?})");
        let _ = writeln!(s, "axes[{i}].grid(True)");
    }
    s.push_str("axes[2].set_xlabel(\"Time [s]\")\nfig.tight_layout()\nfig.savefig(IMAGE_PATH, dpi=150)\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, v_dc: f64, p_m: f64) -> OutputRow {
        OutputRow {
            t,
            v_dc,
            p_m,
            ..Default::default()
        }
    }

    #[test]
    fn header_matches_columns() {
        assert_eq!(COLUMNS.join(","), CSV_HEADER);
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(nine_digits(600.000123456), 600.000123);
        assert_eq!(nine_digits(-1.23456789012e-5), -1.23456789e-5);
        assert_eq!(nine_digits(0.0), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(0.0, 600.0, 0.0), row(0.001, 599.5, 45000.0)];
        let mut w = CsvWriter::new(Vec::new()).unwrap();
        for r in &rows {
            w.write_row(r).unwrap();
        }
        let text = w.into_inner();
        let back = read_csv(&text[..]).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn bad_csv_inputs() {
        assert!(matches!(read_csv(&b""[..]), Err(CsvError::Empty)));
        assert!(matches!(read_csv(&b"a,b\n"[..]), Err(CsvError::BadHeader(_))));
        let text = format!("{CSV_HEADER}\n1,2\n");
        assert!(matches!(read_csv(text.as_bytes()), Err(CsvError::BadRow { line: 2, .. })));
    }

    #[test]
    fn comparison_statistics() {
        let a = vec![row(0.0, 600.0, 0.0), row(1.0, 600.0, 0.0)];
        let b = vec![row(0.0, 601.0, 0.0), row(1.0, 597.0, 0.0)];
        let rep = compare(&a, &b).unwrap();
        let c = rep.column("v_dc");
        assert_eq!(c.max_abs, 3.0);
        assert_eq!(c.t_max, 1.0);
        assert!((c.rms - 5.0f64.sqrt()).abs() < 1e-12);
        assert!(compare(&a, &b[..1]).is_err());
    }

    #[test]
    fn settling() {
        let rows: Vec<_> = (0..100)
            .map(|k| row(k as f64 * 0.1, if k < 30 { 590.0 } else { 600.2 }, 0.0))
            .collect();
        let ts = settling_time(&rows, 1.0, f64::INFINITY, 600.0, 1.0).unwrap();
        assert!((ts - 2.0).abs() < 1e-9);
        assert_eq!(settling_time(&rows, 0.0, 2.0, 600.0, 1.0), None);
    }

    #[test]
    fn layout_detection() {
        let a = vec![row(0.0, 600.0, 0.0), row(1.0, 600.0, 45e3), row(2.0, 600.0, 20e3)];
        let b = vec![row(0.0, 600.0, 0.0), row(1.0, 600.0, 20e3), row(2.0, 600.0, -20e3)];
        assert_eq!(PlotLayout::detect(&a), PlotLayout::DcCurrents);
        assert_eq!(PlotLayout::detect(&b), PlotLayout::Powers);
    }

    #[test]
    fn plot_script_mentions_panels() {
        let s = plot_script("a.csv", PlotLayout::Powers, "a.png");
        assert!(s.contains("cols[\"p_g\"]") && s.contains("cols[\"p_m\"]"));
        let s = plot_script("a.csv", PlotLayout::DcCurrents, "a.png");
        assert!(s.contains("cols[\"i_dc_m\"]") && s.contains("cols[\"i_dc_g\"]"));
    }
}

//! Touchstone v1 two-port files, RI format.

use num_complex::Complex64;

use crate::datastore::DatastoreError;
use crate::vna::{ComplexTrace, FrequencyGrid, PortPath};

pub const OPTION_LINE: &str = "# Hz S RI R 50";
const SIG_DIGITS: usize = 9;

/// `%.{digits}g`-style formatting: shortest of fixed/scientific, trailing
/// zeros stripped.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", digits.saturating_sub(1), x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", strip_zeros(mantissa), sign, exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{x:.decimals$}"))
    }
}

fn strip_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Parsed two-port data. Parameters are stored as S11, S21, S12, S22.
#[derive(Debug, Clone, PartialEq)]
pub struct TouchstoneFile {
    pub frequencies_hz: Vec<f64>,
    pub reference_ohms: f64,
    pub s: Vec<[Complex64; 4]>,
    pub path: Option<PortPath>,
}

impl TouchstoneFile {
    pub fn s21_trace(&self) -> Result<ComplexTrace, DatastoreError> {
        let grid = FrequencyGrid::from_frequencies(&self.frequencies_hz)
            .map_err(|e| DatastoreError::Parse { line: 0, message: e.to_string() })?;
        let values = self.s.iter().map(|row| row[1]).collect();
        ComplexTrace::new(grid, values, self.path.clone().unwrap_or_else(PortPath::direct))
            .map_err(|e| DatastoreError::Parse { line: 0, message: e.to_string() })
    }
}

/// Serialize one measured S21 trace. Unmeasured parameters are written as
/// zero.
pub fn write_touchstone(trace: &ComplexTrace) -> Result<String, DatastoreError> {
    if trace.values().iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(DatastoreError::NonFinite("trace".into()));
    }
    let path = trace.path();
    let mut out = String::new();
    out.push_str("! mpada s2p\n");
    out.push_str(&format!("! path {} {}\n", path.tx, path.rx));
    out.push_str(OPTION_LINE);
    out.push('\n');
    for (i, v) in trace.values().iter().enumerate() {
        let f = trace.grid().frequency(i);
        let g = |x: f64| format_significant(x, SIG_DIGITS);
        out.push_str(&format!("{} 0 0 {} {} 0 0 0 0\n", f, g(v.re), g(v.im)));
    }
    Ok(out)
}

fn unit_scale(token: &str) -> Option<f64> {
    match token {
        "HZ" => Some(1.0),
        "KHZ" => Some(1e3),
        "MHZ" => Some(1e6),
        "GHZ" => Some(1e9),
        _ => None,
    }
}

struct Options {
    scale: f64,
    reference: f64,
}

fn parse_options(line: &str, line_no: usize) -> Result<Options, DatastoreError> {
    let err = |m: String| DatastoreError::Parse { line: line_no, message: m };
    // Version 1 defaults.
    let mut scale = 1e9;
    let mut format = "MA".to_string();
    let mut reference = 50.0;
    let tokens: Vec<String> = line[1..].split_whitespace().map(str::to_ascii_uppercase).collect();
    let mut i = 0;
    while i < tokens.len() {
        let t = tokens[i].as_str();
        if let Some(s) = unit_scale(t) {
            scale = s;
        } else if matches!(t, "RI" | "MA" | "DB") {
            format = t.to_string();
        } else if t == "R" {
            i += 1;
            reference = tokens
                .get(i)
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| err("R must be followed by an impedance".into()))?;
        } else if matches!(t, "Y" | "Z" | "H" | "G") {
            return Err(DatastoreError::UnsupportedFormat(format!("parameter type {t}")));
        } else if t != "S" {
            return Err(err(format!("unknown option {t:?}")));
        }
        i += 1;
    }
    if format != "RI" {
        return Err(DatastoreError::UnsupportedFormat(format!("data format {format}; only RI is supported")));
    }
    Ok(Options { scale, reference })
}

pub fn read_touchstone(text: &str) -> Result<TouchstoneFile, DatastoreError> {
    let mut options: Option<Options> = None;
    let mut path = None;
    let mut frequencies_hz = Vec::new();
    let mut s = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let (body, comment) = match raw.split_once('!') {
            Some((b, c)) => (b, Some(c)),
            None => (raw, None),
        };
        if let Some(c) = comment {
            let words: Vec<&str> = c.split_whitespace().collect();
            if let ["path", tx, rx] = words.as_slice() {
                path = Some(PortPath::new(*tx, *rx));
            }
        }
        let body = body.trim();
        if body.is_empty() {
            continue;
        }
        if body.starts_with('#') {
            if options.is_some() {
                return Err(DatastoreError::Parse { line: line_no, message: "repeated option line".into() });
            }
            options = Some(parse_options(body, line_no)?);
            continue;
        }
        let opts = options.as_ref().ok_or(DatastoreError::Parse {
            line: line_no,
            message: "data before option line".into(),
        })?;
        let nums: Vec<f64> = body
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DatastoreError::Parse { line: line_no, message: e.to_string() })?;
        if nums.len() != 9 {
            return Err(DatastoreError::Parse {
                line: line_no,
                message: format!("expected 9 values for a 2-port row, got {}", nums.len()),
            });
        }
        if nums.iter().any(|x| !x.is_finite()) {
            return Err(DatastoreError::Parse { line: line_no, message: "non-finite value".into() });
        }
        let f = nums[0] * opts.scale;
        if let Some(&prev) = frequencies_hz.last() {
            if f <= prev {
                return Err(DatastoreError::Parse {
                    line: line_no,
                    message: "frequencies must be strictly increasing".into(),
                });
            }
        }
        frequencies_hz.push(f);
        let c = |k: usize| Complex64::new(nums[1 + 2 * k], nums[2 + 2 * k]);
        s.push([c(0), c(1), c(2), c(3)]);
    }
    let opts = options.ok_or(DatastoreError::Parse { line: 0, message: "missing option line".into() })?;
    Ok(TouchstoneFile {
        frequencies_hz,
        reference_ohms: opts.reference,
        s,
        path,
    })
}

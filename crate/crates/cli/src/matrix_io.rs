//! Dense `f64` matrix files.
//!
//! CSV: a `# name rows cols` header line, then one comma-separated line per
//! row written with 17 significant digits, so every finite value round-trips
//! exactly.
//!
//! BIN: a 32-byte little-endian header followed by the row-major payload.
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `DPCA`                  |
//! | 4      | 2    | version (`1`)                 |
//! | 6      | 4    | rows                          |
//! | 10     | 4    | cols                          |
//! | 14     | 2    | dtype (`1` = float64)         |
//! | 16     | 2    | layout (`0` = row-major)      |
//! | 18     | 14   | zero                          |

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"DPCA";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
const DTYPE_F64: u16 = 1;
const LAYOUT_ROW_MAJOR: u16 = 0;

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Default,
    serde::Serialize,
    serde::Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Bin,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Bin => "bin",
        }
    }
}

/// Whether non-finite entries are accepted when reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NanPolicy {
    #[default]
    Reject,
    Allow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub name: String,
    pub data: DMatrix<f64>,
}

/// Parse failure with enough context to point at the offending input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError(pub String);

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ParseError {}

fn fail<T>(msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError(msg.into()))
}

pub fn encode_csv(name: &str, m: &DMatrix<f64>) -> String {
    let name = if name.is_empty() || name.contains(char::is_whitespace) {
        "matrix"
    } else {
        name
    };
    let mut out = format!("# {name} {} {}\n", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{:.16e}", m[(r, c)]).expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str, nan: NanPolicy) -> Result<NamedMatrix, ParseError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return fail("empty file, expected a `# name rows cols` header");
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [hash, name, rows, cols] = fields[..] else {
        return fail(format!(
            "line 1: expected `# name rows cols`, found {header:?}"
        ));
    };
    if hash != "#" {
        return fail(format!(
            "line 1: header must start with `#`, found {header:?}"
        ));
    }
    let parse_dim = |s: &str, what: &str| {
        s.parse::<usize>().map_err(|_| {
            ParseError(format!(
                "line 1: {what} {s:?} is not a non-negative integer"
            ))
        })
    };
    let rows = parse_dim(rows, "row count")?;
    let cols = parse_dim(cols, "column count")?;

    let mut values = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 20));
    let mut seen_rows = 0;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if seen_rows == rows {
            return fail(format!("line {lineno}: more than the {rows} declared rows"));
        }
        let before = values.len();
        for (c, field) in line.split(',').enumerate() {
            let field = field.trim();
            let v: f64 = field.parse().map_err(|_| {
                ParseError(format!(
                    "line {lineno}, column {}: {field:?} is not a number",
                    c + 1
                ))
            })?;
            if !v.is_finite() && nan == NanPolicy::Reject {
                return fail(format!(
                    "line {lineno}, column {}: non-finite value {field:?}",
                    c + 1
                ));
            }
            values.push(v);
        }
        if values.len() - before != cols {
            return fail(format!(
                "line {lineno}: expected {cols} values, found {}",
                values.len() - before
            ));
        }
        seen_rows += 1;
    }
    if seen_rows != rows {
        return fail(format!("declared {rows} rows, found {seen_rows}"));
    }
    Ok(NamedMatrix {
        name: name.to_string(),
        data: DMatrix::from_row_slice(rows, cols, &values),
    })
}

pub fn encode_bin(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&LAYOUT_ROW_MAJOR.to_le_bytes());
    out.resize(HEADER_LEN, 0);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn parse_bin(bytes: &[u8], nan: NanPolicy) -> Result<DMatrix<f64>, ParseError> {
    if bytes.len() < HEADER_LEN {
        return fail(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        ));
    }
    if &bytes[0..4] != MAGIC {
        return fail("missing DPCA magic");
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at =
        |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != VERSION {
        return fail(format!("unsupported version {version}, expected {VERSION}"));
    }
    let rows = u32_at(6) as usize;
    let cols = u32_at(10) as usize;
    let dtype = u16_at(14);
    if dtype != DTYPE_F64 {
        return fail(format!(
            "unsupported dtype tag {dtype}, expected {DTYPE_F64} (float64)"
        ));
    }
    let layout = u16_at(16);
    if layout != LAYOUT_ROW_MAJOR {
        return fail(format!(
            "unsupported layout tag {layout}, expected {LAYOUT_ROW_MAJOR} (row-major)"
        ));
    }
    if bytes[18..HEADER_LEN].iter().any(|&b| b != 0) {
        return fail("reserved header bytes 18..32 must be zero");
    }
    let expected = (rows as u128) * (cols as u128) * 8;
    let actual = (bytes.len() - HEADER_LEN) as u128;
    if actual != expected {
        return fail(format!(
            "{rows}x{cols} payload needs {expected} bytes, found {actual}"
        ));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of eight")))
        .collect();
    if nan == NanPolicy::Reject {
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return fail(format!(
                "non-finite value at row {}, column {}",
                k / cols.max(1),
                k % cols.max(1)
            ));
        }
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Parses either format, chosen by the leading magic bytes.
pub fn parse_auto(bytes: &[u8], nan: NanPolicy) -> Result<NamedMatrix, ParseError> {
    if bytes.starts_with(MAGIC) {
        return Ok(NamedMatrix {
            name: String::new(),
            data: parse_bin(bytes, nan)?,
        });
    }
    let text = std::str::from_utf8(bytes)
        .map_err(|e| ParseError(format!("neither DPCA binary nor UTF-8 text: {e}")))?;
    parse_csv(text, nan)
}

pub fn read_matrix(path: &Path, nan: NanPolicy) -> Result<NamedMatrix> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut parsed = parse_auto(&bytes, nan).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        message: e.0,
    })?;
    if parsed.name.is_empty() {
        parsed.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(parsed)
}

pub fn write_matrix(path: &Path, name: &str, m: &DMatrix<f64>, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Csv => encode_csv(name, m).into_bytes(),
        Format::Bin => encode_bin(m),
    };
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

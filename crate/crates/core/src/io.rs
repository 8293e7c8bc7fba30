//! Text and image formats for fields and measurements.
//!
//! Floating-point values are written with Rust's shortest round-trip formatting, so reading a
//! file back reproduces every finite value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, UotError};
use crate::forward::{MeasurementSet, Provenance};
use crate::grid::{NodalField, Rect, RegularGrid};
use crate::optics::{ScanGrid, UltrasoundShape};

const FIELD_HEADER: &str = "nx,ny,x0,y0,lx,ly";
const MEAS_COLUMNS: &str = "i,xi_x,xi_y,h";

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    let v = s
        .trim()
        .parse::<f64>()
        .map_err(|e| UotError::Parse(format!("{what}: `{s}`: {e}")))?;
    if !v.is_finite() {
        return Err(UotError::Parse(format!("{what}: non-finite value `{s}`")));
    }
    Ok(v)
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|e| UotError::Parse(format!("{what}: `{s}`: {e}")))
}

pub fn field_to_csv(field: &NodalField) -> String {
    let g = field.grid();
    let mut out = String::with_capacity(32 * g.len());
    let _ = writeln!(out, "{FIELD_HEADER}");
    let _ = writeln!(out, "{},{},{:?},{:?},{:?},{:?}", g.nx(), g.ny(), g.x0(), g.y0(), g.lx(), g.ly());
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            let _ = writeln!(out, "{i},{j},{:?}", field.at(i, j));
        }
    }
    out
}

pub fn field_from_csv(text: &str) -> Result<NodalField> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(FIELD_HEADER) {
        return Err(UotError::Parse(format!("field file must start with `{FIELD_HEADER}`")));
    }
    let dims = lines.next().ok_or_else(|| UotError::Parse("missing grid line".into()))?;
    let parts: Vec<&str> = dims.split(',').collect();
    if parts.len() != 6 {
        return Err(UotError::Parse(format!("grid line needs 6 entries, found {}", parts.len())));
    }
    let grid = RegularGrid::new(
        parse_usize(parts[0], "nx")?,
        parse_usize(parts[1], "ny")?,
        parse_f64(parts[2], "x0")?,
        parse_f64(parts[3], "y0")?,
        parse_f64(parts[4], "lx")?,
        parse_f64(parts[5], "ly")?,
    )?;

    let mut values = Vec::with_capacity(grid.len());
    for (row, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(UotError::Parse(format!("data line {}: expected `i,j,value`", row + 1)));
        }
        if row >= grid.len() {
            return Err(UotError::Parse(format!("more than nx*ny = {} data lines", grid.len())));
        }
        let (i, j) = (parse_usize(cols[0], "i")?, parse_usize(cols[1], "j")?);
        if grid.index(i.min(grid.nx() - 1), j.min(grid.ny() - 1)) != row || i >= grid.nx() || j >= grid.ny() {
            return Err(UotError::Parse(format!("data line {}: indices ({i}, {j}) out of row-major order", row + 1)));
        }
        values.push(parse_f64(cols[2], "value")?);
    }
    if values.len() != grid.len() {
        return Err(UotError::Parse(format!(
            "expected {} data lines, found {}",
            grid.len(),
            values.len()
        )));
    }
    NodalField::new(grid, values)
}

pub fn write_field_csv(field: &NodalField, path: &Path) -> Result<()> {
    fs::write(path, field_to_csv(field))?;
    Ok(())
}

pub fn read_field_csv(path: &Path) -> Result<NodalField> {
    field_from_csv(&fs::read_to_string(path)?)
}

pub fn measurements_to_csv(meas: &MeasurementSet) -> String {
    let r = meas.scan.rect();
    let mut out = String::with_capacity(48 * meas.values.len());
    let _ = writeln!(out, "eta={:?},{:?}", meas.eta.0, meas.eta.1);
    let _ = writeln!(out, "region={:?},{:?},{:?},{:?}", r.x_min, r.x_max, r.y_min, r.y_max);
    let _ = writeln!(out, "counts={},{}", meas.scan.n1, meas.scan.n2);
    let _ = writeln!(out, "shape={}", meas.shape.describe());
    let _ = writeln!(out, "provenance={}", meas.provenance.name());
    let _ = writeln!(out, "{MEAS_COLUMNS}");
    for (k, ((x, y), h)) in meas.scan.foci().zip(&meas.values).enumerate() {
        let _ = writeln!(out, "{k},{x:?},{y:?},{h:?}");
    }
    out
}

fn floats(s: &str, n: usize, key: &str) -> Result<Vec<f64>> {
    let v = s.split(',').map(|p| parse_f64(p, key)).collect::<Result<Vec<f64>>>()?;
    if v.len() != n {
        return Err(UotError::Parse(format!("`{key}` needs {n} values")));
    }
    Ok(v)
}

pub fn measurements_from_csv(text: &str) -> Result<MeasurementSet> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut eta = None;
    let mut region = None;
    let mut counts = None;
    let mut shape = None;
    let mut provenance = None;
    loop {
        let line = lines
            .next()
            .ok_or_else(|| UotError::Parse(format!("missing column line `{MEAS_COLUMNS}`")))?
            .trim();
        if line == MEAS_COLUMNS {
            break;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| UotError::Parse(format!("malformed header line `{line}`")))?;
        match key {
            "eta" => eta = Some(floats(value, 2, key)?),
            "region" => region = Some(floats(value, 4, key)?),
            "counts" => {
                let c = value.split(',').map(|p| parse_usize(p, key)).collect::<Result<Vec<usize>>>()?;
                if c.len() != 2 {
                    return Err(UotError::Parse("`counts` needs 2 values".into()));
                }
                counts = Some((c[0], c[1]));
            }
            "shape" => shape = Some(UltrasoundShape::parse(value.trim())?),
            "provenance" => provenance = Some(value.trim().parse::<Provenance>()?),
            other => return Err(UotError::Parse(format!("unknown header key `{other}`"))),
        }
    }
    let missing = |k: &str| UotError::Parse(format!("header is missing `{k}`"));
    let eta = eta.ok_or_else(|| missing("eta"))?;
    let region = region.ok_or_else(|| missing("region"))?;
    let (n1, n2) = counts.ok_or_else(|| missing("counts"))?;
    let shape = shape.ok_or_else(|| missing("shape"))?;
    let provenance = provenance.ok_or_else(|| missing("provenance"))?;
    if n1 < 2 || n2 < 2 {
        return Err(UotError::Parse("scan counts must be at least 2".into()));
    }
    let scan = ScanGrid {
        region: Rect::new(region[0], region[1], region[2], region[3])?.into(),
        n1,
        n2,
    };

    let mut values = Vec::with_capacity(scan.len());
    for (row, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(UotError::Parse(format!("data line {}: expected `{MEAS_COLUMNS}`", row + 1)));
        }
        if parse_usize(cols[0], "i")? != row {
            return Err(UotError::Parse(format!("data line {}: focus index out of order", row + 1)));
        }
        values.push(parse_f64(cols[3], "h")?);
    }
    if values.len() != scan.len() {
        return Err(UotError::Parse(format!(
            "expected {} data lines, found {}",
            scan.len(),
            values.len()
        )));
    }
    MeasurementSet::new(scan, (eta[0], eta[1]), values, provenance, shape)
}

pub fn write_measurements_csv(meas: &MeasurementSet, path: &Path) -> Result<()> {
    fs::write(path, measurements_to_csv(meas))?;
    Ok(())
}

pub fn read_measurements_csv(path: &Path) -> Result<MeasurementSet> {
    measurements_from_csv(&fs::read_to_string(path)?)
}

/// Gray-level mapping for [`write_pgm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangePolicy {
    /// Map the field's own `[min, max]`.
    Auto,
    /// Map `[lo, hi]`; values outside are clamped.
    Fixed(f64, f64),
}

/// 16-bit binary PGM bytes. Row 0 of the image is the top edge (largest `y`).
///
/// Returns the bytes and whether the range was degenerate, in which case every pixel is
/// mid-gray.
pub fn pgm_bytes(field: &NodalField, range: RangePolicy) -> Result<(Vec<u8>, bool)> {
    let g = field.grid();
    let (lo, hi) = match range {
        RangePolicy::Auto => (field.min(), field.max()),
        RangePolicy::Fixed(lo, hi) => {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(UotError::invalid(format!("invalid gray range [{lo}, {hi}]")));
            }
            (lo, hi)
        }
    };
    let degenerate = !(hi > lo);
    let mut out = format!("P5\n{} {}\n65535\n", g.nx(), g.ny()).into_bytes();
    out.reserve(2 * g.len());
    for j in (0..g.ny()).rev() {
        for i in 0..g.nx() {
            let level: u16 = if degenerate {
                32768
            } else {
                let t = ((field.at(i, j) - lo) / (hi - lo)).clamp(0.0, 1.0);
                (t * 65535.0).round() as u16
            };
            out.extend_from_slice(&level.to_be_bytes());
        }
    }
    Ok((out, degenerate))
}

pub fn write_pgm(field: &NodalField, path: &Path, range: RangePolicy) -> Result<()> {
    let (bytes, degenerate) = pgm_bytes(field, range)?;
    if degenerate {
        log::warn!("{}: constant field, writing uniform mid-gray", path.display());
    }
    fs::write(path, bytes)?;
    Ok(())
}

//! ASCII point-cloud files.
//!
//! Two layouts are supported:
//!
//! - `xyzl`: one point per line, whitespace separated, `x y z [f1 .. fm]
//!   label`. Lines starting with `#` and blank lines are ignored. Every data
//!   line must have the same number of columns.
//! - ASCII PLY: a `ply` / `format ascii 1.0` header with one `vertex`
//!   element. `x`, `y`, `z` are required; a `label` (or `scalar_label`)
//!   property carries the class id; every other property becomes a feature
//!   channel, in header order.
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! write followed by a read reproduces every `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::io::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyzl,
    AsciiPly,
}

impl CloudFormat {
    /// `.ply` maps to PLY, anything else to xyzl.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ply") => CloudFormat::AsciiPly,
            _ => CloudFormat::Xyzl,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::Xyzl => "xyzl",
            CloudFormat::AsciiPly => "ply",
        }
    }
}

/// Reads a cloud, detecting the format from its first line.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_cloud_checked(path, None)
}

/// Reads a cloud and rejects labels outside `[0, num_classes)`.
pub fn read_labeled_cloud(path: impl AsRef<Path>, num_classes: usize) -> Result<PointCloud> {
    read_cloud_checked(path, Some(num_classes))
}

fn read_cloud_checked(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let parsed = if text.trim_start().starts_with("ply") {
        parse_ply(&text, num_classes)
    } else {
        parse_xyzl(&text, num_classes)
    };
    parsed.map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_label(token: &str, line: usize, num_classes: Option<usize>) -> Result<usize> {
    let label: usize = token
        .parse()
        .map_err(|_| Error::data(format!("line {line}: invalid label `{token}`")))?;
    if let Some(c) = num_classes {
        if label >= c {
            return Err(Error::data(format!(
                "line {line}: unknown label id {label} (expected < {c})"
            )));
        }
    }
    Ok(label)
}

fn parse_coord(token: &str, line: usize) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| Error::data(format!("line {line}: cannot parse `{token}` as a number")))?;
    if !v.is_finite() {
        return Err(Error::data(format!("line {line}: non-finite value `{token}`")));
    }
    Ok(v)
}

pub fn parse_xyzl(text: &str, num_classes: Option<usize>) -> Result<PointCloud> {
    let mut columns = None;
    let mut positions: Vec<Point> = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let expected = *columns.get_or_insert(tokens.len());
        if tokens.len() != expected {
            return Err(Error::data(format!(
                "line {line_no}: expected {expected} columns, found {}",
                tokens.len()
            )));
        }
        if expected < 4 {
            return Err(Error::data(format!(
                "line {line_no}: xyzl rows need at least `x y z label`, found {expected} columns"
            )));
        }
        positions.push([
            parse_coord(tokens[0], line_no)?,
            parse_coord(tokens[1], line_no)?,
            parse_coord(tokens[2], line_no)?,
        ]);
        for t in &tokens[3..expected - 1] {
            features.push(parse_coord(t, line_no)?);
        }
        labels.push(parse_label(tokens[expected - 1], line_no, num_classes)?);
    }
    let columns = columns.ok_or_else(|| Error::data("xyzl file contains no points"))?;
    PointCloud::new(positions, features, columns - 4, Some(labels))
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    X,
    Y,
    Z,
    Label,
    Feature,
}

fn ply_type_is_known(t: &str) -> bool {
    matches!(
        t,
        "char" | "uchar" | "short" | "ushort" | "int" | "uint" | "float" | "double" | "int8"
            | "uint8" | "int16" | "uint16" | "int32" | "uint32" | "float32" | "float64"
    )
}

pub fn parse_ply(text: &str, num_classes: Option<usize>) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(Error::data("ply: missing `ply` magic line")),
    }
    let mut format_seen = false;
    let mut vertex_count = None;
    let mut roles = Vec::new();
    let mut header_done = false;
    for (n, line) in lines.by_ref() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", "ascii", "1.0"] => format_seen = true,
            ["format", other, ..] => {
                return Err(Error::data(format!(
                    "line {n}: unsupported ply format `{other}` (only ascii 1.0)"
                )))
            }
            ["element", "vertex", count] => {
                vertex_count = Some(count.parse::<usize>().map_err(|_| {
                    Error::data(format!("line {n}: bad vertex count `{count}`"))
                })?)
            }
            ["element", name, _] => {
                return Err(Error::data(format!(
                    "line {n}: unsupported ply element `{name}` (only vertex)"
                )))
            }
            ["property", "list", ..] => {
                return Err(Error::data(format!("line {n}: list properties are not supported")))
            }
            ["property", ty, name] => {
                if vertex_count.is_none() {
                    return Err(Error::data(format!(
                        "line {n}: property before `element vertex`"
                    )));
                }
                if !ply_type_is_known(ty) {
                    return Err(Error::data(format!("line {n}: unknown property type `{ty}`")));
                }
                roles.push(match *name {
                    "x" => Role::X,
                    "y" => Role::Y,
                    "z" => Role::Z,
                    "label" | "scalar_label" => Role::Label,
                    _ => Role::Feature,
                });
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(Error::data(format!("line {n}: unrecognized header line `{line}`"))),
        }
    }
    if !format_seen {
        return Err(Error::data("ply header truncated: missing `format ascii 1.0`"));
    }
    let count = vertex_count
        .ok_or_else(|| Error::data("ply header truncated: missing `element vertex`"))?;
    if !header_done {
        return Err(Error::data("ply header truncated: missing `end_header`"));
    }
    for (role, name) in [(Role::X, "x"), (Role::Y, "y"), (Role::Z, "z")] {
        if roles.iter().filter(|&&r| r == role).count() != 1 {
            return Err(Error::data(format!(
                "ply: vertex element needs exactly one `{name}` property"
            )));
        }
    }
    let labeled = roles.contains(&Role::Label);
    let feature_dim = roles.iter().filter(|&&r| r == Role::Feature).count();

    let mut positions = Vec::with_capacity(count);
    let mut features = Vec::with_capacity(count * feature_dim);
    let mut labels = Vec::with_capacity(count);
    for (n, line) in lines {
        if positions.len() == count {
            if line.is_empty() {
                continue;
            }
            return Err(Error::data(format!(
                "line {n}: data beyond the {count} declared vertices"
            )));
        }
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != roles.len() {
            return Err(Error::data(format!(
                "line {n}: expected {} values, found {}",
                roles.len(),
                tokens.len()
            )));
        }
        let mut p = [0.0; 3];
        for (&role, tok) in roles.iter().zip(&tokens) {
            match role {
                Role::X => p[0] = parse_coord(tok, n)?,
                Role::Y => p[1] = parse_coord(tok, n)?,
                Role::Z => p[2] = parse_coord(tok, n)?,
                Role::Label => labels.push(parse_label(tok, n, num_classes)?),
                Role::Feature => features.push(parse_coord(tok, n)?),
            }
        }
        positions.push(p);
    }
    if positions.len() != count {
        return Err(Error::data(format!(
            "ply: header declares {count} vertices, found {}",
            positions.len()
        )));
    }
    PointCloud::new(positions, features, feature_dim, labeled.then_some(labels))
}

pub fn format_xyzl(cloud: &PointCloud) -> Result<String> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::data("xyzl output requires per-point labels"))?;
    let mut s = String::with_capacity(cloud.len() * 48);
    for (i, p) in cloud.positions().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        for f in cloud.feature_row(i) {
            let _ = write!(s, " {f}");
        }
        let _ = writeln!(s, " {}", labels[i]);
    }
    Ok(s)
}

pub fn format_ply(cloud: &PointCloud) -> Result<String> {
    let mut s = String::with_capacity(cloud.len() * 48 + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    for c in 0..cloud.feature_dim() {
        let _ = writeln!(s, "property float f{c}");
    }
    if let Some(labels) = cloud.labels() {
        if let Some(&big) = labels.iter().find(|&&l| l > u8::MAX as usize) {
            return Err(Error::data(format!("label {big} does not fit a uchar property")));
        }
        s.push_str("property uchar label\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.positions().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        for f in cloud.feature_row(i) {
            let _ = write!(s, " {f}");
        }
        if let Some(labels) = cloud.labels() {
            let _ = write!(s, " {}", labels[i]);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let text = match format {
        CloudFormat::Xyzl => format_xyzl(cloud)?,
        CloudFormat::AsciiPly => format_ply(cloud)?,
    };
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

//! ASCII point-cloud-data (`.pcd`) reading and writing.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use crate::config::{read_text, write_text};
use crate::error::{CalibError, Result};
use crate::geometry::PointCloud;
use crate::scalar::Real;

/// Significant digits used when writing coordinates.
pub const WRITE_DIGITS: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct CloudFile<T: Real> {
    /// Frame id taken from the file stem.
    pub cloud: PointCloud<T>,
    /// Rows skipped because a coordinate was NaN.
    pub nan_rows: usize,
}

#[derive(Debug, Default)]
struct Header {
    fields: Option<Vec<String>>,
    sizes: Option<Vec<usize>>,
    types: Option<Vec<String>>,
    counts: Option<Vec<usize>>,
    width: Option<usize>,
    height: Option<usize>,
    points: Option<usize>,
}

pub fn read_cloud<T: Real>(path: &Path) -> Result<CloudFile<T>> {
    let text = read_text(path)?;
    let frame_id = path.file_stem().map_or_else(|| "cloud".to_string(), |s| s.to_string_lossy().into_owned());
    parse_cloud(&text, path, frame_id)
}

/// Parses PCD text; `path` only labels errors.
pub fn parse_cloud<T: Real>(text: &str, path: &Path, frame_id: String) -> Result<CloudFile<T>> {
    let err = |line: usize, message: String| CalibError::Parse { path: path.to_path_buf(), line, message };
    let mut header = Header::default();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut data_line = 0;

    for (no, raw) in lines.by_ref() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let key = tok.next().unwrap_or_default().to_ascii_uppercase();
        let rest: Vec<&str> = tok.collect();
        let numbers = |what: &str| -> Result<Vec<usize>> {
            rest.iter().map(|t| t.parse::<usize>().map_err(|_| err(no, format!("{what}: {t:?} is not a count")))).collect()
        };
        let single = |what: &str| -> Result<usize> {
            match numbers(what)?.as_slice() {
                [v] => Ok(*v),
                _ => Err(err(no, format!("{what} takes one value"))),
            }
        };
        match key.as_str() {
            "VERSION" | "VIEWPOINT" => {}
            "FIELDS" | "COLUMNS" => header.fields = Some(rest.iter().map(|s| s.to_string()).collect()),
            "SIZE" => header.sizes = Some(numbers("SIZE")?),
            "TYPE" => header.types = Some(rest.iter().map(|s| s.to_ascii_uppercase()).collect()),
            "COUNT" => header.counts = Some(numbers("COUNT")?),
            "WIDTH" => header.width = Some(single("WIDTH")?),
            "HEIGHT" => header.height = Some(single("HEIGHT")?),
            "POINTS" => header.points = Some(single("POINTS")?),
            "DATA" => {
                if rest.first().map(|s| s.to_ascii_lowercase()) != Some("ascii".into()) {
                    return Err(err(no, format!("unsupported DATA encoding {:?} (only ascii)", rest.join(" "))));
                }
                data_line = no;
                break;
            }
            _ => return Err(err(no, format!("unknown header key {key:?}"))),
        }
    }
    if data_line == 0 {
        return Err(err(text.lines().count(), "missing DATA line".into()));
    }

    let fields = header.fields.ok_or_else(|| err(data_line, "missing FIELDS".into()))?;
    let counts = header.counts.unwrap_or_else(|| vec![1; fields.len()]);
    if counts.len() != fields.len() {
        return Err(err(data_line, format!("COUNT lists {} entries for {} fields", counts.len(), fields.len())));
    }
    let mut columns = [0usize; 3];
    for (axis, name) in ["x", "y", "z"].iter().enumerate() {
        let i = fields.iter().position(|f| f == name).ok_or_else(|| err(data_line, format!("FIELDS lacks {name}")))?;
        if header.types.as_ref().and_then(|t| t.get(i)).is_some_and(|t| t != "F") {
            return Err(err(data_line, format!("field {name} must have TYPE F")));
        }
        if header.sizes.as_ref().and_then(|s| s.get(i)).is_some_and(|s| *s != 4 && *s != 8) {
            return Err(err(data_line, format!("field {name} must have SIZE 4 or 8")));
        }
        if counts[i] != 1 {
            return Err(err(data_line, format!("field {name} must have COUNT 1")));
        }
        columns[axis] = counts[..i].iter().sum();
    }
    let width_points = header.width.zip(header.height).map(|(w, h)| w * h);
    let declared = header.points.or(width_points).ok_or_else(|| err(data_line, "missing POINTS".into()))?;
    if width_points.is_some_and(|wp| wp != declared) {
        return Err(err(data_line, format!("WIDTH x HEIGHT disagrees with POINTS {declared}")));
    }
    let row_len: usize = counts.iter().sum();

    let (mut points, mut rows, mut nan_rows) = (Vec::with_capacity(declared), 0usize, 0usize);
    let mut last = data_line;
    for (no, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        last = no;
        rows += 1;
        if rows > declared {
            return Err(err(no, format!("more rows than the {declared} declared points")));
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != row_len {
            return Err(err(no, format!("expected {row_len} values, found {}", tok.len())));
        }
        let mut xyz = [0f64; 3];
        for (axis, &col) in columns.iter().enumerate() {
            xyz[axis] = tok[col].parse().map_err(|_| err(no, format!("{:?} is not a number", tok[col])))?;
        }
        if xyz.iter().any(|v| v.is_nan()) {
            nan_rows += 1;
            continue;
        }
        if xyz.iter().any(|v| v.is_infinite()) {
            return Err(err(no, "infinite coordinate".into()));
        }
        points.push(Point3::new(T::lit(xyz[0]), T::lit(xyz[1]), T::lit(xyz[2])));
    }
    if rows != declared {
        return Err(err(last, format!("header declares {declared} points but the body has {rows}")));
    }
    Ok(CloudFile { cloud: PointCloud::new(frame_id, points)?, nan_rows })
}

/// Formats `v` with `digits` significant digits, trimming trailing zeros.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..=15).contains(&exp) {
        return format!("{:.*e}", digits - 1, v);
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn cloud_to_string<T: Real>(cloud: &PointCloud<T>) -> String {
    let n = cloud.len();
    let mut out = format!(
        "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\n\
         WIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA ascii\n"
    );
    for p in cloud.points() {
        let f = |v: T| format_significant(v.as_f64(), WRITE_DIGITS);
        let _ = writeln!(out, "{} {} {}", f(p.x), f(p.y), f(p.z));
    }
    out
}

pub fn write_cloud<T: Real>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    write_text(path, &cloud_to_string(cloud))
}

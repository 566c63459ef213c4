//! File formats: point-set, landmark and displacement CSVs, plus JSON and
//! JSONL output with fixed 17-significant-digit floats.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::geometry::{Compartment, GeometryError, LandmarkPair, PointSet, Region};
use crate::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Geometry { path: String, source: GeometryError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// 17 significant digits in scientific notation; round-trips every `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // Not representable in JSON; CSV readers reject it as well.
        format!("{v}")
    }
}

const POINT_HEADER: [&str; 5] = ["x", "y", "z", "region", "compartment"];
const LANDMARK_HEADER: [&str; 5] = ["landmark_name", "side", "x", "y", "z"];
const DISPLACEMENT_HEADER: [&str; 6] = ["x", "y", "z", "dx", "dy", "dz"];

struct Table {
    label: String,
    rows: Vec<csv::StringRecord>,
}

fn read_table(reader: impl Read, label: &str, header: &[&str]) -> Result<Table, IoError> {
    let fmt = |msg: String| IoError::Format {
        path: label.to_string(),
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let found = rdr.headers().map_err(|e| fmt(e.to_string()))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(fmt(format!(
            "header `{}`, expected `{}`",
            found.iter().collect::<Vec<_>>().join(","),
            header.join(",")
        )));
    }
    let rows = rdr
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| fmt(e.to_string()))?;
    Ok(Table {
        label: label.to_string(),
        rows,
    })
}

impl Table {
    fn err(&self, row: usize, msg: impl std::fmt::Display) -> IoError {
        IoError::Format {
            path: self.label.clone(),
            msg: format!("data row {}: {msg}", row + 1),
        }
    }

    fn num(&self, row: usize, col: usize) -> Result<f64, IoError> {
        let s = &self.rows[row][col];
        let v: f64 = s
            .parse()
            .map_err(|_| self.err(row, format!("`{s}` is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(row, "non-finite value"));
        }
        Ok(v)
    }

    fn vec3(&self, row: usize, first: usize) -> Result<Vec3, IoError> {
        Ok([
            self.num(row, first)?,
            self.num(row, first + 1)?,
            self.num(row, first + 2)?,
        ])
    }
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f.write_all(text.as_bytes()).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn parse_point_set(
    reader: impl Read,
    label: &str,
    subject_id: &str,
) -> Result<PointSet, IoError> {
    let t = read_table(reader, label, &POINT_HEADER)?;
    let mut points = Vec::with_capacity(t.rows.len());
    let mut region = Vec::with_capacity(t.rows.len());
    let mut compartment = Vec::with_capacity(t.rows.len());
    for i in 0..t.rows.len() {
        points.push(t.vec3(i, 0)?);
        region.push(match &t.rows[i][3] {
            "surface" => Region::Surface,
            "internal" => Region::Internal,
            other => return Err(t.err(i, format!("unknown region `{other}`"))),
        });
        compartment.push(match &t.rows[i][4] {
            "rigid" => Compartment::Rigid,
            "soft" => Compartment::Soft,
            other => return Err(t.err(i, format!("unknown compartment `{other}`"))),
        });
    }
    PointSet::new(points, region, compartment, subject_id).map_err(|source| IoError::Geometry {
        path: label.to_string(),
        source,
    })
}

/// Reads a point-set CSV; the subject id is the file stem.
pub fn read_point_set(path: &Path) -> Result<PointSet, IoError> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_point_set(open(path)?, &path.display().to_string(), &id)
}

pub fn point_set_csv(ps: &PointSet) -> String {
    let mut s = POINT_HEADER.join(",");
    s.push('\n');
    for i in 0..ps.len() {
        let p = ps.points[i];
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            fmt_f64(p[0]),
            fmt_f64(p[1]),
            fmt_f64(p[2]),
            ps.region[i].as_str(),
            ps.compartment[i].as_str()
        );
    }
    s
}

pub fn write_point_set(path: &Path, ps: &PointSet) -> Result<(), IoError> {
    write_text(path, &point_set_csv(ps))
}

/// Landmark rows grouped by name, in order of first appearance.
pub fn parse_landmarks(reader: impl Read, label: &str) -> Result<Vec<LandmarkPair>, IoError> {
    let t = read_table(reader, label, &LANDMARK_HEADER)?;
    let mut groups: Vec<(String, Vec<Vec3>, Vec<Vec3>)> = Vec::new();
    for i in 0..t.rows.len() {
        let name = &t.rows[i][0];
        let p = t.vec3(i, 2)?;
        let g = match groups.iter_mut().position(|g| g.0 == name) {
            Some(k) => &mut groups[k],
            None => {
                groups.push((name.to_string(), Vec::new(), Vec::new()));
                groups.last_mut().unwrap()
            }
        };
        match &t.rows[i][1] {
            "source" => g.1.push(p),
            "target" => g.2.push(p),
            other => return Err(t.err(i, format!("side must be source or target, got `{other}`"))),
        }
    }
    groups
        .into_iter()
        .map(|(name, s, d)| {
            LandmarkPair::new(name, s, d).map_err(|source| IoError::Geometry {
                path: label.to_string(),
                source,
            })
        })
        .collect()
}

pub fn read_landmarks(path: &Path) -> Result<Vec<LandmarkPair>, IoError> {
    parse_landmarks(open(path)?, &path.display().to_string())
}

pub fn landmarks_csv(pairs: &[LandmarkPair]) -> String {
    let mut s = LANDMARK_HEADER.join(",");
    s.push('\n');
    for pair in pairs {
        for (side, cluster) in [
            ("source", &pair.source_cluster),
            ("target", &pair.target_cluster),
        ] {
            for p in cluster {
                let _ = writeln!(
                    s,
                    "{},{side},{},{},{}",
                    pair.name,
                    fmt_f64(p[0]),
                    fmt_f64(p[1]),
                    fmt_f64(p[2])
                );
            }
        }
    }
    s
}

pub fn write_landmarks(path: &Path, pairs: &[LandmarkPair]) -> Result<(), IoError> {
    write_text(path, &landmarks_csv(pairs))
}

/// Points with per-point displacements (`x,y,z,dx,dy,dz`).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementTable {
    pub points: Vec<Vec3>,
    pub displacements: Vec<Vec3>,
}

pub fn parse_displacements(reader: impl Read, label: &str) -> Result<DisplacementTable, IoError> {
    let t = read_table(reader, label, &DISPLACEMENT_HEADER)?;
    let mut out = DisplacementTable {
        points: Vec::with_capacity(t.rows.len()),
        displacements: Vec::with_capacity(t.rows.len()),
    };
    for i in 0..t.rows.len() {
        out.points.push(t.vec3(i, 0)?);
        out.displacements.push(t.vec3(i, 3)?);
    }
    Ok(out)
}

pub fn read_displacements(path: &Path) -> Result<DisplacementTable, IoError> {
    parse_displacements(open(path)?, &path.display().to_string())
}

pub fn displacements_csv(points: &[Vec3], displacements: &[Vec3]) -> String {
    let mut s = DISPLACEMENT_HEADER.join(",");
    s.push('\n');
    for (p, d) in points.iter().zip(displacements) {
        let cols: Vec<String> = p.iter().chain(d).map(|&v| fmt_f64(v)).collect();
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    s
}

pub fn write_displacements(
    path: &Path,
    points: &[Vec3],
    displacements: &[Vec3],
) -> Result<(), IoError> {
    write_text(path, &displacements_csv(points, displacements))
}

fn emit(v: &Value, indent: Option<usize>, out: &mut String) {
    let newline = |out: &mut String, level: usize| {
        if indent.is_some() {
            out.push('\n');
            out.push_str(&"  ".repeat(level));
        }
    };
    let level = indent.unwrap_or(0);
    let inner = indent.map(|l| l + 1);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&fmt_f64(n.as_f64().unwrap()));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                newline(out, level + 1);
                emit(item, inner, out);
            }
            newline(out, level);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push('{');
            for (i, (k, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                newline(out, level + 1);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                if indent.is_some() {
                    out.push(' ');
                }
                emit(item, inner, out);
            }
            newline(out, level);
            out.push('}');
        }
    }
}

/// Pretty JSON with sorted keys and 17-significant-digit floats.
pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes to JSON");
    let mut s = String::new();
    emit(&v, Some(0), &mut s);
    s.push('\n');
    s
}

/// Single-line form of [`to_json_pretty`], for JSONL records.
pub fn to_json_line<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes to JSON");
    let mut s = String::new();
    emit(&v, None, &mut s);
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_text(path, &to_json_pretty(value))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IoError> {
    let mut s = String::new();
    for r in records {
        s.push_str(&to_json_line(r));
        s.push('\n');
    }
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube() -> PointSet {
        let pts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.1, 0.2, 0.30000000000000004],
        ];
        PointSet::new(
            pts,
            vec![
                Region::Surface,
                Region::Surface,
                Region::Internal,
                Region::Internal,
                Region::Surface,
            ],
            vec![
                Compartment::Rigid,
                Compartment::Soft,
                Compartment::Soft,
                Compartment::Rigid,
                Compartment::Soft,
            ],
            "cube",
        )
        .unwrap()
    }

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 8221.4765100671, 0.0] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn point_set_round_trip() {
        let ps = cube();
        let text = point_set_csv(&ps);
        assert!(text.starts_with("x,y,z,region,compartment\n"));
        let back = parse_point_set(text.as_bytes(), "mem", "cube").unwrap();
        assert_eq!(back, ps);
    }

    #[test]
    fn bad_point_rows_are_rejected() {
        let bad_label = "x,y,z,region,compartment\n0,0,0,surface,squishy\n";
        assert!(parse_point_set(bad_label.as_bytes(), "m", "s").is_err());
        let bad_header = "x,y,z\n0,0,0\n";
        assert!(parse_point_set(bad_header.as_bytes(), "m", "s").is_err());
        let nan = "x,y,z,region,compartment\nNaN,0,0,surface,soft\n";
        assert!(parse_point_set(nan.as_bytes(), "m", "s").is_err());
    }

    #[test]
    fn landmarks_round_trip_keeps_order() {
        let pairs = vec![
            LandmarkPair::new(
                "apex",
                vec![[0.0, 0.0, 1.0], [0.0, 0.5, 1.0]],
                vec![[1.0, 0.0, 1.0]],
            )
            .unwrap(),
            LandmarkPair::new("base", vec![[2.0, 0.0, 0.0]], vec![[2.0, 1.0, 0.0]]).unwrap(),
        ];
        let back = parse_landmarks(landmarks_csv(&pairs).as_bytes(), "m").unwrap();
        assert_eq!(back, pairs);
        let one_sided = "landmark_name,side,x,y,z\na,source,0,0,0\n";
        assert!(parse_landmarks(one_sided.as_bytes(), "m").is_err());
    }

    #[test]
    fn displacement_round_trip() {
        let pts = vec![[1.0, 2.0, 3.0], [0.5, -1.0, 0.25]];
        let d = vec![[0.1, 0.0, -0.2], [0.0, 0.0, 0.0]];
        let back = parse_displacements(displacements_csv(&pts, &d).as_bytes(), "m").unwrap();
        assert_eq!(back.points, pts);
        assert_eq!(back.displacements, d);
    }

    #[test]
    fn json_keys_sorted_and_floats_fixed() {
        #[derive(Serialize)]
        struct S {
            b: f64,
            a: u32,
            c: Vec<f64>,
        }
        let line = to_json_line(&S {
            b: 0.5,
            a: 3,
            c: vec![],
        });
        assert_eq!(line, r#"{"a":3,"b":5.0000000000000000e-1,"c":[]}"#);
        let v: Value = serde_json::from_str(&to_json_pretty(&S {
            b: 0.1,
            a: 1,
            c: vec![2.0],
        }))
        .unwrap();
        assert_eq!(v["b"].as_f64(), Some(0.1));
    }
}

//! PCD v0.7 reader and writer (ASCII and little-endian binary).
//!
//! Only `x y z` are read; other fields are skipped. Rows with a non-finite
//! coordinate are dropped and counted.

use std::io::BufRead;
use std::path::Path;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcdEncoding {
    Ascii,
    Binary,
}

/// Side information from a load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PcdStats {
    pub declared_points: usize,
    pub dropped_non_finite: usize,
}

#[derive(Debug, Clone)]
struct Field {
    name: String,
    size: usize,
    kind: char,
    count: usize,
}

#[derive(Debug)]
struct Header {
    fields: Vec<Field>,
    points: usize,
    encoding: PcdEncoding,
    data_line: usize,
}

fn parse_err(line: usize, text: &str, msg: &str) -> Error {
    Error::Parse {
        line,
        message: format!("{msg}: {text:?}"),
    }
}

fn parse_header<R: BufRead>(reader: &mut R) -> Result<Header> {
    let mut fields: Vec<String> = Vec::new();
    let mut sizes: Option<Vec<usize>> = None;
    let mut types: Option<Vec<char>> = None;
    let mut counts: Option<Vec<usize>> = None;
    let mut width: Option<usize> = None;
    let mut height: Option<usize> = None;
    let mut points: Option<usize> = None;
    let mut line_no = 0usize;
    let mut buf = String::new();

    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| Error::Parse {
            line: line_no + 1,
            message: format!("unreadable header: {e}"),
        })?;
        if n == 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "header ended before DATA".into(),
            });
        }
        line_no += 1;
        let line = buf.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default().to_ascii_uppercase();
        let rest: Vec<&str> = parts.collect();
        let nums = |rest: &[&str]| -> Result<Vec<usize>> {
            rest.iter()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(line_no, line, "expected unsigned integers"))
        };
        match key.as_str() {
            "VERSION" => {
                let v = rest.first().copied().unwrap_or("");
                if !matches!(v, "0.7" | ".7") {
                    return Err(parse_err(line_no, line, "unsupported PCD version"));
                }
            }
            "FIELDS" => fields = rest.iter().map(|s| s.to_string()).collect(),
            "SIZE" => sizes = Some(nums(&rest)?),
            "TYPE" => {
                let t: Option<Vec<char>> = rest
                    .iter()
                    .map(|s| match *s {
                        "F" | "I" | "U" => s.chars().next(),
                        _ => None,
                    })
                    .collect();
                types = Some(t.ok_or_else(|| parse_err(line_no, line, "TYPE must be F, I or U"))?);
            }
            "COUNT" => counts = Some(nums(&rest)?),
            "WIDTH" => width = nums(&rest)?.first().copied(),
            "HEIGHT" => height = nums(&rest)?.first().copied(),
            "POINTS" => points = nums(&rest)?.first().copied(),
            "VIEWPOINT" => {}
            "DATA" => {
                let encoding = match rest.first().copied() {
                    Some("ascii") => PcdEncoding::Ascii,
                    Some("binary") => PcdEncoding::Binary,
                    Some(other) => {
                        return Err(Error::UnsupportedFormat(format!(
                            "PCD DATA encoding {other:?} (line {line_no})"
                        )))
                    }
                    None => return Err(parse_err(line_no, line, "DATA without encoding")),
                };
                if fields.is_empty() {
                    return Err(parse_err(line_no, line, "DATA before FIELDS"));
                }
                let nf = fields.len();
                let sizes = sizes.unwrap_or_else(|| vec![4; nf]);
                let types = types.unwrap_or_else(|| vec!['F'; nf]);
                let counts = counts.unwrap_or_else(|| vec![1; nf]);
                if sizes.len() != nf || types.len() != nf || counts.len() != nf {
                    return Err(parse_err(
                        line_no,
                        line,
                        "FIELDS, SIZE, TYPE and COUNT lengths differ",
                    ));
                }
                let points = match (points, width, height) {
                    (Some(p), _, _) => p,
                    (None, Some(w), h) => w * h.unwrap_or(1),
                    _ => return Err(parse_err(line_no, line, "neither POINTS nor WIDTH given")),
                };
                let fields = fields
                    .into_iter()
                    .zip(sizes)
                    .zip(types)
                    .zip(counts)
                    .map(|(((name, size), kind), count)| Field {
                        name,
                        size,
                        kind,
                        count,
                    })
                    .collect();
                return Ok(Header {
                    fields,
                    points,
                    encoding,
                    data_line: line_no,
                });
            }
            _ => return Err(parse_err(line_no, line, "unknown header key")),
        }
    }
}

/// Column offsets of x, y, z: (value index for ASCII, byte offset for binary).
fn xyz_layout(header: &Header) -> Result<[(usize, usize); 3]> {
    let mut out = [None; 3];
    let (mut col, mut byte) = (0usize, 0usize);
    for f in &header.fields {
        if let Some(slot) = ["x", "y", "z"].iter().position(|n| *n == f.name) {
            if header.encoding == PcdEncoding::Binary && (f.kind != 'F' || f.size != 4) {
                return Err(Error::UnsupportedFormat(format!(
                    "binary field {} must be F 4, found {} {}",
                    f.name, f.kind, f.size
                )));
            }
            out[slot] = Some((col, byte));
        }
        col += f.count;
        byte += f.size * f.count;
    }
    match out {
        [Some(x), Some(y), Some(z)] => Ok([x, y, z]),
        _ => Err(Error::Parse {
            line: header.data_line,
            message: "FIELDS must include x y z".into(),
        }),
    }
}

/// Reads a PCD stream.
pub fn read_pcd<R: BufRead>(mut reader: R) -> Result<(PointCloud, PcdStats)> {
    let header = parse_header(&mut reader)?;
    let layout = xyz_layout(&header)?;
    let mut raw = Vec::with_capacity(header.points);
    match header.encoding {
        PcdEncoding::Ascii => {
            let values_per_row: usize = header.fields.iter().map(|f| f.count).sum();
            let mut line_no = header.data_line;
            let mut buf = String::new();
            while raw.len() < header.points {
                buf.clear();
                let n = reader.read_line(&mut buf).map_err(|e| Error::Parse {
                    line: line_no + 1,
                    message: e.to_string(),
                })?;
                if n == 0 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!(
                            "POINTS declares {} rows but data has {}",
                            header.points,
                            raw.len()
                        ),
                    });
                }
                line_no += 1;
                let text = buf.trim();
                if text.is_empty() {
                    continue;
                }
                let toks: Vec<&str> = text.split_whitespace().collect();
                if toks.len() != values_per_row {
                    return Err(parse_err(line_no, text, "wrong number of values in row"));
                }
                let get = |i: usize| -> Result<f64> {
                    let t = toks[layout[i].0];
                    match t.to_ascii_lowercase().as_str() {
                        "nan" | "-nan" => Ok(f64::NAN),
                        _ => t
                            .parse::<f32>()
                            .map(f64::from)
                            .map_err(|_| parse_err(line_no, text, "non-numeric coordinate")),
                    }
                };
                raw.push(Point3::new(get(0)?, get(1)?, get(2)?));
            }
        }
        PcdEncoding::Binary => {
            let stride: usize = header.fields.iter().map(|f| f.size * f.count).sum();
            let mut data = vec![0u8; stride * header.points];
            reader.read_exact(&mut data).map_err(|_| Error::Parse {
                line: header.data_line,
                message: format!(
                    "binary payload shorter than POINTS {} x {stride} bytes",
                    header.points
                ),
            })?;
            for row in data.chunks_exact(stride) {
                let get = |i: usize| {
                    let o = layout[i].1;
                    f64::from(f32::from_le_bytes([
                        row[o],
                        row[o + 1],
                        row[o + 2],
                        row[o + 3],
                    ]))
                };
                raw.push(Point3::new(get(0), get(1), get(2)));
            }
        }
    }
    let (cloud, dropped) = PointCloud::from_points_lossy(raw);
    Ok((
        cloud,
        PcdStats {
            declared_points: header.points,
            dropped_non_finite: dropped,
        },
    ))
}

/// Loads a PCD file, logging a warning when non-finite rows are dropped.
pub fn load_pcd(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (cloud, stats) = read_pcd(std::io::BufReader::new(file))?;
    if stats.dropped_non_finite > 0 {
        log::warn!(
            "{}: dropped {} non-finite rows",
            path.display(),
            stats.dropped_non_finite
        );
    }
    Ok(cloud)
}

/// Serializes a cloud as PCD v0.7 with `FIELDS x y z` as f32.
pub fn write_pcd(cloud: &PointCloud, encoding: PcdEncoding) -> Vec<u8> {
    let n = cloud.len();
    let data = match encoding {
        PcdEncoding::Ascii => "ascii",
        PcdEncoding::Binary => "binary",
    };
    let mut out = format!(
        "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\nWIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA {data}\n"
    )
    .into_bytes();
    match encoding {
        PcdEncoding::Ascii => {
            use std::fmt::Write;
            let mut s = String::with_capacity(n * 24);
            for p in &cloud.points {
                let _ = writeln!(s, "{} {} {}", p.x as f32, p.y as f32, p.z as f32);
            }
            out.extend_from_slice(s.as_bytes());
        }
        PcdEncoding::Binary => {
            out.reserve(n * 12);
            for p in &cloud.points {
                for v in [p.x, p.y, p.z] {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn save_pcd(path: &Path, cloud: &PointCloud, encoding: PcdEncoding) -> Result<()> {
    crate::fsutil::write_atomic(path, &write_pcd(cloud, encoding))
}

//! Point-cloud files. Text XYZ (read/write) is the canonical format; ASCII
//! PLY with a single vertex element is accepted for reading.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Raster;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// One point per line, three whitespace-separated numbers. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != 3 {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected 3 coordinates, found {}", vals.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (k, v) in vals.iter().enumerate() {
            p[k] = v
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("bad number {v:?}")))?;
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing 'ply' signature")),
    }
    let mut vertex_count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    for (i, line) in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(Error::Unsupported(format!("PLY format {other}")));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                vertex_count = Some(
                    n.parse::<usize>()
                        .map_err(|_| parse_err(path, i + 1, "bad vertex count"))?,
                );
                in_vertex = true;
            }
            ["element", name, n] => {
                if *n != "0" {
                    return Err(Error::Unsupported(format!("PLY element {name}")));
                }
                in_vertex = false;
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(Error::Unsupported("PLY list property on vertex".into()));
                }
            }
            ["property", _ty, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["end_header"] => break,
            _ => return Err(parse_err(path, i + 1, format!("unexpected header line {line:?}"))),
        }
    }
    let n = vertex_count.ok_or_else(|| parse_err(path, 0, "no vertex element"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| parse_err(path, 0, format!("missing vertex property {name}")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    let mut points = Vec::with_capacity(n);
    for (i, line) in lines {
        if points.len() == n {
            break;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != props.len() {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected {} values, found {}", props.len(), f.len()),
            ));
        }
        let get = |c: usize| {
            f[c].parse::<f64>()
                .map_err(|_| parse_err(path, i + 1, format!("bad number {:?}", f[c])))
        };
        points.push([get(cx)?, get(cy)?, get(cz)?]);
    }
    if points.len() != n {
        return Err(parse_err(
            path,
            0,
            format!("header declares {n} vertices, found {}", points.len()),
        ));
    }
    Ok(PointCloud::new(points))
}

/// Reads `.ply` as ASCII PLY and anything else as XYZ.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_ply = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        parse_ply(&text, path)
    } else {
        parse_xyz(&text, path)
    }
}

/// Writes XYZ using shortest round-trip formatting, so reading the file back
/// yields bit-identical coordinates.
pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut s = String::with_capacity(cloud.len() * 48);
    for p in &cloud.points {
        let _ = writeln!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Raster text format: a `raster <height> <width> <channels>` header line,
/// then `height` lines of `width × channels` numbers (channels interleaved).
pub fn write_raster(raster: &Raster, path: &Path) -> Result<()> {
    let mut s = format!("raster {} {} {}\n", raster.height, raster.width, raster.channels);
    let row = raster.width * raster.channels;
    for r in raster.data.chunks(row.max(1)) {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty raster file"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    let dims: Vec<usize> = match h.as_slice() {
        ["raster", a, b, c] => [a, b, c]
            .iter()
            .map(|x| x.parse().map_err(|_| parse_err(path, 1, "bad raster dimension")))
            .collect::<Result<_>>()?,
        _ => return Err(parse_err(path, 1, "expected `raster <height> <width> <channels>`")),
    };
    let (height, width, channels) = (dims[0], dims[1], dims[2]);
    let mut data = Vec::with_capacity(height * width * channels);
    for (i, line) in lines {
        for tok in line.split_whitespace() {
            data.push(tok.parse().map_err(|_| parse_err(path, i + 1, format!("bad number {tok:?}")))?);
        }
    }
    if data.len() != height * width * channels {
        return Err(parse_err(
            path,
            0,
            format!("expected {} values, found {}", height * width * channels, data.len()),
        ));
    }
    Ok(Raster {
        height,
        width,
        channels,
        data,
    })
}

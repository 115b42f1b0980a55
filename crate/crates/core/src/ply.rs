//! ASCII PLY reader and writer for point clouds.
//!
//! Vertex properties: `x y z`, optional feature columns `f_0 .. f_{D-1}`,
//! optional integer `label`. Values are printed with shortest-roundtrip
//! formatting so a write/read cycle reproduces the cloud exactly.

use crate::error::{KpError, Result};
use crate::geometry::PointCloud;
use crate::math::{Mat, Vec3};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub fn write_ply<W: Write>(cloud: &PointCloud, w: &mut W) -> Result<()> {
    cloud.validate()?;
    let dim = cloud.feature_dim();
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    for d in 0..dim {
        writeln!(w, "property double f_{d}")?;
    }
    if cloud.labels.is_some() {
        writeln!(w, "property int label")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        write!(w, "{} {} {}", p.x, p.y, p.z)?;
        for &f in cloud.features.row(i) {
            write!(w, " {f}")?;
        }
        if let Some(labels) = &cloud.labels {
            write!(w, " {}", labels[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_ply_file(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_ply(cloud, &mut w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    X,
    Y,
    Z,
    Feature(usize),
    Label,
}

pub fn read_ply<R: Read>(r: R) -> Result<PointCloud> {
    let mut lines = BufReader::new(r).lines();
    let mut next_line = || -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| KpError::Parse("unexpected end of PLY file".into()))
    };

    if next_line()?.trim() != "ply" {
        return Err(KpError::Parse("missing ply magic".into()));
    }
    if next_line()?.trim() != "format ascii 1.0" {
        return Err(KpError::Parse("only ascii 1.0 is supported".into()));
    }

    let mut count: Option<usize> = None;
    let mut columns: Vec<Column> = Vec::new();
    loop {
        let line = next_line()?;
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let mut words = line.split_whitespace();
        match words.next() {
            Some("comment") => continue,
            Some("element") => {
                let kind = words.next().unwrap_or("");
                if kind != "vertex" {
                    return Err(KpError::Parse(format!("unsupported element {kind}")));
                }
                if count.is_some() {
                    return Err(KpError::Parse("multiple vertex elements".into()));
                }
                count = Some(
                    words
                        .next()
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| KpError::Parse("bad vertex count".into()))?,
                );
            }
            Some("property") => {
                let ty = words.next().unwrap_or("");
                if ty == "list" {
                    return Err(KpError::Parse("list properties unsupported".into()));
                }
                let name = words
                    .next()
                    .ok_or_else(|| KpError::Parse("property without name".into()))?;
                let col = match name {
                    "x" => Column::X,
                    "y" => Column::Y,
                    "z" => Column::Z,
                    "label" => Column::Label,
                    f if f.starts_with("f_") => Column::Feature(
                        f[2..]
                            .parse()
                            .map_err(|_| KpError::Parse(format!("bad feature column {f}")))?,
                    ),
                    other => return Err(KpError::Parse(format!("unknown property {other}"))),
                };
                columns.push(col);
            }
            _ => return Err(KpError::Parse(format!("unexpected header line: {line}"))),
        }
    }

    let count = count.ok_or_else(|| KpError::Parse("no vertex element".into()))?;
    for need in [Column::X, Column::Y, Column::Z] {
        if !columns.contains(&need) {
            return Err(KpError::Parse("missing coordinate property".into()));
        }
    }
    let dim = columns
        .iter()
        .filter(|c| matches!(c, Column::Feature(_)))
        .count();
    let has_labels = columns.contains(&Column::Label);

    let mut points = Vec::with_capacity(count);
    let mut features = Mat::zeros(count, dim);
    let mut labels = if has_labels {
        Some(Vec::with_capacity(count))
    } else {
        None
    };
    for row in 0..count {
        let line = next_line()?;
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != columns.len() {
            return Err(KpError::Parse(format!(
                "row {row}: expected {} values, got {}",
                columns.len(),
                values.len()
            )));
        }
        let mut p = Vec3::ZERO;
        for (col, raw) in columns.iter().zip(values) {
            match col {
                Column::Label => {
                    let v: i64 = raw
                        .parse()
                        .map_err(|_| KpError::Parse(format!("row {row}: bad label {raw}")))?;
                    if v < 0 {
                        return Err(KpError::Parse(format!("row {row}: negative label")));
                    }
                    labels.as_mut().unwrap().push(v as u32);
                }
                Column::X | Column::Y | Column::Z | Column::Feature(_) => {
                    let v: f64 = raw
                        .parse()
                        .map_err(|_| KpError::Parse(format!("row {row}: bad number {raw}")))?;
                    match col {
                        Column::X => p.x = v,
                        Column::Y => p.y = v,
                        Column::Z => p.z = v,
                        Column::Feature(d) => {
                            if *d >= dim {
                                return Err(KpError::Parse(format!(
                                    "feature column f_{d} out of range"
                                )));
                            }
                            features.set(row, *d, v);
                        }
                        Column::Label => unreachable!(),
                    }
                }
            }
        }
        points.push(p);
    }

    let mut cloud = PointCloud::new(points, features);
    cloud.labels = labels;
    cloud.validate()?;
    Ok(cloud)
}

pub fn read_ply_file(path: &Path) -> Result<PointCloud> {
    read_ply(std::fs::File::open(path)?)
}

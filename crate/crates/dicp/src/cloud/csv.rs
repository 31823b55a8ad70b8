//! Pointcloud CSV IO.
//!
//! The header decides the layout: `x,y[,z][,nx,ny[,nz]][,weight]`. Every
//! value must parse as a finite number; offending rows are reported with
//! their 1-based file line number (the header is line 1).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::cloud::{AnyCloud, Cloud2, Cloud3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq)]
struct Layout {
    dim: usize,
    has_normals: bool,
    has_weight: bool,
}

impl Layout {
    fn from_header(header: &str) -> Result<Layout> {
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        let layout = match fields.as_slice() {
            ["x", "y"] => Layout {
                dim: 2,
                has_normals: false,
                has_weight: false,
            },
            ["x", "y", "weight"] => Layout {
                dim: 2,
                has_normals: false,
                has_weight: true,
            },
            ["x", "y", "z"] => Layout {
                dim: 3,
                has_normals: false,
                has_weight: false,
            },
            ["x", "y", "z", "weight"] => Layout {
                dim: 3,
                has_normals: false,
                has_weight: true,
            },
            ["x", "y", "nx", "ny"] => Layout {
                dim: 2,
                has_normals: true,
                has_weight: false,
            },
            ["x", "y", "nx", "ny", "weight"] => Layout {
                dim: 2,
                has_normals: true,
                has_weight: true,
            },
            ["x", "y", "z", "nx", "ny", "nz"] => Layout {
                dim: 3,
                has_normals: true,
                has_weight: false,
            },
            ["x", "y", "z", "nx", "ny", "nz", "weight"] => Layout {
                dim: 3,
                has_normals: true,
                has_weight: true,
            },
            _ => {
                return Err(Error::Data(format!(
                "unrecognized pointcloud header '{header}'; expected x,y[,z][,nx,ny[,nz]][,weight]"
            )))
            }
        };
        Ok(layout)
    }

    fn field_count(&self) -> usize {
        self.dim + if self.has_normals { self.dim } else { 0 } + usize::from(self.has_weight)
    }
}

pub fn load_csv(path: &Path) -> Result<AnyCloud> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&text)
}

pub(crate) fn parse_csv(text: &str) -> Result<AnyCloud> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data("pointcloud file is empty".into()))?;
    let layout = Layout::from_header(header)?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != layout.field_count() {
            return Err(Error::Data(format!(
                "line {line_no}: expected {} fields, found {}",
                layout.field_count(),
                fields.len()
            )));
        }
        let mut values = Vec::with_capacity(fields.len());
        for (col, field) in fields.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "line {line_no}: cannot parse '{field}' in column {}",
                    col + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "line {line_no}: non-finite value in column {}",
                    col + 1
                )));
            }
            values.push(v);
        }
        rows.push(values);
    }

    let d = layout.dim;
    let weight_col = layout.field_count() - 1;
    let weights: Option<Vec<f64>> = layout
        .has_weight
        .then(|| rows.iter().map(|r| r[weight_col]).collect());

    let cloud = if d == 2 {
        let points = rows.iter().map(|r| Vector2::new(r[0], r[1])).collect();
        let mut cloud = Cloud2::new(points)?;
        if layout.has_normals {
            cloud = cloud.with_normals(rows.iter().map(|r| Vector2::new(r[2], r[3])).collect())?;
        }
        if let Some(w) = weights {
            cloud = cloud.with_prior_weights(w)?;
        }
        AnyCloud::Planar(cloud)
    } else {
        let points = rows
            .iter()
            .map(|r| Vector3::new(r[0], r[1], r[2]))
            .collect();
        let mut cloud = Cloud3::new(points)?;
        if layout.has_normals {
            cloud = cloud.with_normals(
                rows.iter()
                    .map(|r| Vector3::new(r[3], r[4], r[5]))
                    .collect(),
            )?;
        }
        if let Some(w) = weights {
            cloud = cloud.with_prior_weights(w)?;
        }
        AnyCloud::Spatial(cloud)
    };
    Ok(cloud)
}

pub fn save_csv(cloud: &AnyCloud, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(cloud))?;
    Ok(())
}

pub(crate) fn to_csv_string(cloud: &AnyCloud) -> String {
    let mut out = String::new();
    match cloud {
        AnyCloud::Planar(c) => {
            write_header(
                &mut out,
                2,
                c.normals().is_some(),
                c.prior_weights().is_some(),
            );
            for i in 0..c.len() {
                let p = c.point(i);
                write!(out, "{},{}", p[0], p[1]).unwrap();
                if let Some(ns) = c.normals() {
                    write!(out, ",{},{}", ns[i][0], ns[i][1]).unwrap();
                }
                if c.prior_weights().is_some() {
                    write!(out, ",{}", c.prior_weight(i)).unwrap();
                }
                out.push('\n');
            }
        }
        AnyCloud::Spatial(c) => {
            write_header(
                &mut out,
                3,
                c.normals().is_some(),
                c.prior_weights().is_some(),
            );
            for i in 0..c.len() {
                let p = c.point(i);
                write!(out, "{},{},{}", p[0], p[1], p[2]).unwrap();
                if let Some(ns) = c.normals() {
                    write!(out, ",{},{},{}", ns[i][0], ns[i][1], ns[i][2]).unwrap();
                }
                if c.prior_weights().is_some() {
                    write!(out, ",{}", c.prior_weight(i)).unwrap();
                }
                out.push('\n');
            }
        }
    }
    out
}

fn write_header(out: &mut String, dim: usize, normals: bool, weight: bool) {
    out.push_str(if dim == 2 { "x,y" } else { "x,y,z" });
    if normals {
        out.push_str(if dim == 2 { ",nx,ny" } else { ",nx,ny,nz" });
    }
    if weight {
        out.push_str(",weight");
    }
    out.push('\n');
}

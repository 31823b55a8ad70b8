//! Scan persistence: a compact binary format and a CSV debug loader.
//!
//! Binary layout, all fields little-endian: magic `PSCN`, `u32` azimuth
//! count, `u32` range bin count, `f64` range resolution, the azimuth angles
//! as `f64`, then the intensities as `f32` in azimuth-major order.
//! Timestamps are not persisted.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::PolarScan;

const MAGIC: [u8; 4] = *b"PSCN";

pub fn save_scan_pscn(scan: &PolarScan, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(
        &u32::try_from(scan.num_azimuths())
            .map_err(|_| too_big())?
            .to_le_bytes(),
    )?;
    out.write_all(
        &u32::try_from(scan.num_range_bins())
            .map_err(|_| too_big())?
            .to_le_bytes(),
    )?;
    out.write_all(&scan.range_resolution().to_le_bytes())?;
    for &a in scan.azimuth_angles() {
        out.write_all(&a.to_le_bytes())?;
    }
    for &v in scan.intensities() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn too_big() -> Error {
    Error::Data("scan dimensions exceed the u32 header fields".into())
}

pub fn load_scan_pscn(path: &Path) -> Result<PolarScan> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a PSCN scan (bad magic {magic:?})",
            path.display()
        )));
    }
    let azimuths = read_u32(&mut reader)? as usize;
    let range_bins = read_u32(&mut reader)? as usize;
    let resolution = read_f64(&mut reader)?;
    let angles: Vec<f64> = (0..azimuths)
        .map(|_| read_f64(&mut reader))
        .collect::<Result<_>>()?;
    let count = azimuths
        .checked_mul(range_bins)
        .ok_or_else(|| Error::Data("scan dimensions overflow".into()))?;
    let mut intensities = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        reader.read_exact(&mut buf)?;
        intensities.push(f32::from_le_bytes(buf) as f64);
    }
    PolarScan::new(angles, range_bins, resolution, intensities)
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(reader: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    reader.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Loads the line-oriented debug format: blank lines and `#` comments are
/// skipped, the first payload line must be `range_resolution,<meters>`, and
/// every following line is one azimuth row, `angle,i0,i1,...`, all with the
/// same number of intensity fields.
pub fn load_scan_csv(path: &Path) -> Result<PolarScan> {
    let reader = BufReader::new(File::open(path)?);
    let mut resolution: Option<f64> = None;
    let mut angles = Vec::new();
    let mut intensities = Vec::new();
    let mut range_bins: Option<usize> = None;
    for (number, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        if resolution.is_none() {
            if fields.next() != Some("range_resolution") {
                return Err(Error::Data(format!(
                    "line {}: expected a range_resolution header before scan rows",
                    number + 1
                )));
            }
            let value = fields
                .next()
                .ok_or_else(|| Error::Data("range_resolution header has no value".into()))?;
            resolution = Some(parse_field(value, number)?);
            if fields.next().is_some() {
                return Err(Error::Data(format!(
                    "line {}: range_resolution takes a single value",
                    number + 1
                )));
            }
            continue;
        }
        let angle = parse_field(
            fields
                .next()
                .ok_or_else(|| Error::Data(format!("line {}: empty scan row", number + 1)))?,
            number,
        )?;
        let row: Vec<f64> = fields
            .map(|f| parse_field(f, number))
            .collect::<Result<_>>()?;
        match range_bins {
            None => range_bins = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Data(format!(
                    "line {}: row has {} intensities, previous rows had {w}",
                    number + 1,
                    row.len()
                )));
            }
            Some(_) => {}
        }
        angles.push(angle);
        intensities.extend(row);
    }
    let resolution =
        resolution.ok_or_else(|| Error::Data("scan CSV has no range_resolution header".into()))?;
    let range_bins =
        range_bins.ok_or_else(|| Error::Data("scan CSV has no azimuth rows".into()))?;
    PolarScan::new(angles, range_bins, resolution, intensities)
}

fn parse_field(field: &str, line_index: usize) -> Result<f64> {
    field.parse::<f64>().map_err(|_| {
        Error::Data(format!(
            "line {}: {field:?} is not a number",
            line_index + 1
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_scan() -> PolarScan {
        // Intensities on a 0.25 grid survive the f32 narrowing exactly.
        let intensities: Vec<f64> = (0..3 * 5).map(|i| (i % 7) as f64 * 0.25).collect();
        PolarScan::new(vec![0.0, 1.1, 2.9], 5, 0.044, intensities).unwrap()
    }

    #[test]
    fn binary_roundtrip_preserves_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.pscn");
        let scan = sample_scan();
        save_scan_pscn(&scan, &path).unwrap();
        let back = load_scan_pscn(&path).unwrap();
        assert_eq!(back.azimuth_angles(), scan.azimuth_angles());
        assert_eq!(back.num_range_bins(), scan.num_range_bins());
        assert_eq!(back.range_resolution(), scan.range_resolution());
        assert_eq!(back.intensities(), scan.intensities());
        assert_eq!(back.timestamp(), None);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.pscn");
        std::fs::write(&path, b"NCSP garbage that is long enough to read").unwrap();
        assert!(matches!(load_scan_pscn(&path), Err(Error::Data(_))));
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.pscn");
        save_scan_pscn(&sample_scan(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_scan_pscn(&path).is_err());
    }

    #[test]
    fn csv_rows_parse_with_comments_and_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.csv");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "# synthetic capture").unwrap();
        writeln!(f).unwrap();
        writeln!(f, "range_resolution, 0.5").unwrap();
        writeln!(f, "0.0, 1.0, 2.0, 3.0").unwrap();
        writeln!(f, "# midway comment").unwrap();
        writeln!(f, "1.57, 4.0, 5.0, 6.0").unwrap();
        drop(f);
        let scan = load_scan_csv(&path).unwrap();
        assert_eq!(scan.num_azimuths(), 2);
        assert_eq!(scan.num_range_bins(), 3);
        assert_eq!(scan.range_resolution(), 0.5);
        assert_eq!(scan.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(scan.azimuth_angles()[1], 1.57);
    }

    #[test]
    fn csv_rows_with_mismatched_widths_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.csv");
        std::fs::write(&path, "range_resolution,0.5\n0.0,1.0,2.0\n0.3,1.0\n").unwrap();
        assert!(matches!(load_scan_csv(&path), Err(Error::Data(_))));
    }

    #[test]
    fn csv_without_the_resolution_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.csv");
        std::fs::write(&path, "0.0,1.0,2.0\n").unwrap();
        assert!(matches!(load_scan_csv(&path), Err(Error::Data(_))));
    }
}
